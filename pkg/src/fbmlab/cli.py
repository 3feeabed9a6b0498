"""Command-line entry point: ``fbmlab <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .errors import FbmLabError
from .fbm_core import (KernelTable, TimeGrid, sample_fbm_cholesky, sample_fbm_circulant,
                       sample_wiener, volterra_build)
from .girsanov import girsanov_weights
from .hilbert import QpSearchConfig, qp_box_inf, qp_box_search
from .lab import ExperimentConfig, run_experiment, simulate_terminal
from .nv_density import g_estimate, g_theory_band
from .rng import RandomStream
from .scheme import GrrFunctional, build_partition, euler_split, grr_calibrate, grr_holder_ratio
from .sde import SdeProblem, make_fields, solve_young_euler


def _emit(args, name: str, header, rows, summary: dict) -> None:
    """Write rows as CSV or the summary as JSON, to --out or stdout."""
    if args.format == "csv":
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            io.write_rows_csv(out / f"{name}.csv", header, rows)
        else:
            print(",".join(header))
            for row in rows:
                print(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
        return
    text = json.dumps(summary, indent=2, sort_keys=True, default=float)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n")
    else:
        print(text)


def cmd_simulate(args):
    stream = RandomStream(args.seed)
    if args.method == "circulant":
        path = sample_fbm_circulant(args.hurst, args.n_steps, args.t, args.dim, args.n_paths, stream)
    elif args.method == "volterra":
        fine = TimeGrid.uniform(args.n_steps * 8, args.t)
        w = sample_wiener(fine, args.dim, args.n_paths, stream)
        path = volterra_build(w, KernelTable.build(args.hurst, args.t), TimeGrid.uniform(args.n_steps, args.t))
    else:
        path = sample_fbm_cholesky(args.hurst, TimeGrid.uniform(args.n_steps, args.t), args.dim,
                                   args.n_paths, stream)
    end = path.values[:, -1]
    summary = {"method": args.method, "n_paths": args.n_paths, "seed": args.seed,
               "terminal_variance": end.var(axis=0, ddof=1).tolist(), "target": args.t ** (2 * args.hurst)}
    _emit(args, "paths", *io.path_rows(path), summary)


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("hurst", "t", "n_paths", "seed") if getattr(args, k) is not None}
    if args.out:
        overrides["out_dir"] = args.out
    return replace(cfg, **overrides).validate()


def cmd_solve(args):
    cfg = _config_from_args(args)
    xt = simulate_terminal(cfg.problem(), cfg.t, cfg.n_paths, cfg.n_steps, RandomStream(cfg.seed).child("main"),
                           cfg.sampler, cfg.w_refine, cfg.batch)
    header = ["path_id"] + [f"x{j}" for j in range(xt.shape[1])]
    rows = [[i, *map(float, x)] for i, x in enumerate(xt)]
    summary = {"mean": xt.mean(axis=0).tolist(), "std": xt.std(axis=0, ddof=1).tolist(), "n_paths": cfg.n_paths}
    _emit(args, "terminal", header, rows, summary)


def cmd_kernel(args):
    table = KernelTable.build(args.hurst, args.t)
    if args.save:
        table.save(args.save)
    times = np.linspace(0.0, args.t, args.n_steps + 1)[1:]
    rows = [[float(s), float(table.k(args.t, s))] for s in times[:-1]]
    summary = {"hurst": args.hurst, "t": args.t, "scale": table.scale,
               "calibration_residual": table.calibration_residual, "closed_form_gap": table.closed_form_gap,
               "energy": table.energy(args.t, 0.0, args.t), "target": args.t ** (2 * args.hurst)}
    _emit(args, "kernel", ["s", "k"], rows, summary)


def cmd_partition(args):
    part = build_partition(args.t, args.n, KernelTable.build(args.hurst, args.t))
    rows = [[i + 1, float(part.times[i + 1]), float(e)] for i, e in enumerate(part.cell_energies)]
    summary = {"n": part.n, "sigma_n_sq": part.sigma_n_sq, "mesh": part.mesh,
               "max_rel_energy_error": float(np.max(np.abs(part.cell_energies / part.sigma_n_sq - 1)))}
    _emit(args, "partition", ["i", "t_i", "cell_energy"], rows, summary)


def cmd_split(args):
    table = KernelTable.build(args.hurst, args.t)
    part = build_partition(args.t, args.n, table)
    fields = make_fields("tanh_net", m=2)
    grid = TimeGrid.union(TimeGrid(part.times), TimeGrid.uniform(args.n_steps, args.t))
    w = sample_wiener(grid, fields.d, args.n_paths, RandomStream(args.seed))
    b = volterra_build(w, table, grid)
    x = solve_young_euler(SdeProblem(np.zeros(fields.m), fields, args.hurst, "young-multid"), b)
    split = euler_split(x, w, part, fields, table)
    m = fields.m
    header = ["path_id", "i"] + [f"{n}{j}" for n in "FIR" for j in range(m)]
    rows = [[p, i + 1, *split.F[p, i + 1], *split.I[p, i], *split.R[p, i]]
            for p in range(args.n_paths) for i in range(part.n)]
    summary = {"n": part.n, "remainder_ratio": split.remainder_ratio(),
               "max_telescoping_gap": float(split.telescoping_gap().max())}
    _emit(args, "split", header, rows, summary)


def cmd_girsanov(args):
    dens, _ = girsanov_weights(make_fields("sin_shift"), 0.0, args.hurst, args.t, args.n_paths,
                               RandomStream(args.seed), n_steps=args.n_steps)
    se = dens.xi.std(ddof=1) / np.sqrt(dens.xi.size)
    rows = [[i, float(s), float(d), float(x)] for i, s, d, x in dens.rows()]
    summary = {"mean_xi": float(dens.xi.mean()), "se": float(se), "z": float((dens.xi.mean() - 1) / se),
               "capped": int(dens.capped.sum())}
    _emit(args, "xi", ["path_id", "S", "D", "xi"], rows, summary)


def cmd_g_estimate(args):
    fields = make_fields("arctan", sigma=args.sigma, scale=args.drift_scale)
    problem = SdeProblem(0.0, fields, args.hurst, "additive-1d")
    est = g_estimate(problem, args.t, args.n_paths, RandomStream(args.seed), bins=args.bins)
    lo, hi = g_theory_band(args.sigma, args.t, args.hurst, abs(args.drift_scale))
    summary = {"theory_band": [lo, hi], "g_min": float(est.values.min()), "g_max": float(est.values.max()),
               "within_band": bool(np.all((est.values >= lo) & (est.values <= hi))), "e_abs": est.e_abs}
    _emit(args, "g_estimate", ["bin_center", "g_hat", "se", "n_samples"], est.as_rows(), summary)


def cmd_density_check(args):
    cfg = _config_from_args(args)
    report, _ = run_experiment(cfg)
    if args.format == "json" and not args.out:
        print(report.to_json(cfg.digest()), end="")
    elif args.format == "csv":
        _emit(args, "frontier", ["c2", "c1"], report.frontier, {})
    return 0 if report.passed else 1


def cmd_qp_verify(args):
    q, a, b = io.parse_qp(Path(args.file).read_text())
    found = qp_box_search(q, a, b, QpSearchConfig(seed=args.seed))
    corner = qp_box_inf(q, a, b)
    summary = {"corner": corner, "search_min": found, "holds": bool(found >= corner - 1e-6)}
    _emit(args, "qp", ["corner", "search_min"], [[corner, found]], summary)
    return 0 if summary["holds"] else 1


def cmd_grr_check(args):
    grid = TimeGrid.uniform(args.n_steps, args.t)
    stream = RandomStream(args.seed)
    functional = GrrFunctional(args.gamma, args.p, (0.0, args.t))
    calib = sample_fbm_cholesky(args.hurst, grid, 1, args.n_paths, stream.child("calibration"))
    held = sample_fbm_cholesky(args.hurst, grid, 1, args.n_paths, stream.child("held-out"))
    const = grr_calibrate(calib, functional, args.hurst)
    held_ratio = grr_holder_ratio(held, functional, args.hurst)
    rows = [[i, float(r)] for i, r in enumerate(held_ratio)]
    summary = {"constant": const, "analytic_constant": functional.analytic_constant(),
               "violations": int(np.sum(held_ratio > const))}
    _emit(args, "grr", ["path_id", "ratio"], rows, summary)
    return 0 if summary["violations"] == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbmlab", description="Density bounds for fBm-driven equations")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **defaults):
        # each subcommand gets its own copies of the shared flags so defaults stay per command
        p = sub.add_parser(name)
        p.add_argument("--hurst", type=float, default=None)
        p.add_argument("--t", type=float, default=None)
        p.add_argument("--n-paths", dest="n_paths", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="INI file with [problem], [numerics], [output]")
        p.add_argument("--out", default=None, help="output directory (stdout when omitted)")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        p.add_argument("--n-steps", dest="n_steps", type=int, default=None)
        p.set_defaults(func=fn, **defaults)
        return p

    p = add("simulate", cmd_simulate, hurst=0.75, t=1.0, n_paths=10, seed=0, n_steps=64)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--method", choices=("cholesky", "circulant", "volterra"), default="cholesky")
    add("solve", cmd_solve)
    p = add("kernel", cmd_kernel, hurst=0.75, t=1.0, n_steps=16)
    p.add_argument("--save", default=None, help="write the binary kernel table here")
    p = add("partition", cmd_partition, hurst=0.75, t=1.0)
    p.add_argument("--n", type=int, default=16)
    p = add("split", cmd_split, hurst=0.75, t=1.0, n_paths=100, seed=0, n_steps=256)
    p.add_argument("--n", type=int, default=16)
    add("girsanov-check", cmd_girsanov, hurst=0.7, t=1.0, n_paths=2000, seed=0, n_steps=200)
    p = add("g-estimate", cmd_g_estimate, hurst=0.75, t=0.5, n_paths=2000, seed=0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--drift-scale", dest="drift_scale", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=20)
    add("density-check", cmd_density_check)
    p = add("qp-verify", cmd_qp_verify, seed=0)
    p.add_argument("file", help="text file: a line 'a b' then the rows of Q")
    p = add("grr-check", cmd_grr_check, hurst=0.75, t=1.0, n_paths=100, seed=0, n_steps=128)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--p", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except FbmLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
