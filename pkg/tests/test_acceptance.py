"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line with its measurements.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in the terminal
summary. ``python tests/test_acceptance.py`` runs the same checks without pytest.
"""

import time

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import solve_ivp

from fbmlab.fbm_core import (KernelTable, TimeGrid, cov_r, kernel_cross, kernel_energy, sample_fbm_cholesky,
                             sample_wiener, volterra_build)
from fbmlab.girsanov import girsanov_weights
from fbmlab.hilbert import QpSearchConfig, StepFunction, inner_rough, qp_box_inf, qp_box_search
from fbmlab.lab import ExperimentConfig, check_lower_bound, kde_estimate, run_experiment, simulate_terminal
from fbmlab.nv_density import density_bounds_from_g, g_estimate, g_theory_band
from fbmlab.rng import RandomStream
from fbmlab.scheme import (GrrFunctional, build_partition, conditional_cov, euler_split, grr_calibrate,
                           grr_holder_ratio)
from fbmlab.sde import (SdeProblem, const_fields, make_fields, malliavin_deriv_additive, solve_additive_ode,
                        solve_young_euler)

RESULTS = []

_TABLES = {}


def _table(h, t=1.0):
    if (h, t) not in _TABLES:
        _TABLES[(h, t)] = KernelTable.build(h, t)
    return _TABLES[(h, t)]


def _record(number, title, ok, detail, started):
    elapsed = time.perf_counter() - started
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail} ({elapsed:.1f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_01_covariance_factorization():
    started = time.perf_counter()
    pts = np.linspace(0.1, 1.0, 10)
    errs = {h: max(abs(kernel_cross(s, t, _table(h)) - cov_r(s, t, h)) for s in pts for t in pts)
            for h in (0.3, 0.75)}
    ok = all(e <= 1e-4 for e in errs.values())
    _record(1, "covariance factorization", ok,
            ", ".join(f"H={h} max err {e:.2e}" for h, e in errs.items()) + " (tol 1e-4)", started)


def test_criterion_02_kernel_energy():
    started = time.perf_counter()
    worst = max(abs(kernel_energy(t, 0.0, t, _table(h)) / t ** (2 * h) - 1)
                for h in (0.3, 0.75) for t in (0.25, 0.5, 1.0))
    _record(2, "kernel energy identity", worst <= 1e-6, f"max rel err {worst:.2e} (tol 1e-6)", started)


def test_criterion_03_sampler_law():
    started = time.perf_counter()
    parts, ok = [], True
    for h in (0.3, 0.75):
        end = sample_fbm_cholesky(h, TimeGrid.uniform(64), 1, 10_000, RandomStream(31)).values[:, -1, 0]
        centred = (end - end.mean()) ** 2
        var, se = end.var(ddof=1), centred.std(ddof=1) / np.sqrt(end.size)
        z = abs(var - 1.0) / se
        w = sample_wiener(TimeGrid.uniform(512), 1, 10_000, RandomStream(32))
        vb = volterra_build(w, _table(h), TimeGrid.uniform(8)).values[:, -1, 0]
        cb = sample_fbm_cholesky(h, TimeGrid.uniform(8), 1, 10_000, RandomStream(33)).values[:, -1, 0]
        p = stats.ks_2samp(vb, cb).pvalue
        ok &= z <= 4 and p > 0.01
        parts.append(f"H={h} var z={z:.2f} KS p={p:.3f}")
    _record(3, "sampler law", ok, "; ".join(parts) + " (need z<=4, p>0.01)", started)


def _admissible_qp(gen, n):
    while True:
        a = gen.normal(size=(n, n))
        q = a @ a.T + 0.1 * np.eye(n)
        if np.all(q.sum(axis=1) >= 0):
            return q


def test_criterion_04_qp_corner_value():
    started = time.perf_counter()
    gen = np.random.default_rng(404)
    below, corner_ok, worst, negative = 0, 0, 0.0, 0
    for k in range(100):
        n = int(gen.integers(1, 5))
        q = _admissible_qp(gen, n)
        a, b = gen.uniform(0.2, 2.0, 2)
        inf = qp_box_inf(q, a, b)
        corner = float((b * np.ones(n)) @ q @ (a * np.ones(n)))
        corner_ok += np.isclose(corner, inf, rtol=1e-13, atol=0)
        found = qp_box_search(q, a, b, QpSearchConfig(seed=k))
        negative += bool(np.any(q < 0))
        if found < inf - 1e-6:
            below += 1
            worst = min(worst, found - inf)
    ok = below == 0 and corner_ok == 100
    _record(4, "QP corner value", ok,
            f"search below corner on {below}/100 instances (worst gap {worst:.3g}); corner matches on "
            f"{corner_ok}/100; {negative} instances have a negative entry", started)


def test_criterion_05_rkhs_lower_bound():
    started = time.perf_counter()
    gen = np.random.default_rng(505)
    worst = np.inf
    for _ in range(50):
        tau = gen.uniform(0.3, 1.0)
        pair = []
        for n_cells in gen.integers(2, 8, 2):
            cuts = np.sort(gen.uniform(0, tau, n_cells - 1))
            pair.append(StepFunction(np.concatenate([[0.0], cuts, [tau]]), gen.uniform(0.2, 3.0, (n_cells, 1))))
        f, g = pair
        b, a = f.values.min(), g.values.min()
        worst = min(worst, inner_rough(f, g, 0.3).value / (a * b * tau ** 0.6))
    _record(5, "RKHS lower bound", worst >= 1 - 1e-3,
            f"min ratio inner/(ab tau^2H) = {worst:.4f} over 50 pairs (need >= 0.999)", started)


def test_criterion_06_g_bounds():
    started = time.perf_counter()
    t, sigma, parts, ok = 0.5, 1.0, [], True
    for h in (0.3, 0.75):
        base = sigma ** 2 * t ** (2 * h)
        problem = SdeProblem(0.0, make_fields("arctan", sigma=sigma, scale=1.0), h, "additive-1d")
        est = g_estimate(problem, t, 10_000, RandomStream(60))
        lo, hi = np.exp(-2) * base * 0.9, np.exp(2) * base * 1.1
        inside = bool(np.all((est.values >= lo) & (est.values <= hi)))
        flat = SdeProblem(0.0, const_fields(0.0, sigma), h, "additive-1d")
        est0 = g_estimate(flat, t, 10_000, RandomStream(61))
        # ĝ is deterministic here, so the SE is at rounding level; allow rounding in the comparison
        tol = 3 * est0.se + 1e-12 * base
        equal = bool(np.all(np.abs(est0.values - base) <= tol))
        ok &= inside and equal
        parts.append(f"H={h} g/base in [{est.values.min() / base:.3f}, {est.values.max() / base:.3f}] "
                     f"band [{lo / base:.3f}, {hi / base:.3f}], V0=0 max dev {np.max(np.abs(est0.values - base)):.1e}")
    _record(6, "g(F) bounds", ok, "; ".join(parts), started)


def test_criterion_07_additive_sandwich():
    started = time.perf_counter()
    t, sigma, parts, ok = 0.5, 1.0, [], True
    for h in (0.3, 0.75):
        problem = SdeProblem(0.0, make_fields("arctan", sigma=sigma, scale=1.0), h, "additive-1d")
        stream = RandomStream(70)
        moments = simulate_terminal(problem, t, 100_000, 128, stream.child("moments"))[:, 0]
        mean = moments.mean()
        e_abs = np.abs(moments - mean).mean()
        x = simulate_terminal(problem, t, 100_000, 128, stream.child("main"))[:, 0] - mean
        z = np.linspace(-2 * sigma * t ** h, 2 * sigma * t ** h, 81)
        kde = kde_estimate(x, z)
        c1, c2 = g_theory_band(sigma, t, h, 1.0)
        lower, upper = density_bounds_from_g(c1, c2, e_abs, z)
        frac = float(np.mean((kde.density >= lower) & (kde.density <= upper)))
        ok &= frac >= 0.99
        parts.append(f"H={h} inside at {100 * frac:.1f}% of points")
    _record(7, "additive density sandwich", ok, "; ".join(parts) + " (need >= 99%)", started)


def test_criterion_08_girsanov_identity():
    started = time.perf_counter()
    dens, _ = girsanov_weights(make_fields("sin_shift"), 0.0, 0.7, 1.0, 10_000, RandomStream(80))
    mean = dens.xi.mean()
    se = dens.xi.std(ddof=1) / np.sqrt(dens.xi.size)
    _record(8, "Girsanov identity", abs(mean - 1) <= 3 * se,
            f"mean xi {mean:.4f}, SE {se:.4f}, |z| {abs(mean - 1) / se:.2f} (need <= 3)", started)


def test_criterion_09_multiplicative_two_sided():
    started = time.perf_counter()
    cfg = ExperimentConfig(case="multiplicative-1d", fields="sin_shift", a=(0.0,), hurst=0.7, t=1.0,
                           n_paths=100_000, n_steps=64, grid_points=81, seed=9)
    report, _ = run_experiment(cfg)
    two = report.metrics["two_sided"]
    frac = two["violations"] / two["n_region"]
    ok = frac <= 0.01 and two["C1"] > 0 and two["C2"] > 0
    _record(9, "multiplicative two-sided bound", ok,
            f"C1={two['C1']:.3f} C2={two['C2']:.3f}, violations {two['violations']}/{two['n_region']} "
            "(need <= 1%)", started)


def test_criterion_10_partition():
    started = time.perf_counter()
    worst, scaled = 0.0, []
    for n in (4, 8, 16, 32, 64, 128, 256):
        part = build_partition(1.0, n, _table(0.75))
        worst = max(worst, float(np.max(np.abs(part.cell_energies / part.sigma_n_sq - 1))))
        scaled.append(part.mesh * n ** (1 / 1.5))
    spread = max(scaled) / min(scaled)
    _record(10, "equal-energy partition", worst <= 1e-6 and spread <= 3,
            f"max rel energy err {worst:.1e}, mesh n^(1/2H) in [{min(scaled):.3f}, {max(scaled):.3f}] "
            f"ratio {spread:.3f} (need <= 3)", started)


def _split(fields, n, n_paths, seed):
    table = _table(0.75)
    part = build_partition(1.0, n, table)
    grid = TimeGrid.union(TimeGrid(part.times), TimeGrid.uniform(256))
    w = sample_wiener(grid, fields.d, n_paths, RandomStream(seed))
    b = volterra_build(w, table, grid)
    x = solve_young_euler(SdeProblem(np.zeros(fields.m), fields, 0.75, "young-multid"), b)
    return euler_split(x, w, part, fields, table), x


def test_criterion_11_euler_split():
    started = time.perf_counter()
    fields = make_fields("tanh_net", m=2)
    ratios, gap = [], 0.0
    for n in (8, 16, 32, 64):
        split, x = _split(fields, n, 1000, 110)
        ratios.append(split.remainder_ratio())
        gap = max(gap, float(np.max(np.abs(split.F[:, -1] - x.values[:, -1]))),
                  float(split.telescoping_gap().max()))
    const, _ = _split(const_fields(0.0, np.array([[1.0, 0.3], [0.0, 1.0]]), m=2), 16, 1000, 111)
    r_const = float(np.max(np.abs(const.R)))
    decreasing = all(b < a for a, b in zip(ratios, ratios[1:]))
    ok = gap <= 1e-10 and r_const <= 1e-12 and decreasing
    _record(11, "Euler split", ok,
            f"telescoping gap {gap:.1e}, constant-field max|R| {r_const:.1e}, "
            f"E|R|^2/E|I|^2 = {', '.join(f'{r:.2e}' for r in ratios)}", started)


def test_criterion_12_conditional_covariance():
    started = time.perf_counter()
    fields = make_fields("tanh_net", m=2)
    grid = TimeGrid.uniform(64)
    b = sample_fbm_cholesky(0.75, grid, 2, 1000, RandomStream(120))
    x = solve_young_euler(SdeProblem(np.zeros(2), fields, 0.75, "young-multid"), b)
    sigma_sq = build_partition(1.0, 16, _table(0.75)).sigma_n_sq
    states = x.values.reshape(-1, 2)
    cov = conditional_cov(fields, states, sigma_sq)
    eig = np.linalg.eigvalsh(cov)
    lo, hi = eig.min() / sigma_sq, eig.max() / sigma_sq
    ok = lo >= fields.lam * (1 - 1e-12) and hi <= fields.Lam * (1 + 1e-12)
    _record(12, "conditional covariance sandwich", ok,
            f"{states.shape[0]} states, eigenvalues/sigma_n^2 in [{lo:.3f}, {hi:.3f}] within "
            f"[{fields.lam:.3f}, {fields.Lam:.3f}]", started)


def test_criterion_13_multid_lower_bound():
    started = time.perf_counter()
    base = dict(case="young-multid", fields="tanh_net", a=(0.0, 0.0), hurst=0.75, n_paths=100_000,
                n_steps=64, grid_points=41, seed=13)
    at_one, _ = run_experiment(ExperimentConfig(t=1.0, **base))
    at_half, art = run_experiment(ExperimentConfig(t=0.5, **base))
    bad, margin = check_lower_bound(art["kde"], (0.0, 0.0), 0.5, 0.75, at_one.c1, at_one.c2)
    ok = at_one.passed and at_half.passed and bad == 0
    _record(13, "multidimensional lower bound", ok,
            f"t=1: c1={at_one.c1:.4f} c2={at_one.c2:.3f}; t=0.5: c1={at_half.c1:.4f} c2={at_half.c2:.3f}; "
            f"t=1 pair at t=0.5: {bad} violations, min margin {margin:.3f}", started)


def test_criterion_14_grr():
    started = time.perf_counter()
    functional = GrrFunctional(0.6, 4, (0.0, 1.0))
    grid = TimeGrid.uniform(128)
    stream = RandomStream(140)
    calib = sample_fbm_cholesky(0.75, grid, 1, 100, stream.child("calibration"))
    held = sample_fbm_cholesky(0.75, grid, 1, 100, stream.child("held-out"))
    c = grr_calibrate(calib, functional, 0.75)
    ratios = grr_holder_ratio(held, functional, 0.75)
    bad = int(np.sum(ratios > c))
    _record(14, "GRR constant", bad == 0,
            f"calibrated constant {c:.3f} (analytic {functional.analytic_constant():.2f}), held-out max ratio "
            f"{ratios.max():.3f}, {bad} violations", started)


def test_criterion_15_malliavin_derivative():
    started = time.perf_counter()
    gen = np.random.default_rng(150)
    worst = 0.0
    deriv = lambda z: 1 / (1 + z ** 2)
    for h in (0.3, 0.75):
        b = sample_fbm_cholesky(h, TimeGrid.uniform(400), 1, 1, RandomStream(151))
        x = solve_additive_ode(0.0, np.arctan, 1.0, b)
        times, xv = x.times, x.values[0, :, 0]
        # oracle: the linear variational ODE y' = V0'(X_s) y from y(r) = sigma, with V0'(X) interpolated linearly
        coef = lambda s: np.interp(s, times, deriv(xv))
        for _ in range(10):
            r, t = np.sort(gen.uniform(0, 1, 2))
            sol = solve_ivp(lambda s, y: coef(s) * y, (r, t), [1.0], rtol=1e-11, atol=1e-14, max_step=times[1])
            closed = malliavin_deriv_additive(r, t, x, deriv, 1.0)
            worst = max(worst, abs(closed / sol.y[0, -1] - 1))
    _record(15, "Malliavin derivative closed form", worst <= 1e-4,
            f"max rel err {worst:.1e} over 20 (r, t) pairs (tol 1e-4)", started)


if __name__ == "__main__":
    import sys
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
