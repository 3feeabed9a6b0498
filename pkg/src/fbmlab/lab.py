"""Experiment orchestration: density estimation, Gaussian-bound fitting and reports."""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammainc, lambertw
from scipy.stats import norm

from .errors import ConfigError, DomainError, FbmLabError
from .fbm_core import KernelTable, TimeGrid, sample_fbm_cholesky, sample_wiener, volterra_build
from .rng import RandomStream
from .sde import SdeProblem, make_fields, solve_additive_ode, solve_piecewise_linear

REPORT_VERSION = 1
MIN_KDE_SAMPLES = 1000
CASES = ("additive-1d", "multiplicative-1d", "young-multid")


@dataclass
class KdeResult:
    """Density estimate on a product grid. Arrays have one axis per coordinate."""

    axes: tuple
    density: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    sd: np.ndarray
    bandwidth: np.ndarray
    n_samples: int
    level: float
    band: str

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def integral(self) -> float:
        out = self.density
        for ax in reversed(self.axes):
            out = np.trapezoid(out, ax, axis=-1)
        return float(out)


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate normal-reference bandwidth sd_j (4 / ((m + 2) N))^(1/(m + 4))."""
    n, m = samples.shape
    sd = samples.std(axis=0, ddof=1) if n > 1 else np.zeros(m)
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise DomainError("bandwidth degenerate: a coordinate has zero spread")
    return sd * (4.0 / ((m + 2) * n)) ** (1.0 / (m + 4))


def _linear_bin(samples: np.ndarray, lo: np.ndarray, hi: np.ndarray, n_bins: int) -> np.ndarray:
    """Multilinear binning onto n_bins equispaced centers per coordinate."""
    n, m = samples.shape
    pos = (samples - lo) / (hi - lo) * (n_bins - 1)
    base = np.clip(np.floor(pos).astype(int), 0, n_bins - 2)
    frac = pos - base
    counts = np.zeros((n_bins,) * m)
    for corner in range(2 ** m):
        bits = [(corner >> j) & 1 for j in range(m)]
        w = np.prod([frac[:, j] if b else 1 - frac[:, j] for j, b in enumerate(bits)], axis=0)
        idx = tuple(base[:, j] + b for j, b in enumerate(bits))
        np.add.at(counts, idx, w)
    return counts


def _kernel_matrix(grid: np.ndarray, centers: np.ndarray, h: float, order: int) -> np.ndarray:
    u = (grid[:, None] - centers[None, :]) / h
    k = norm.pdf(u) / h
    return k * (3 - u ** 2) / 2 if order == 4 else k


def _contract(counts: np.ndarray, kernels: list) -> np.ndarray:
    out = counts
    for k in kernels:
        out = np.tensordot(out, k, axes=([0], [1]))
    return out


def kde_estimate(samples, grid, bandwidth=None, n_boot: int = 200, level: float = 0.95,
                 seed: int = 0, order: int = 4, band: str = "simultaneous",
                 n_bins: int | None = None) -> KdeResult:
    """Product-kernel density estimate with bootstrap bands.

    ``order=4`` uses the Gaussian kernel phi(u)(3 - u^2)/2, which removes the leading
    smoothing bias so the bands are centred on the density rather than its blur;
    ``order=2`` is the plain Gaussian kernel. Bootstrap resamples are multinomial
    draws of the binned path counts. ``band="simultaneous"`` uses the studentized
    sup-statistic so the band holds on the whole grid at once; ``"pointwise"`` uses
    per-point normal quantiles of the bootstrap spread.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, m = samples.shape
    axes = (np.asarray(grid, dtype=float),) if m == 1 and np.ndim(grid[0]) == 0 else \
        tuple(np.asarray(g, dtype=float) for g in grid)
    if len(axes) != m:
        raise DomainError("grid needs one axis per coordinate")
    if order not in (2, 4):
        raise DomainError("order must be 2 or 4")
    if band not in ("simultaneous", "pointwise"):
        raise DomainError("band must be 'simultaneous' or 'pointwise'")
    if n < MIN_KDE_SAMPLES:
        warnings.warn(f"density estimate from {n} < {MIN_KDE_SAMPLES} samples", RuntimeWarning, stacklevel=2)
    h = silverman_bandwidth(samples) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (m,)).copy()
    if np.any(h <= 0):
        raise DomainError("bandwidth degenerate: must be positive")
    n_bins = n_bins or (2048 if m == 1 else 256)
    lo = samples.min(axis=0)
    hi = samples.max(axis=0)
    hi = np.where(hi > lo, hi, lo + h)
    counts = _linear_bin(samples, lo, hi, n_bins)
    kernels = [_kernel_matrix(axes[j], np.linspace(lo[j], hi[j], n_bins), h[j], order) for j in range(m)]
    density = _contract(counts, kernels) / n
    gen = np.random.Generator(np.random.Philox(key=[seed, 0xB007]))
    prob = (counts / counts.sum()).ravel()
    prob = np.clip(prob, 0, None)
    prob /= prob.sum()
    boots = np.empty((n_boot,) + density.shape)
    for r in range(n_boot):
        resample = gen.multinomial(n, prob).reshape(counts.shape)
        boots[r] = _contract(resample.astype(float), kernels) / n
    sd = boots.std(axis=0, ddof=1)
    if band == "pointwise":
        crit = norm.ppf(0.5 + level / 2)
    else:
        safe = np.where(sd > 0, sd, np.inf)
        stat = np.max(np.abs(boots - density) / safe, axis=tuple(range(1, density.ndim + 1)))
        crit = float(np.quantile(stat, level))
    return KdeResult(axes, density, density - crit * sd, density + crit * sd, sd, h, n, level, band)


@dataclass
class BoundReport:
    n_samples: int
    seed: int
    t: float
    hurst: float
    dim: int
    radius: float
    n_region: int
    frontier: list
    c1: float
    c2: float
    violations: int
    margins: list
    passed: bool
    metrics: dict = field(default_factory=dict)
    runtime: float = 0.0

    def to_json(self, config_hash: str = "") -> str:
        """Versioned JSON; runtime is left out so equal inputs give identical bytes."""
        doc = {
            "version": REPORT_VERSION,
            "config_hash": config_hash,
            "seed": self.seed,
            "metrics": _jsonable({
                "n_samples": self.n_samples, "t": self.t, "hurst": self.hurst, "dim": self.dim,
                "radius": self.radius, "n_region": self.n_region, "c1": self.c1, "c2": self.c2,
                "violations": self.violations, "frontier": self.frontier, **self.metrics}),
            "pass": bool(self.passed),
            "margins": _jsonable(self.margins),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _region(kde: KdeResult, a, t: float, h: float, radius_factor: float):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    pts = kde.points()
    dist_sq = np.sum((pts - a) ** 2, axis=1)
    radius = radius_factor * t ** h
    inside = dist_sq <= radius ** 2 * (1 + 1e-12)
    return inside, dist_sq, radius


def default_c2_grid() -> np.ndarray:
    return np.logspace(-2, 1, 61)


def lower_bound_frontier(kde: KdeResult, a, t: float, h: float, c2_grid=None,
                         radius_factor: float = 2.0) -> np.ndarray:
    """Rows (c2, c1) with c1 the largest constant keeping the bound under the lower band."""
    c2_grid = default_c2_grid() if c2_grid is None else np.asarray(c2_grid, dtype=float)
    inside, dist_sq, _ = _region(kde, a, t, h, radius_factor)
    lower = kde.lower.ravel()[inside]
    scaled = lower * t ** (kde.dim * h)
    c1 = np.array([np.min(scaled * np.exp(c2 * dist_sq[inside] / t ** (2 * h))) for c2 in c2_grid])
    return np.column_stack([c2_grid, c1])


def check_lower_bound(kde: KdeResult, a, t: float, h: float, c1: float, c2: float,
                      radius_factor: float = 2.0) -> tuple[int, float]:
    """Violations of c1 t^(-mH) exp(-c2 |x-a|^2 / t^(2H)) <= lower band and the smallest relative margin."""
    inside, dist_sq, _ = _region(kde, a, t, h, radius_factor)
    bound = c1 * t ** (-kde.dim * h) * np.exp(-c2 * dist_sq[inside] / t ** (2 * h))
    lower = kde.lower.ravel()[inside]
    return int(np.sum(bound > lower * (1 + 1e-12))), float(np.min((lower - bound) / bound))


def _frontier_mass(frontier: np.ndarray, dim: int, radius_factor: float) -> np.ndarray:
    """Mass of the bound over the test ball, in units where t = 1."""
    c2, c1 = frontier[:, 0], frontier[:, 1]
    ball = (np.pi / c2) ** (dim / 2) * gammainc(dim / 2, c2 * radius_factor ** 2)
    return np.where(c1 > 0, c1 * ball, -np.inf)


def verify_gaussian_lower_bound(kde: KdeResult, a, t: float, h: float, c2_grid=None,
                                radius_factor: float = 2.0, seed: int = 0) -> BoundReport:
    """Fit the admissible (c1, c2) frontier on |x - a| <= radius_factor t^H.

    Passes when some c2 on the grid admits c1 > 0. The reported pair is the frontier
    point whose bound carries the most mass over the test ball.
    """
    frontier = lower_bound_frontier(kde, a, t, h, c2_grid, radius_factor)
    inside, _, radius = _region(kde, a, t, h, radius_factor)
    mass = _frontier_mass(frontier, kde.dim, radius_factor)
    best = int(np.argmax(mass))
    c2, c1 = frontier[best]
    passed = bool(np.any(frontier[:, 1] > 0))
    if passed:
        violations, margin = check_lower_bound(kde, a, t, h, c1, c2, radius_factor)
    else:
        violations, margin = int(inside.sum()), float("-inf")
    return BoundReport(kde.n_samples, seed, t, h, kde.dim, radius, int(inside.sum()),
                       frontier.tolist(), float(c1), float(c2), violations, [margin], passed)


def _solve_constant(density: np.ndarray, dist_sq: np.ndarray, scale_sq: float) -> np.ndarray:
    """C with exp(-C d^2 / 2s) / (C sqrt(2 pi s)) = density, elementwise."""
    v = np.asarray(density, dtype=float) * np.sqrt(2 * np.pi * scale_sq)
    u = dist_sq / (2 * scale_sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        far = np.real(lambertw(u / v)) / np.where(u > 0, u, 1.0)
        out = np.where(u > 0, far, 1.0 / v)
    return np.where(v > 0, out, np.inf)


def two_sided_curve(c: float, x, a: float, t: float, h: float) -> np.ndarray:
    s = t ** (2 * h)
    x = np.asarray(x, dtype=float)
    return np.exp(-c * (x - a) ** 2 / (2 * s)) / (c * np.sqrt(2 * np.pi * s))


def fit_two_sided(kde: KdeResult, a: float, t: float, h: float,
                  radius_factor: float = 2.0) -> tuple[float, float]:
    """Smallest C1 and largest C2 with curve(C1) <= lower band and curve(C2) >= upper band.

    The curve exp(-C d^2/2s)/(C sqrt(2 pi s)) is decreasing in C at every point, so
    each grid point pins one constant and the fit is a max / min over the region.
    """
    if kde.dim != 1:
        raise DomainError("two-sided fit is one-dimensional")
    inside, dist_sq, _ = _region(kde, a, t, h, radius_factor)
    s = t ** (2 * h)
    c1 = float(np.max(_solve_constant(kde.lower[inside], dist_sq[inside], s)))
    c2 = float(np.min(_solve_constant(kde.upper[inside], dist_sq[inside], s)))
    return c1, c2


def check_two_sided(kde: KdeResult, a: float, t: float, h: float, c1: float, c2: float,
                    radius_factor: float = 2.0) -> tuple[int, int]:
    """Grid points where curve(C1) exceeds the upper band or curve(C2) falls below the lower band."""
    inside, _, _ = _region(kde, a, t, h, radius_factor)
    x = kde.axes[0][inside]
    low_bad = two_sided_curve(c1, x, a, t, h) > kde.upper[inside]
    up_bad = two_sided_curve(c2, x, a, t, h) < kde.lower[inside]
    return int(np.sum(low_bad | up_bad)), int(inside.sum())


@dataclass
class ExperimentConfig:
    case: str = "young-multid"
    fields: str = "tanh_net"
    field_params: dict = field(default_factory=dict)
    a: tuple = (0.0, 0.0)
    hurst: float = 0.75
    t: float = 1.0
    n_paths: int = 10000
    n_steps: int = 64
    seed: int = 0
    sampler: str = "cholesky"
    w_refine: int = 4
    bandwidth: float | None = None
    n_boot: int = 200
    level: float = 0.95
    kde_order: int = 4
    grid_points: int = 41
    radius_factor: float = 2.0
    c2_min: float = 0.01
    c2_max: float = 10.0
    c2_count: int = 61
    batch: int = 20000
    out_dir: str | None = None
    format: str = "json"

    def validate(self) -> "ExperimentConfig":
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}")
        for name in ("n_paths", "n_steps", "w_refine", "n_boot", "grid_points", "c2_count", "batch"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.t <= 1.0:
            raise ConfigError("t must lie in (0, 1]")
        if self.sampler not in ("cholesky", "volterra"):
            raise ConfigError("sampler must be 'cholesky' or 'volterra'")
        if not 0 < self.c2_min < self.c2_max:
            raise ConfigError("need 0 < c2_min < c2_max")
        if self.format not in ("json", "csv"):
            raise ConfigError("format must be 'json' or 'csv'")
        return self

    def problem(self) -> SdeProblem:
        return SdeProblem(np.asarray(self.a, dtype=float), make_fields(self.fields, **self.field_params),
                          self.hurst, self.case)

    def digest(self) -> str:
        doc = asdict(self)
        doc.pop("out_dir")
        doc.pop("format")
        return hashlib.sha256(json.dumps(_jsonable(doc), sort_keys=True).encode()).hexdigest()[:16]

    def c2_grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.c2_min), np.log10(self.c2_max), self.c2_count)


class StageError(FbmLabError):
    pass


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FbmLabError as exc:
        raise StageError(f"{name}: {exc}") from exc


def _solve_batch(problem: SdeProblem, driver):
    if problem.mode == "additive-1d":
        f = problem.fields
        sigma = float(f.sigma(np.zeros(1))[0, 0])
        if f.drift is None:
            return problem.a[0] + sigma * driver.values[:, -1, 0:1]
        v0 = lambda z: f.v0(z[..., None])[..., 0]
        return solve_additive_ode(problem.a[0], v0, sigma, driver).values[:, -1]
    return solve_piecewise_linear(problem, driver).values[:, -1]


def simulate_terminal(problem: SdeProblem, t: float, n_paths: int, n_steps: int, stream: RandomStream,
                      sampler: str = "cholesky", w_refine: int = 4, batch: int = 20000) -> np.ndarray:
    """X_t for n_paths paths, generated in batches; the result does not depend on ``batch``."""
    grid = TimeGrid.uniform(n_steps, t)
    d = problem.fields.d
    table = KernelTable.build(problem.hurst, t) if sampler == "volterra" else None
    fine = TimeGrid.uniform(n_steps * w_refine, t) if table is not None else None
    out = []
    for start in range(0, n_paths, batch):
        count = min(batch, n_paths - start)
        if table is None:
            b = sample_fbm_cholesky(problem.hurst, grid, d, count, stream, start=start)
        else:
            w = sample_wiener(fine, d, count, stream, start=start)
            b = volterra_build(w, table, grid)
        out.append(_solve_batch(problem, b))
    return np.concatenate(out, axis=0)


def kde_axes(a, t: float, h: float, radius_factor: float, points: int) -> tuple:
    radius = radius_factor * t ** h
    return tuple(np.linspace(ai - radius, ai + radius, points) for ai in np.atleast_1d(a))


def run_experiment(config: ExperimentConfig) -> tuple[BoundReport, dict]:
    """Sample, solve, estimate the density of X_t and fit the Gaussian lower bound.

    One-dimensional cases also fit two-sided constants on an independent calibration
    batch and count their violations on the main batch. Artifacts are written to
    ``config.out_dir`` when it is set.
    """
    config.validate()
    started = time.perf_counter()
    problem = _stage("setup", config.problem)
    root = RandomStream(config.seed)
    xt = _stage("simulate", simulate_terminal, problem, config.t, config.n_paths, config.n_steps,
                root.child("main"), config.sampler, config.w_refine, config.batch)
    axes = kde_axes(problem.a, config.t, config.hurst, config.radius_factor, config.grid_points)
    kde = _stage("density", kde_estimate, xt, axes, config.bandwidth, config.n_boot, config.level,
                 config.seed, config.kde_order)
    report = _stage("verify", verify_gaussian_lower_bound, kde, problem.a, config.t, config.hurst,
                    config.c2_grid(), config.radius_factor, config.seed)
    report.metrics["sample_mean"] = xt.mean(axis=0).tolist()
    report.metrics["band_width_mean"] = float(np.mean(kde.upper - kde.lower))
    if kde.dim == 1:
        xc = _stage("calibrate", simulate_terminal, problem, config.t, config.n_paths, config.n_steps,
                    root.child("calibration"), config.sampler, config.w_refine, config.batch)
        kde_cal = _stage("calibrate", kde_estimate, xc, axes, config.bandwidth, config.n_boot,
                         config.level, config.seed + 1, config.kde_order)
        c1, c2 = fit_two_sided(kde_cal, problem.a[0], config.t, config.hurst, config.radius_factor)
        bad, total = check_two_sided(kde, problem.a[0], config.t, config.hurst, c1, c2, config.radius_factor)
        report.metrics["two_sided"] = {"C1": c1, "C2": c2, "violations": bad, "n_region": total}
    report.runtime = time.perf_counter() - started
    artifacts = {"kde": kde, "samples": xt, "config_hash": config.digest()}
    if config.out_dir:
        from .io import write_kde_csv, write_rows_csv
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(config.digest()))
        write_kde_csv(out / "density.csv", kde)
        write_rows_csv(out / "frontier.csv", ["c2", "c1"], report.frontier)
    return report, artifacts
