"""Inner products on step functions, increment Gram matrices and the box-constrained QP."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateGridError, DomainError, PreconditionError, RegimeError
from .fbm_core import check_hurst, cov_r
from .quadrature import graded_rule, legendre01
from .rng import RandomStream

MAX_ROUGH_CELLS = 2 ** 12


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant R^d valued function; ``values[j]`` holds on [b_j, b_{j+1})."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if b.ndim != 1 or b.size < 2 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise DomainError("breakpoints must increase from 0")
        if v.shape[0] != b.size - 1:
            raise DomainError("need one value per cell")
        if not np.all(np.isfinite(v)):
            raise DomainError("step function values must be finite")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def indicator(cls, t: float, coord: int = 0, dim: int = 1, scale: float = 1.0) -> "StepFunction":
        v = np.zeros((1, dim))
        v[0, coord] = scale
        return cls(np.array([0.0, t]), v)

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def on(self, times: np.ndarray) -> np.ndarray:
        """Values on the cells of a finer partition (zero beyond the horizon)."""
        times = np.asarray(times, dtype=float)
        left = times[:-1]
        idx = np.searchsorted(self.breakpoints, left, side="right") - 1
        out = np.zeros((left.size, self.dim))
        inside = left < self.horizon
        out[inside] = self.values[idx[inside]]
        return out

    def __add__(self, other: "StepFunction") -> "StepFunction":
        grid = merged_breakpoints(self, other)
        return StepFunction(grid, self.on(grid) + other.on(grid))

    def __mul__(self, c: float) -> "StepFunction":
        return StepFunction(self.breakpoints, c * self.values)

    __rmul__ = __mul__


def merged_breakpoints(*fns: StepFunction) -> np.ndarray:
    merged = np.unique(np.concatenate([f.breakpoints for f in fns]))
    return merged[np.concatenate([[True], np.diff(merged) > 1e-15])]


@dataclass(frozen=True)
class IncrementGram:
    times: np.ndarray
    matrix: np.ndarray

    @property
    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def _gram(times: np.ndarray, h: float) -> np.ndarray:
    r = cov_r(times[:, None], times[None, :], h)
    return r[1:, 1:] - r[1:, :-1] - r[:-1, 1:] + r[:-1, :-1]


def increment_gram(partition, h: float, validate: bool = True) -> IncrementGram:
    """Gram matrix E[dB_j dB_k] of one fBm coordinate over the cells of a partition."""
    h = check_hurst(h)
    times = np.asarray(getattr(partition, "times", partition), dtype=float)
    if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
        raise DomainError("partition must be strictly increasing")
    q = _gram(times, h)
    q = 0.5 * (q + q.T)
    if validate:
        try:
            np.linalg.cholesky(q)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGridError("increment Gram matrix is not positive definite") from exc
        # row sums equal R(t_j, tau) - R(t_{j-1}, tau) and R(., tau) is increasing
        if np.any(q.sum(axis=1) < -1e-12):
            raise DegenerateGridError("increment Gram matrix has a negative row sum")
    return IncrementGram(times, q)


def smooth_cell_matrix(times: np.ndarray, h: float) -> np.ndarray:
    """H(2H-1) times the double integral of |s-t|^(2H-2) over every pair of cells.

    Uses the antiderivative |x|^(2H) / (2H(2H-1)) of the singular weight.
    """
    times = np.asarray(times, dtype=float)
    a, b = times[:-1, None], times[1:, None]
    c, d = times[None, :-1], times[None, 1:]
    p = 2 * h
    return 0.5 * (np.abs(b - c) ** p - np.abs(a - c) ** p - np.abs(b - d) ** p + np.abs(a - d) ** p)


def inner_smooth(phi: StepFunction, psi: StepFunction, h: float) -> float:
    """Inner product for H > 1/2 from the |s - t|^(2H-2) representation."""
    h = check_hurst(h)
    if h <= 0.5:
        raise RegimeError("inner_smooth needs H > 1/2")
    grid = merged_breakpoints(phi, psi)
    m = smooth_cell_matrix(grid, h)
    return float(np.einsum("jd,jk,kd->", phi.on(grid), m, psi.on(grid)))


@dataclass(frozen=True)
class RefinedValue:
    value: float
    previous: float
    difference: float
    cells: int

    def __float__(self):
        return self.value


def _dyadic(times: np.ndarray) -> np.ndarray:
    mids = 0.5 * (times[1:] + times[:-1])
    out = np.empty(times.size + mids.size)
    out[0::2] = times
    out[1::2] = mids
    return out


def inner_rough(phi: StepFunction, psi: StepFunction, h: float, refinement: int | None = None,
                rtol: float = 1e-4) -> RefinedValue:
    """Inner product for H < 1/2 as a Riemann sum against the increment Gram matrix.

    Starts from the common breakpoints and refines dyadically until two successive
    values agree to ``rtol`` (or ``refinement`` levels, capped at 2^12 cells).
    """
    h = check_hurst(h)
    if h >= 0.5:
        raise RegimeError("inner_rough needs H < 1/2")
    times = merged_breakpoints(phi, psi)

    def value(ts):
        q = _gram(ts, h)
        return float(np.einsum("jd,jk,kd->", phi.on(ts), q, psi.on(ts)))

    prev = value(times)
    levels = 0
    while True:
        finer = _dyadic(times)
        if finer.size - 1 > MAX_ROUGH_CELLS:
            warnings.warn("inner_rough reached the cell cap before converging", RuntimeWarning)
            return RefinedValue(prev, prev, float("nan"), times.size - 1)
        cur = value(finer)
        levels += 1
        diff = abs(cur - prev)
        done = diff <= rtol * max(abs(cur), 1e-300)
        if refinement is not None and levels >= refinement or refinement is None and done:
            if not done:
                warnings.warn("successive refinements differ above tolerance", RuntimeWarning)
            return RefinedValue(cur, prev, diff, finer.size - 1)
        times, prev = finer, cur


def inner_matrix(times: np.ndarray, h: float) -> np.ndarray:
    """Matrix Q with <phi, psi> = phi^T Q psi for step functions on ``times`` (one coordinate)."""
    h = check_hurst(h)
    times = np.asarray(times, dtype=float)
    if h > 0.5:
        return smooth_cell_matrix(times, h)
    return _gram(times, h)


def _check_qp(q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise PreconditionError("Q must be square")
    if not np.allclose(q, q.T, atol=1e-12, rtol=0):
        raise PreconditionError("Q must be symmetric")
    try:
        np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("Q must be positive definite") from exc
    if np.any(q.sum(axis=1) < -tol):
        raise PreconditionError("Q has a negative row sum")
    return q


def qp_box_inf(q, a: float, b: float) -> float:
    """Closed-form corner value a * b * sum(Q) of x^T Q y over x >= b, y >= a."""
    if a <= 0 or b <= 0:
        raise PreconditionError("box bounds must be positive")
    q = _check_qp(q)
    return float(a * b * q.sum())


@dataclass(frozen=True)
class QpSearchConfig:
    starts: int = 32
    span: float = 100.0
    max_iter: int = 500
    tol: float = 1e-12
    seed: int = 0


def _projected_descent(q, x, y, lo_x, hi_x, lo_y, hi_y, cfg: QpSearchConfig):
    f = x @ q @ y
    step = 1.0
    for _ in range(cfg.max_iter):
        gx, gy = q @ y, q @ x
        while True:
            nx = np.clip(x - step * gx, lo_x, hi_x)
            ny = np.clip(y - step * gy, lo_y, hi_y)
            nf = nx @ q @ ny
            moved = (nx - x) @ gx + (ny - y) @ gy
            if nf <= f + 1e-4 * moved or step < 1e-14:
                break
            step *= 0.5
        if f - nf <= cfg.tol * max(1.0, abs(f)):
            x, y, f = nx, ny, min(f, nf)
            break
        x, y, f = nx, ny, nf
        step *= 2.0
    return f


def qp_box_search(q, a: float, b: float, config: QpSearchConfig | None = None) -> float:
    """Multi-start projected gradient search for min x^T Q y with x >= b, y >= a.

    The feasible set is unbounded, so the search runs on the box
    [b, span * b]^n x [a, span * a]^n. A value far below the corner value signals
    that the infimum over the unbounded set is not attained at the corner.
    """
    cfg = config or QpSearchConfig()
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    lo_x, hi_x = np.full(n, b), np.full(n, b * cfg.span)
    lo_y, hi_y = np.full(n, a), np.full(n, a * cfg.span)
    stream = RandomStream(cfg.seed).child("qp-starts")
    best = float(lo_x @ q @ lo_y)
    for k in range(cfg.starts):
        if k == 0:
            x0, y0 = lo_x.copy(), lo_y.copy()
        else:
            u = stream.generator(k).random(2 * n)
            x0 = lo_x + u[:n] * (hi_x - lo_x)
            y0 = lo_y + u[n:] * (hi_y - lo_y)
        best = min(best, _projected_descent(q, x0, y0, lo_x, hi_x, lo_y, hi_y, cfg))
    return float(best)


@dataclass(frozen=True)
class HolderBoundInputs:
    a: float
    b: float
    gamma: float
    t: float

    def validate(self, h: float):
        if self.a < 0 or self.b < 0:
            raise DomainError("a and b must be nonnegative")
        if not 0.5 - h < self.gamma < 0.5:
            raise DomainError("gamma must lie in (1/2 - H, 1/2)")
        if not 0.0 < self.t <= 1.0:
            raise DomainError("t must lie in (0, 1]")


@dataclass(frozen=True)
class HnormBound:
    integral: float
    bound: float
    constant: float

    @property
    def holds(self) -> bool:
        return self.integral <= self.bound * (1 + 1e-9)


def _frac_weight_integral(times: np.ndarray, values: np.ndarray, h: float, order: int = 12) -> float:
    """Integral over [0, t] of s^(1-2H) |D_{t-}^{1/2-H} g_s|^2 with g_u = u^(H-1/2) f_u.

    With beta = 1/2 - H and psi_v = (s / v)^beta the integrand is (A_s + B_s)^2, where
    A_s = f_s (t - s)^(-beta) and
    B_s = f_s int_s^t (1 - psi_v)(v - s)^(-1-beta) dv + int_s^t psi_v (f_s - f_v)(v - s)^(-1-beta) dv.
    ``f`` is taken piecewise linear through (times, values).
    """
    beta = 0.5 - h
    t = float(times[-1])
    n = times.size - 1
    xs, ws = legendre01(order)
    slopes = np.diff(values) / np.diff(times)

    if n == 1:
        s_nodes, s_w = graded_rule(0.0, t, (-2 * beta, 0.0), (-2 * beta, 0.0), order=order)
    else:
        first = graded_rule(0.0, times[1], (-2 * beta, 0.0), (None, times[1]), order=order)
        last = graded_rule(times[-2], t, (None, t - times[-2]), (-2 * beta, 0.0), order=order)
        mids_a, mids_b = times[1:-2], times[2:-1]
        mid_nodes = (mids_a[:, None] + (mids_b - mids_a)[:, None] * xs).ravel()
        mid_w = ((mids_b - mids_a)[:, None] * ws).ravel()
        s_nodes = np.concatenate([first[0], mid_nodes, last[0]])
        s_w = np.concatenate([first[1], mid_w, last[1]])

    total = 0.0
    for s, weight in zip(s_nodes, s_w):
        k = min(int(np.searchsorted(times, s, side="right")) - 1, n - 1)
        fs = values[k] + slopes[k] * (s - times[k])
        # smooth part, independent of the grid
        x, w = graded_rule(s, t, (-beta, 0.0), order=order)
        smooth = np.dot(w, (1 - (s / x) ** beta) * (x - s) ** (-1 - beta))
        # rough part: exact linear difference on the cell holding s
        x, w = graded_rule(s, times[k + 1], (-beta, 0.0), order=order)
        rough = -slopes[k] * np.dot(w, (s / x) ** beta * (x - s) ** (-beta))
        if k + 1 < n:
            x, w = graded_rule(times[k + 1], times[k + 2], (None, times[k + 1] - s), order=order)
            fv = values[k + 1] + slopes[k + 1] * (x - times[k + 1])
            rough += np.dot(w, (s / x) ** beta * (fs - fv) * (x - s) ** (-1 - beta))
        if k + 2 < n:
            a_, b_ = times[k + 2:-1], times[k + 3:]
            v = a_[:, None] + (b_ - a_)[:, None] * xs
            fv = values[k + 2:-1, None] + slopes[k + 2:, None] * (v - a_[:, None])
            rough += np.sum((b_ - a_)[:, None] * ws * (s / v) ** beta * (fs - fv) * (v - s) ** (-1 - beta))
        total += weight * (fs * (t - s) ** (-beta) + fs * smooth + rough) ** 2
    return float(total)


@lru_cache(maxsize=None)
def _constant_calibration(h: float) -> float:
    grid = np.linspace(0.0, 1.0, 65)
    j1 = _frac_weight_integral(grid, np.ones_like(grid), h)
    # the bound must dominate both the derivative integral and the norm itself (= 1 here)
    return max(j1, 1.0)


def hnorm_upper_rough(inputs: HolderBoundInputs, times, values, h: float) -> HnormBound:
    """Fractional-derivative integral of a sampled function and its Hoelder-type bound."""
    h = check_hurst(h)
    if h >= 0.5:
        raise RegimeError("hnorm_upper_rough needs H < 1/2")
    inputs.validate(h)
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if not np.isclose(times[-1], inputs.t):
        raise DomainError("sample grid must end at t")
    integral = _frac_weight_integral(times, values, h)
    c = _constant_calibration(h)
    bound = c * (inputs.a * inputs.t ** h + inputs.b * inputs.t ** (inputs.gamma + h)) ** 2
    return HnormBound(integral, bound, c)
