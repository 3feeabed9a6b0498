"""Pathwise solvers for fBm-driven equations and the additive-case Malliavin derivative."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from .errors import DivergenceError, DomainError, EllipticityError, GridMismatchError, RegimeError
from .fbm_core import SamplePath, TimeGrid, check_hurst

DIVERGENCE_CAP = 1e6
FLOW_STEP = 1e-3

Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class VectorFieldSet:
    """Drift V_0 and diffusion columns V_1..V_d, vectorized over leading axes.

    ``drift(x)`` maps (..., m) to (..., m); ``diffusion(x)`` maps (..., m) to
    (..., m, d). Jacobians follow the same convention with a trailing m axis.
    """

    m: int
    d: int
    drift: Field | None
    diffusion: Field
    drift_jacobian: Field | None = None
    diffusion_jacobian: Field | None = None
    lam: float = 1.0
    Lam: float = 1.0
    v0_deriv_bound: float = 0.0
    additive: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not 0 < self.lam <= self.Lam:
            raise DomainError("need 0 < lambda <= Lambda")

    def v0(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x) if self.drift is None else self.drift(x)

    def sigma(self, x: np.ndarray) -> np.ndarray:
        return self.diffusion(np.asarray(x, dtype=float))

    def check_ellipticity(self, states: np.ndarray, tol: float = 1e-9) -> tuple[float, float]:
        """Extreme eigenvalues of V V^T over the given states; raises outside [lambda, Lambda]."""
        v = self.sigma(np.asarray(states, dtype=float).reshape(-1, self.m))
        eig = np.linalg.eigvalsh(v @ np.swapaxes(v, -1, -2))
        lo, hi = float(eig.min()), float(eig.max())
        if lo < self.lam - tol or hi > self.Lam + tol:
            raise EllipticityError(f"eigenvalues [{lo}, {hi}] leave [{self.lam}, {self.Lam}]")
        return lo, hi


def const_fields(drift=0.0, sigma=1.0, m: int = 1, d: int | None = None) -> VectorFieldSet:
    """Constant drift vector and constant diffusion matrix."""
    b = np.broadcast_to(np.asarray(drift, dtype=float), (m,)).copy()
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        d = d or m
        s = s * np.eye(m, d)
    d = s.shape[1]
    sv = np.linalg.svd(s, compute_uv=False)
    lam = float(sv.min() ** 2) if m <= d else 0.0

    def drift_fn(x):
        return np.broadcast_to(b, x.shape).copy()

    def diff_fn(x):
        return np.broadcast_to(s, x.shape[:-1] + s.shape).copy()

    return VectorFieldSet(m, d, None if not np.any(b) else drift_fn, diff_fn,
                          lambda x: np.zeros(x.shape + (m,)),
                          lambda x: np.zeros(x.shape[:-1] + (m, d, m)),
                          lam=max(lam, 1e-300), Lam=float(sv.max() ** 2), v0_deriv_bound=0.0,
                          additive=True, name="const")


def arctan_fields(sigma: float = 1.0, scale: float = 1.0) -> VectorFieldSet:
    """1D additive noise with drift scale * arctan(x); the drift derivative is bounded by scale."""
    s = float(sigma)
    return VectorFieldSet(
        1, 1,
        lambda x: scale * np.arctan(x),
        lambda x: np.full(x.shape[:-1] + (1, 1), s),
        lambda x: (scale / (1 + x ** 2))[..., None],
        lambda x: np.zeros(x.shape[:-1] + (1, 1, 1)),
        lam=s * s, Lam=s * s, v0_deriv_bound=abs(scale), additive=True, name="arctan")


def sin_shift_fields(level: float = 2.0, amp: float = 1.0, drift: float = 1.0,
                     phase: float = np.pi / 2) -> VectorFieldSet:
    """1D fields V_0 = drift sin(x + phase), V_1 = level + amp sin(x)."""
    if level <= abs(amp):
        raise EllipticityError("level must exceed |amp| so that V_1 stays away from 0")

    def v0(x):
        return drift * np.sin(x + phase)

    def v1(x):
        return (level + amp * np.sin(x))[..., None]

    return VectorFieldSet(
        1, 1, v0 if drift else None, v1,
        lambda x: (drift * np.cos(x + phase))[..., None],
        lambda x: (amp * np.cos(x))[..., None, None],
        lam=(level - abs(amp)) ** 2, Lam=(level + abs(amp)) ** 2, v0_deriv_bound=abs(drift),
        name="sin_shift")


def tanh_net_fields(m: int = 2, scale: float = 1.0, amp: float = 0.2, drift: float = 0.0,
                    seed: int = 7) -> VectorFieldSet:
    """Elliptic field set V(x) = scale (I + amp T(x)) with T_ij(x) = tanh(w_ij . x + c_ij).

    With amp * m < 1 the singular values of V stay in scale * [1 - amp m, 1 + amp m].
    """
    if amp * m >= 1:
        raise EllipticityError("need amp * m < 1 for ellipticity")
    gen = np.random.Generator(np.random.Philox(key=[seed, 0]))
    w = gen.normal(size=(m, m, m))
    c = gen.normal(size=(m, m))
    eye = np.eye(m)

    def diff_fn(x):
        z = np.einsum("ijk,...k->...ij", w, x) + c
        return scale * (eye + amp * np.tanh(z))

    def diff_jac(x):
        z = np.einsum("ijk,...k->...ij", w, x) + c
        return scale * amp * (1 - np.tanh(z) ** 2)[..., None] * w

    def drift_fn(x):
        return drift * np.tanh(x)

    def drift_jac(x):
        return drift * (1 - np.tanh(x) ** 2)[..., None] * eye

    lo, hi = scale * (1 - amp * m), scale * (1 + amp * m)
    return VectorFieldSet(m, m, drift_fn if drift else None, diff_fn, drift_jac, diff_jac,
                          lam=lo * lo, Lam=hi * hi, v0_deriv_bound=abs(drift), name="tanh_net")


FIELD_REGISTRY: dict[str, Callable[..., VectorFieldSet]] = {
    "const": const_fields,
    "arctan": arctan_fields,
    "sin_shift": sin_shift_fields,
    "tanh_net": tanh_net_fields,
}


def make_fields(name: str, **params) -> VectorFieldSet:
    try:
        factory = FIELD_REGISTRY[name]
    except KeyError as exc:
        raise DomainError(f"unknown field set {name!r}; known: {sorted(FIELD_REGISTRY)}") from exc
    return factory(**params)


MODES = ("additive-1d", "multiplicative-1d", "young-multid")


@dataclass
class SdeProblem:
    a: np.ndarray
    fields: VectorFieldSet
    hurst: float
    mode: str

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.hurst = check_hurst(self.hurst)
        f = self.fields
        if self.a.shape != (f.m,):
            raise DomainError("initial state has the wrong dimension")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if self.mode in ("additive-1d", "multiplicative-1d") and (f.m, f.d) != (1, 1):
            raise DomainError(f"{self.mode} needs m = d = 1")
        if self.mode == "additive-1d" and not f.additive:
            raise DomainError("additive-1d needs a constant diffusion coefficient")
        if self.mode != "additive-1d" and self.hurst <= 0.5:
            raise RegimeError(f"{self.mode} needs H > 1/2")


def solve_young_euler(problem: SdeProblem, driver: SamplePath, out_grid: TimeGrid | None = None,
                      cap: float = DIVERGENCE_CAP) -> SamplePath:
    """First-order scheme X_{k+1} = X_k + V_0(X_k) dt + sum_i V_i(X_k) dB^i_k."""
    if problem.hurst <= 0.5:
        raise RegimeError("the Young scheme needs H > 1/2")
    f = problem.fields
    if driver.dim != f.d:
        raise GridMismatchError("driver dimension differs from the number of noise fields")
    out_grid = out_grid or driver.grid
    idx = driver.grid.indices_of(out_grid)
    dt = np.diff(driver.times)
    db = driver.increments()
    x = np.broadcast_to(problem.a, (driver.n_paths, f.m)).copy()
    out = np.empty((driver.n_paths, len(out_grid), f.m))
    pos = {int(k): j for j, k in enumerate(idx)}
    if 0 in pos:
        out[:, pos[0]] = x
    for k in range(dt.size):
        step = np.einsum("pmd,pd->pm", f.sigma(x), db[:, k])
        if f.drift is not None:
            step += f.v0(x) * dt[k]
        x = x + step
        if not np.all(np.abs(x) <= cap):
            raise DivergenceError(f"state exceeded {cap} at t = {driver.times[k + 1]}")
        if k + 1 in pos:
            out[:, pos[k + 1]] = x
    return SamplePath(out_grid, out, "X")


def solve_piecewise_linear(problem: SdeProblem, driver: SamplePath, out_grid: TimeGrid | None = None,
                           cap: float = DIVERGENCE_CAP) -> SamplePath:
    """RK4 on X' = V_0(X) + V(X) dB/dt with B linear inside each driver cell.

    For H > 1/2 this converges to the pathwise solution as the driver grid is refined;
    in one dimension it is exact up to RK4 error at the driver nodes.
    """
    if problem.hurst <= 0.5 and problem.mode != "additive-1d":
        raise RegimeError("pathwise solution needs H > 1/2")
    f = problem.fields
    if driver.dim != f.d:
        raise GridMismatchError("driver dimension differs from the number of noise fields")
    out_grid = out_grid or driver.grid
    idx = driver.grid.indices_of(out_grid)
    dt = np.diff(driver.times)
    db = driver.increments()
    x = np.broadcast_to(problem.a, (driver.n_paths, f.m)).copy()
    out = np.empty((driver.n_paths, len(out_grid), f.m))
    pos = {int(k): j for j, k in enumerate(idx)}
    if 0 in pos:
        out[:, pos[0]] = x

    def rhs(state, slope, step):
        v = np.einsum("pmd,pd->pm", f.sigma(state), slope)
        if f.drift is not None:
            v = v + f.v0(state) * step
        return v

    for k in range(dt.size):
        slope = db[:, k]
        k1 = rhs(x, slope, dt[k])
        k2 = rhs(x + 0.5 * k1, slope, dt[k])
        k3 = rhs(x + 0.5 * k2, slope, dt[k])
        k4 = rhs(x + k3, slope, dt[k])
        x = x + (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not np.all(np.abs(x) <= cap):
            raise DivergenceError(f"state exceeded {cap} at t = {driver.times[k + 1]}")
        if k + 1 in pos:
            out[:, pos[k + 1]] = x
    return SamplePath(out_grid, out, "X")


def solve_additive_ode(a: float, v0: Field, sigma: float, b: SamplePath) -> SamplePath:
    """X = Z + sigma B where Z' = V_0(Z + sigma B), Z_0 = a, by classic RK4 on the B grid.

    B is interpolated linearly inside each step.
    """
    times = b.times
    bv = b.values[..., 0]
    z = np.full(b.n_paths, float(a))
    out = np.empty_like(bv)
    out[:, 0] = z + sigma * bv[:, 0]
    for k in range(times.size - 1):
        hk = times[k + 1] - times[k]
        b0, b1 = sigma * bv[:, k], sigma * bv[:, k + 1]
        bm = 0.5 * (b0 + b1)
        k1 = v0(z + b0)
        k2 = v0(z + 0.5 * hk * k1 + bm)
        k3 = v0(z + 0.5 * hk * k2 + bm)
        k4 = v0(z + hk * k3 + b1)
        z = z + hk / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise DivergenceError("drift produced non-finite values")
        out[:, k + 1] = z + b1
    return SamplePath(b.grid, out[..., None], "X")


def flow_inverse(v1: Field, x: float, a: float) -> float:
    """Flow time from a to x: the integral of 1 / V_1 over [a, x]."""
    if x == a:
        return 0.0
    lo, hi = min(a, x), max(a, x)
    probe = np.asarray(v1(np.linspace(lo, hi, 257)), dtype=float).ravel()
    if np.any(probe == 0) or np.any(np.sign(probe) != np.sign(probe[0])):
        raise EllipticityError("V_1 changes sign between a and x")
    val, _ = quad(lambda z: 1.0 / float(np.ravel(v1(np.array([z])))[0]), a, x,
                  epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(val)


class FlowMap:
    """Tabulated flow F(x, y) of dF/dx = V_1(F), F(0, y) = y.

    G(x) = F(x, y0) is integrated by RK4 with a fixed step and interpolated with
    cubic Hermite pieces whose slopes are V_1(G). A general starting point uses
    F(x, y) = G(x + tau(y)) with tau(y) the flow time from y0 to y.
    """

    def __init__(self, v1: Field, y0: float = 0.0, x_max: float = 8.0, step: float = FLOW_STEP):
        self.v1 = v1
        self.y0 = float(y0)
        self.step = step
        self._build(x_max)

    def _scalar_v1(self, z):
        return np.asarray(self.v1(np.asarray(z, dtype=float)), dtype=float).reshape(np.shape(z))

    def _integrate(self, n: int, h: float) -> np.ndarray:
        g = np.empty(n + 1)
        g[0] = self.y0
        f = self._scalar_v1
        for k in range(n):
            y = g[k]
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            g[k + 1] = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.isfinite(g[k + 1]):
                raise EllipticityError("flow ODE produced non-finite values")
        return g

    def _build(self, x_max: float):
        n = int(np.ceil(x_max / self.step))
        up = self._integrate(n, self.step)
        down = self._integrate(n, -self.step)
        xs = np.arange(-n, n + 1) * self.step
        gs = np.concatenate([down[::-1], up[1:]])
        self.x_max = n * self.step
        self._spline = CubicHermiteSpline(xs, gs, self._scalar_v1(gs))

    def __call__(self, x, y: float | None = None):
        x = np.asarray(x, dtype=float)
        shift = 0.0 if y is None or y == self.y0 else flow_inverse(self.v1, y, self.y0)
        arg = x + shift
        need = float(np.max(np.abs(arg))) if arg.size else 0.0
        if need > self.x_max:
            self._build(1.5 * need)
        out = self._spline(arg)
        return out if out.ndim else float(out)

    def derivative(self, x, y: float | None = None):
        shift = 0.0 if y is None or y == self.y0 else flow_inverse(self.v1, y, self.y0)
        return self._spline(np.asarray(x, dtype=float) + shift, 1)

    def inverse(self, x: float, a: float | None = None) -> float:
        return flow_inverse(self.v1, x, self.y0 if a is None else a)


def doss_sussmann_flow(v1: Field, x, y: float):
    """F(x, y) for the flow of V_1 started at y."""
    return FlowMap(v1, y0=y, x_max=max(1.0, float(np.max(np.abs(x))) * 1.1))(x)


def _as_arrays(x_path):
    if isinstance(x_path, SamplePath):
        return x_path.times, x_path.values[0, :, 0]
    times, values = x_path
    return np.asarray(times, dtype=float), np.asarray(values, dtype=float)


def malliavin_deriv_additive(r: float, t: float, x_path, v0_deriv: Field, sigma: float,
                             tol: float = 1e-12) -> float:
    """sigma * exp(int_r^t V_0'(X_s) ds), integrating V_0'(X) linearly interpolated on the path grid.

    Whole cells reduce to the trapezoid rule; partial cells at off-grid r or t are integrated exactly.
    """
    if r > t:
        raise DomainError("need r <= t")
    times, values = _as_arrays(x_path)
    if r < times[0] - tol or t > times[-1] + tol:
        raise GridMismatchError("r or t outside the path grid")
    f = np.asarray(v0_deriv(values), dtype=float).reshape(values.shape)
    c = cumulative_trapezoid(times, f)
    return float(sigma * np.exp(_running_integral(times, f, c, t) - _running_integral(times, f, c, r)))


def _running_integral(times: np.ndarray, f: np.ndarray, c: np.ndarray, u: float) -> float:
    k = int(np.clip(np.searchsorted(times, u, side="right") - 1, 0, times.size - 2))
    width = times[k + 1] - times[k]
    theta = min(max((u - times[k]) / width, 0.0), 1.0)
    return c[k] + width * theta * (f[k] + 0.5 * theta * (f[k + 1] - f[k]))


def cumulative_trapezoid(times: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Running trapezoidal integral along the last axis, starting at 0."""
    steps = 0.5 * (f[..., 1:] + f[..., :-1]) * np.diff(times)
    out = np.zeros(f.shape)
    out[..., 1:] = np.cumsum(steps, axis=-1)
    return out


def malliavin_profile_additive(times: np.ndarray, x_values: np.ndarray, v0_deriv: Field,
                               sigma: float) -> np.ndarray:
    """D_r X_t at the cell midpoints r of the grid, for every path (rows of x_values)."""
    f = v0_deriv(x_values)
    c = cumulative_trapezoid(times, f)
    mids = c[..., :-1] + np.diff(times) * (3 * f[..., :-1] + f[..., 1:]) / 8
    return sigma * np.exp(c[..., -1:] - mids)
