"""Riemann-Liouville operators, the inverse kernel operator and the Girsanov density."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.special import gamma as gamma_fn, roots_jacobi

from .errors import DomainError, GridMismatchError, RegimeError
from .fbm_core import KernelTable, SamplePath, TimeGrid, check_hurst, sample_wiener, volterra_build
from .quadrature import jacobi01, legendre01
from .sde import FlowMap

EXPONENT_CAP = 700.0


def check_order(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError("fractional order must lie in (0, 1)")
    return alpha


def _quad(func, a, b, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            return quad(func, a, b, limit=400, epsabs=0.0, epsrel=1e-11, **kw)[0]
        except IntegrationWarning as exc:
            warnings.warn(f"singular integral may not have converged: {exc}", RuntimeWarning)
            return quad(func, a, b, limit=400, epsabs=0.0, epsrel=1e-11, **kw)[0]


def frac_integral(alpha: float, f, x: float) -> float:
    """Left Riemann-Liouville integral of order alpha at x.

    ``f`` is a callable or a pair (times, values) read as a piecewise linear function.
    """
    alpha = check_order(alpha)
    if x <= 0:
        raise DomainError("x must be positive")
    if callable(f):
        val = _quad(f, 0.0, x, weight="alg", wvar=(0.0, alpha - 1.0))
        return float(val / gamma_fn(alpha))
    times, values = _sampled(f, x)
    return float(frac_integral_matrix(alpha, times)[-1] @ values)


def _sampled(f, x):
    times, values = (np.asarray(v, dtype=float) for v in f)
    keep = times <= x + 1e-14
    times, values = times[keep], values[keep]
    if abs(times[-1] - x) > 1e-12:
        raise GridMismatchError("x must be a node of the sampled function")
    return times, values


def frac_integral_matrix(alpha: float, times: np.ndarray) -> np.ndarray:
    """Matrix M with (I^alpha f)(t_i) = sum_j M_ij f(t_j) for piecewise linear f.

    Exact product integration of (x - y)^(alpha - 1) against the hat functions.
    """
    alpha = check_order(alpha)
    times = np.asarray(times, dtype=float)
    n = times.size
    out = np.zeros((n, n))
    for i in range(1, n):
        x = times[i]
        a, b = times[:i], times[1:i + 1]
        # moments of (x - y)^(alpha - 1) over each cell: m0 = int w, m1 = int w (y - a)
        ua, ub = x - a, x - b
        m0 = (ua ** alpha - ub ** alpha) / alpha
        m1 = ua * m0 - (ua ** (alpha + 1) - ub ** (alpha + 1)) / (alpha + 1)
        h = b - a
        out[i, :i] += m0 - m1 / h
        out[i, 1:i + 1] += m1 / h
    return out / gamma_fn(alpha)


def frac_derivative(alpha: float, f, x: float) -> float:
    """Marchaud form (1/Gamma(1-a)) [f(x)/x^a + a int_0^x (f(x)-f(y))/(x-y)^(a+1) dy]."""
    alpha = check_order(alpha)
    if x <= 0:
        raise DomainError("x must be positive")
    if callable(f):
        fx = float(f(x))
        eps = 1e-7 * x

        def ratio(y):
            if x - y < 1e-13 * x:
                return (f(x) - f(x - eps)) / eps
            return (fx - f(y)) / (x - y)

        val = _quad(ratio, 0.0, x, weight="alg", wvar=(0.0, -alpha))
        return float((fx / x ** alpha + alpha * val) / gamma_fn(1 - alpha))
    times, values = _sampled(f, x)
    return float(frac_derivative_matrix(alpha, times)[-1] @ values)


def frac_derivative_matrix(alpha: float, times: np.ndarray) -> np.ndarray:
    """Matrix M with (D^alpha f)(t_i) = sum_j M_ij f(t_j) for piecewise linear f, i >= 1.

    On each cell f(x) - f(y) = A + slope (x - y) with A constant, so the singular
    weight (x - y)^(-alpha-1) integrates in closed form; on the last cell A = 0.
    """
    alpha = check_order(alpha)
    times = np.asarray(times, dtype=float)
    n = times.size
    out = np.zeros((n, n))
    for i in range(1, n):
        x = times[i]
        a, b = times[:i], times[1:i + 1]
        h = b - a
        ua, ub = x - a, x - b
        # int (x-y)^(-alpha) dy over each cell
        p0 = (ua ** (1 - alpha) - ub ** (1 - alpha)) / (1 - alpha)
        # int (x-y)^(-alpha-1) dy, finite except on the last cell where its factor vanishes
        with np.errstate(divide="ignore"):
            p1 = np.where(ub > 0, (np.where(ub > 0, ub, 1.0) ** -alpha - ua ** -alpha) / alpha, 0.0)
        # f(x) - f(y) = [f(x) - f_b] + slope (b - y) and b - y = (x - y) - ub
        # -> contributions: (f(x) - f_b - slope ub) p1 + slope p0
        slope_coef = p0 - ub * p1
        row = np.zeros(n)
        row[i] += p1.sum()
        np.add.at(row, np.arange(1, i + 1), -p1)
        np.add.at(row, np.arange(1, i + 1), slope_coef / h)
        np.add.at(row, np.arange(0, i), -slope_coef / h)
        row *= alpha
        row[i] += x ** -alpha
        out[i] = row
    return out / gamma_fn(1 - alpha)


@dataclass
class GirsanovIntegrand:
    """Values of the inverse-kernel image on a grid; column 0 (s = 0) is infinite in general."""

    times: np.ndarray
    values: np.ndarray
    first_cell_rms: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]


def k_inv_matrix(times: np.ndarray, hurst: float, order: int = 16) -> tuple[np.ndarray, float]:
    """Operator A and coefficient c with M(s_i) = c s_i^(1/2-H) h'(s_i) + sum_j A_ij h'(s_j).

    Here M = s^(H-1/2) D^(H-1/2)(u^(1/2-H) h'). Writing h'(u) = h'(s) + (h'(u) - h'(s))
    splits off the power law D^a u^b = Gamma(b+1)/Gamma(b-a+1) s^(b-a); the remainder
    vanishes at u = s and enters only through the Marchaud integral, evaluated
    cellwise with h' linear between nodes.
    """
    h = check_hurst(hurst)
    if h <= 0.5:
        raise RegimeError("the inverse kernel operator here needs H > 1/2")
    alpha, beta = h - 0.5, 0.5 - h
    times = np.asarray(times, dtype=float)
    n = times.size
    coef = gamma_fn(beta + 1) / gamma_fn(beta - alpha + 1)
    pre = -alpha / gamma_fn(1 - alpha)
    xs, ws = legendre01(order)
    xa, wa = jacobi01(order, beta)      # weight u^beta on the first cell
    xb, wb = jacobi01(order, -alpha)    # weight (s - u)^(-alpha) on the last cell
    xr, wr = roots_jacobi(order, -alpha, beta)
    both_ends = (0.5 * (xr + 1), wr * 0.5 ** (1 - alpha + beta))
    out = np.zeros((n, n))
    for i in range(1, n):
        s = times[i]
        row = np.zeros(n)
        for j in range(i):
            a, b = times[j], times[j + 1]
            w = b - a
            if j == i - 1:
                # h'(u) - h'(s) = slope (u - s): integrand -slope u^beta (s - u)^(-alpha)
                if j == 0:
                    u, q = both_ends
                    u, q = s * u, s ** (1 - alpha + beta) * q
                else:
                    u = s - w * xb
                    q = w ** (1 - alpha) * wb * u ** beta
                val = -np.sum(q) / w  # times (h'_b - h'_a)
                row[j + 1] += val
                row[j] -= val
                continue
            if j == 0:
                u = w * xa
                q = w ** (1 + beta) * wa * (s - u) ** (-alpha - 1)
            else:
                u = a + w * xs
                q = w * ws * u ** beta * (s - u) ** (-alpha - 1)
            lam = (u - a) / w
            # h'(u) - h'(s) = (1 - lam) h'_a + lam h'_b - h'(s)
            row[j] += np.sum(q * (1 - lam))
            row[j + 1] += np.sum(q * lam)
            row[i] -= np.sum(q)
        out[i] = pre * s ** (h - 0.5) * row
    return out, coef


def k_inv_apply(times: np.ndarray, h_values: np.ndarray | None, hurst: float,
                h_deriv: np.ndarray | None = None) -> GirsanovIntegrand:
    """Inverse kernel operator applied to h with h(0) = 0, for each row of a batch.

    ``h_deriv`` (values of h' at the nodes) is used when given; otherwise h' comes from
    central differences of ``h_values``.
    """
    times = np.asarray(times, dtype=float)
    if h_deriv is None:
        hv = np.atleast_2d(np.asarray(h_values, dtype=float))
        if np.any(np.abs(hv[:, 0]) > 1e-12):
            raise DomainError("h must vanish at 0")
        h_deriv = np.gradient(hv, times, axis=1, edge_order=2)
    hd = np.atleast_2d(np.asarray(h_deriv, dtype=float))
    a_mat, coef = k_inv_matrix(times, hurst)
    h = hurst
    s = times[1:]
    values = np.empty_like(hd)
    values[:, 0] = np.where(hd[:, 0] == 0, 0.0, np.copysign(np.inf, hd[:, 0]))
    values[:, 1:] = coef * s ** (0.5 - h) * hd[:, 1:] + hd @ a_mat[1:].T
    # root-mean-square of the leading power law over the first cell
    w0 = times[1]
    rms = coef * np.abs(hd[:, 0]) * w0 ** (0.5 - h) / np.sqrt(2 - 2 * h)
    return GirsanovIntegrand(times, values, np.sign(hd[:, 0]) * rms)


@dataclass
class GirsanovDensity:
    xi: np.ndarray
    stochastic: np.ndarray
    energy: np.ndarray
    capped: np.ndarray

    def rows(self):
        return zip(range(self.xi.size), self.stochastic, self.energy, self.xi)


def xi_compute(m: GirsanovIntegrand, w: SamplePath, t: float | None = None,
               rule: str = "left") -> GirsanovDensity:
    """xi = exp(S - D/2) with S = sum M dW at left points and D = int M^2.

    The first cell uses the root-mean-square of M over that cell, since M blows up at
    s = 0. With ``rule='left'`` D is the matching left-point sum, which makes xi an
    exact discrete martingale; ``rule='trapezoid'`` uses the trapezoid rule on later cells.
    """
    times = m.times
    if w.grid.times.size != times.size or np.max(np.abs(w.times - times)) > 1e-14:
        raise GridMismatchError("integrand and Wiener path need a common grid")
    if t is not None:
        if abs(t - times[-1]) > 1e-12:
            raise GridMismatchError("grid must end at t")
    dw = w.increments()[..., 0]
    dt = np.diff(times)
    left = m.values[:, :-1].copy()
    left[:, 0] = m.first_cell_rms
    s = np.sum(left * dw, axis=1)
    if rule == "left":
        d = np.sum(left ** 2 * dt, axis=1)
    elif rule == "trapezoid":
        sq = m.values ** 2
        d = m.first_cell_rms ** 2 * dt[0] + np.sum(0.5 * (sq[:, 1:-1] + sq[:, 2:]) * dt[1:], axis=1)
    else:
        raise DomainError("rule must be 'left' or 'trapezoid'")
    expo = s - 0.5 * d
    capped = expo > EXPONENT_CAP
    xi = np.exp(np.minimum(expo, EXPONENT_CAP))
    return GirsanovDensity(xi, s, d, capped)


def holder_seminorm(path: SamplePath | tuple, exponent: float, chunk: int = 64) -> np.ndarray:
    """Discrete Hoelder seminorm max |g_v - g_u| / |v - u|^gamma over grid pairs, per path."""
    if not 0.0 < exponent < 1.0:
        raise DomainError("exponent must lie in (0, 1)")
    if isinstance(path, SamplePath):
        times, values = path.times, path.values
    else:
        times, values = np.asarray(path[0], dtype=float), np.asarray(path[1], dtype=float)
        values = values.reshape((1, -1, 1)) if values.ndim == 1 else values
        if values.ndim == 2:
            values = values[..., None]
    dist = np.abs(times[:, None] - times[None, :]) ** exponent
    np.fill_diagonal(dist, np.inf)
    out = np.empty(values.shape[0])
    for lo in range(0, values.shape[0], chunk):
        v = values[lo:lo + chunk]
        diff = np.linalg.norm(v[:, :, None, :] - v[:, None, :, :], axis=-1)
        out[lo:lo + chunk] = np.max(diff / dist, axis=(1, 2))
    return out


def power_law_integrand(times: np.ndarray, hurst: float, c: float = 1.0) -> np.ndarray:
    """Closed form for h(s) = c s: M_s = c Gamma(3/2-H)/Gamma(2-2H) s^(1/2-H)."""
    return c * gamma_fn(1.5 - hurst) / gamma_fn(2 - 2 * hurst) * np.asarray(times) ** (0.5 - hurst)


FieldFn = Callable[[np.ndarray], np.ndarray]


def girsanov_weights(fields, a: float, hurst: float, t: float, n_paths: int, stream,
                     n_steps: int = 200, rule: str = "left") -> tuple[GirsanovDensity, GirsanovIntegrand]:
    """xi for the 1D equation with drift V_0 and noise field V_1, one value per path.

    The driftless solution is Y = F(B', a) with B' built from a Wiener path W' by the
    Volterra construction; the integrand is the inverse kernel operator applied to
    h = int V_0 / V_1 (Y) du, with h' taken directly from V_0 / V_1 (Y).
    """
    if fields.m != 1 or fields.d != 1:
        raise DomainError("the Girsanov weight is built for one-dimensional equations")
    grid = TimeGrid.uniform(n_steps, t)
    table = KernelTable.build(hurst, t)
    w = sample_wiener(grid, 1, n_paths, stream)
    b = volterra_build(w, table, grid)
    v1 = lambda z: fields.sigma(np.asarray(z, dtype=float)[..., None])[..., 0, 0]
    flow = FlowMap(v1, y0=float(a))
    y = flow(b.values[..., 0])
    if fields.drift is None:
        ratio = np.zeros_like(y)
    else:
        ratio = fields.v0(y[..., None])[..., 0] / v1(y)
    m = k_inv_apply(grid.times, None, hurst, h_deriv=ratio)
    return xi_compute(m, w, t, rule), m
