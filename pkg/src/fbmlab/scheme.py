"""Discretization machinery: equal-energy partitions, the Euler split, localization and chaining."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import DomainError, EllipticityError, GridMismatchError, PreconditionError, RegimeError
from .fbm_core import KernelTable, SamplePath, TimeGrid, check_hurst, volterra_weights
from .girsanov import holder_seminorm
from .quadrature import legendre01
from .sde import VectorFieldSet


@dataclass(frozen=True)
class Partition:
    times: np.ndarray
    sigma_n_sq: float
    hurst: float
    t: float
    cell_energies: np.ndarray

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.times)))

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.times)


def _energy_profile(table: KernelTable, t: float, n_nodes: int = 257) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative kernel energy on a grid graded toward both ends of [0, t]."""
    u = 0.5 * (1 - np.cos(np.linspace(0.0, np.pi, n_nodes)))
    nodes = t * u ** 2 * (3 - 2 * u)
    nodes[0], nodes[-1] = 0.0, t
    pieces = [table.energy(t, a, b) for a, b in zip(nodes[:-1], nodes[1:])]
    return nodes, np.concatenate([[0.0], np.cumsum(pieces)])


def build_partition(t: float, n: int, table: KernelTable) -> Partition:
    """Times 0 = t_0 < ... < t_n = t with kernel energy t^(2H)/n in every cell.

    Each t_i solves energy(0, t_i) = i t^(2H)/n; the energy is strictly increasing in
    the right endpoint, so the root is unique. A tabulated profile provides brackets.
    """
    if n < 1:
        raise DomainError("need n >= 1")
    h = table.hurst
    if h < 0.5:
        raise RegimeError("the equal-energy partition is built for H >= 1/2")
    if not 0.0 < t <= table.t_terminal * (1 + 1e-12):
        raise DomainError("t must lie in (0, t_terminal]")
    sigma_sq = t ** (2 * h) / n
    if h == 0.5:
        times = np.linspace(0.0, t, n + 1)
        return Partition(times, sigma_sq, h, t, np.full(n, sigma_sq))
    nodes, profile = _energy_profile(table, t)
    total = profile[-1]
    times = np.empty(n + 1)
    times[0], times[-1] = 0.0, t
    for i in range(1, n):
        target = i * total / n
        k = int(np.searchsorted(profile, target))
        lo, hi = nodes[k - 1], nodes[k]
        base = profile[k - 1]

        def excess(v, lo=lo, base=base, target=target):
            return base + table.energy(t, lo, v) - target

        try:
            times[i] = brentq(excess, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
        except ValueError as exc:
            raise DomainError("could not bracket a partition point; kernel table inconsistent") from exc
    energies = np.array([table.energy(t, a, b) for a, b in zip(times[:-1], times[1:])])
    return Partition(times, sigma_sq, h, t, energies)


@dataclass
class EulerSplit:
    """F has shape (n_paths, n + 1, m); I and R have shape (n_paths, n, m)."""

    F: np.ndarray
    I: np.ndarray
    R: np.ndarray
    partition: Partition

    def telescoping_gap(self) -> np.ndarray:
        """|sum_i (I_i + R_i) - (F_n - F_0)| per path."""
        return np.linalg.norm((self.I + self.R).sum(axis=1) - (self.F[:, -1] - self.F[:, 0]), axis=-1)

    def remainder_ratio(self) -> float:
        """Aggregate sum_i E|R_i|^2 / sum_i E|I_i|^2."""
        return float(np.sum(self.R ** 2) / np.sum(self.I ** 2))


def euler_split(x_path: SamplePath, w_path: SamplePath, partition: Partition,
                fields: VectorFieldSet, table: KernelTable) -> EulerSplit:
    """Decompose X_t along a partition into F_i = F_{i-1} + I_i + R_i.

    Frozen-field form: F_i = X_{t_i} + sum_k V_k(X_{t_i}) sum_j (K(t, m_j) - K(t_i, m_j)) dW^k_j
    over W-cells below t_i, and I_i = sum_k V_k(X_{t_{i-1}}) sum_j K(t, m_j) dW^k_j over the
    cells of (t_{i-1}, t_i], with m_j the cell midpoints used to build B. R_i is what remains.
    The equation must be driftless.
    """
    if table.hurst <= 0.5:
        raise RegimeError("the Euler split is defined for H > 1/2")
    if fields.drift is not None:
        raise PreconditionError("the Euler split assumes a driftless equation")
    if x_path.grid.times.size != w_path.grid.times.size or np.max(np.abs(x_path.times - w_path.times)) > 1e-14:
        raise GridMismatchError("X and W must share a grid")
    idx = w_path.grid.indices_of(partition.times)
    t = partition.t
    if abs(w_path.times[-1] - t) > 1e-12:
        raise GridMismatchError("W grid must end at the partition's terminal time")
    dw = w_path.increments()                          # (p, cells, d)
    wts = volterra_weights(table, w_path.times, w_path.times[idx])   # (n+1, cells)
    top = wts[-1]                                      # K(t, m_j) over all cells
    cell_right = w_path.times[1:]
    x_nodes = x_path.values[:, idx]                    # (p, n+1, m)
    v_nodes = fields.sigma(x_nodes)                    # (p, n+1, m, d)
    # sum_j (K(t, m_j) - K(t_i, m_j)) dW_j over cells below t_i
    below = cell_right[None, :] <= w_path.times[idx][:, None] + 1e-14
    gap_w = np.where(below, top[None, :] - wts, 0.0)
    frozen = np.einsum("ij,pjd->pid", gap_w, dw)
    F = x_nodes + np.einsum("pimd,pid->pim", v_nodes, frozen)
    # Wiener integrals of K(t, .) over each partition cell
    cell_of = np.searchsorted(w_path.times[idx], cell_right, side="left") - 1
    cell_of = np.clip(cell_of, 0, partition.n - 1)
    member = np.zeros((partition.n, cell_right.size))
    member[cell_of, np.arange(cell_right.size)] = top
    wiener = np.einsum("ij,pjd->pid", member, dw)
    I = np.einsum("pimd,pid->pim", v_nodes[:, :-1], wiener)
    R = np.diff(F, axis=1) - I
    return EulerSplit(F, I, R, partition)


def conditional_cov(fields: VectorFieldSet, x_state: np.ndarray, sigma_n_sq: float,
                    tol: float = 1e-9) -> np.ndarray:
    """sigma_n^2 V(x) V(x)^T, checked against the declared ellipticity band."""
    v = fields.sigma(np.asarray(x_state, dtype=float))
    cov = sigma_n_sq * v @ np.swapaxes(v, -1, -2)
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig < (fields.lam - tol) * sigma_n_sq) or np.any(eig > (fields.Lam + tol) * sigma_n_sq):
        raise EllipticityError("conditional covariance leaves [lambda, Lambda] sigma_n^2")
    return cov


def gaussian_main_term(x, f_prev, cov) -> np.ndarray:
    """Gaussian density with mean f_prev and covariance cov evaluated at x (batched)."""
    x = np.asarray(x, dtype=float)
    f_prev = np.asarray(f_prev, dtype=float)
    cov = np.asarray(cov, dtype=float)
    m = cov.shape[-1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DomainError("covariance is singular") from exc
    diff = np.broadcast_to(x - f_prev, np.broadcast_shapes((x - f_prev).shape, cov.shape[:-1]))
    z = np.linalg.solve(chol, diff[..., None])[..., 0]
    logdet = 2 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return np.exp(-0.5 * np.sum(z ** 2, axis=-1) - 0.5 * logdet - 0.5 * m * np.log(2 * np.pi))


def gaussian_lower_envelope(x, f_prev, sigma_n_sq: float, lam: float, Lam: float) -> np.ndarray:
    """(2 pi)^(-m/2) (Lambda sigma^2)^(-m/2) exp(-|x - f_prev|^2 / (2 lambda sigma^2))."""
    diff = np.asarray(x, dtype=float) - np.asarray(f_prev, dtype=float)
    m = diff.shape[-1]
    return ((2 * np.pi * Lam * sigma_n_sq) ** (-m / 2)
            * np.exp(-np.sum(diff ** 2, axis=-1) / (2 * lam * sigma_n_sq)))


@dataclass(frozen=True)
class GrrFunctional:
    gamma: float
    p: int
    interval: tuple[float, float]

    def validate(self, h: float | None = None):
        if self.gamma <= 0 or self.p < 1:
            raise DomainError("need gamma > 0 and p >= 1")
        if h is not None and not self.gamma < h - 1.0 / (2 * self.p):
            raise DomainError("need gamma < H - 1/(2p)")

    def analytic_constant(self) -> float:
        """Constant 8 * 4^(1/2p) (gamma + 1/p) / gamma from Psi(x) = x^(2p), p(u) = u^(gamma + 1/p)."""
        return 8 * 4 ** (1 / (2 * self.p)) * (self.gamma + 1 / self.p) / self.gamma


def _node_weights(times: np.ndarray) -> np.ndarray:
    w = np.zeros(times.size)
    d = np.diff(times)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def grr_functional(path: SamplePath, functional: GrrFunctional, h: float | None = None) -> np.ndarray:
    """Double integral of |B_v - B_u|^(2p) / |v - u|^(2 gamma p + 2) over the interval, per path.

    Midpoint-type rule on the observation nodes inside the interval; the diagonal
    (pairs closer than one cell) is left out.
    """
    functional.validate(h)
    lo, hi = functional.interval
    mask = (path.times >= lo - 1e-14) & (path.times <= hi + 1e-14)
    times = path.times[mask]
    vals = path.values[:, mask]
    w = _node_weights(times)
    dist = np.abs(times[:, None] - times[None, :])
    np.fill_diagonal(dist, np.inf)
    weight = np.outer(w, w) / dist ** (2 * functional.gamma * functional.p + 2)
    out = np.empty(path.n_paths)
    for k in range(path.n_paths):
        diff = np.linalg.norm(vals[k][:, None, :] - vals[k][None, :, :], axis=-1)
        out[k] = np.sum(diff ** (2 * functional.p) * weight)
    return out


GRR_MARGIN = 1.25


def grr_holder_ratio(path: SamplePath, functional: GrrFunctional, h: float | None = None) -> np.ndarray:
    """Per-path ratio of the discrete Hoelder seminorm to N^(1/2p) on the whole grid."""
    lo, hi = functional.interval
    if abs(path.times[0] - lo) > 1e-14 or abs(path.times[-1] - hi) > 1e-14:
        raise GridMismatchError("path grid must span the functional's interval")
    n_value = grr_functional(path, functional, h)
    return holder_seminorm(path, functional.gamma) / n_value ** (1 / (2 * functional.p))


def grr_calibrate(path: SamplePath, functional: GrrFunctional, h: float | None = None,
                  margin: float = GRR_MARGIN) -> float:
    """One constant c with seminorm <= c N^(1/2p): the largest calibration ratio times a fixed margin."""
    return margin * float(np.max(grr_holder_ratio(path, functional, h)))


@dataclass(frozen=True)
class LocalizationFn:
    M: float
    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise DomainError("eps must be positive")


def _bump(x):
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) < 1
    out = np.zeros_like(x)
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def bump_normalization() -> float:
    """c_phi with c_phi * int exp(-1/(1-x^2)) dx = 1 over (-1, 1)."""
    val, _ = quad(lambda x: float(_bump(np.array(x))), -1.0, 1.0, epsabs=0, epsrel=1e-13, limit=200)
    return 1.0 / val


def _bump_cdf(z: np.ndarray) -> np.ndarray:
    """int_{-1}^z c_phi exp(-1/(1-x^2)) dx for z in [-1, 1].

    The left tail is integrated directly and the right half by reflection, so values
    near either end keep full relative precision.
    """
    x, w = legendre01(60)
    z = np.asarray(z, dtype=float)
    left = -np.abs(z)
    width = left + 1.0
    nodes = -1.0 + width[..., None] * x
    tail = width * np.sum(w * _bump(nodes), axis=-1) * bump_normalization()
    return np.where(z <= 0, tail, 1.0 - tail)


def localization_eval(fn: LocalizationFn, y):
    """Smooth surrogate of the indicator of y <= M with a transition of width 2 eps.

    The mollifier is phi_eps(x) = phi(x / eps) / eps with phi the normalized bump on (-1, 1).
    """
    y = np.asarray(y, dtype=float)
    z = (y - fn.M) / fn.eps
    out = np.where(z <= -1, 1.0, np.where(z >= 1, 0.0, 1.0 - _bump_cdf(np.clip(z, -1, 1))))
    return out if out.ndim else float(out)


def localization_params(partition: Partition, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """c_i = (lambda / 4) * energy of cell i and eps_i = c_i / 2."""
    c = 0.25 * lam * np.asarray(partition.cell_energies)
    return c, 0.5 * c


@dataclass(frozen=True)
class Chain:
    n: int
    points: np.ndarray
    sigma_n: float

    @property
    def step(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.linalg.norm(self.points[1] - self.points[0]))


def chain_construct(a, x, t: float, h: float, c1: float, c2: float) -> Chain:
    """Points y_i = a + (i/n)(x - a) with n = ceil(c2 |x - a|^2 / t^(2H)), at least 1."""
    h = check_hurst(h)
    if c2 <= 0 or c1 <= 0 or c2 ** -0.5 > c1:
        raise PreconditionError("need c2^(-1/2) <= c1")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    dist = float(np.linalg.norm(x - a))
    n = max(1, int(np.ceil(c2 * dist ** 2 / t ** (2 * h))))
    frac = np.arange(n + 1)[:, None] / n
    points = a[None, :] + frac * (x - a)[None, :]
    sigma_n = t ** h / np.sqrt(n)
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    if np.any(steps > c1 * sigma_n * (1 + 1e-12)):
        raise PreconditionError("chain step exceeds c1 sigma_n")
    return Chain(n, points, float(sigma_n))
