"""Two-sided Gaussian density bounds in the additive 1D case via the coupling formula for g(F)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_laguerre

from .errors import DomainError, GridMismatchError, PreconditionError
from .fbm_core import SamplePath, TimeGrid, sample_fbm_cholesky
from .hilbert import inner_matrix
from .rng import RandomStream
from .sde import SdeProblem, malliavin_profile_additive, solve_additive_ode

MIN_PER_BIN = 30


def ou_shift(b: SamplePath, b_prime: SamplePath, theta: float) -> SamplePath:
    """Pointwise exp(-theta) b + sqrt(1 - exp(-2 theta)) b'."""
    if theta < 0:
        raise DomainError("theta must be non-negative")
    if b.values.shape != b_prime.values.shape or np.any(b.times != b_prime.times):
        raise GridMismatchError("paths must share grid and shape")
    decay = np.exp(-theta)
    mixed = decay * b.values + np.sqrt(-np.expm1(-2 * theta)) * b_prime.values
    return SamplePath(b.grid, mixed, b.label)


@dataclass
class GEstimate:
    centers: np.ndarray
    values: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    theta_nodes: int
    mean: float
    e_abs: float

    def as_rows(self):
        return [(float(c), float(v), float(s), int(n))
                for c, v, s, n in zip(self.centers, self.values, self.se, self.counts)]


def _profile_cells(problem: SdeProblem, path: SamplePath) -> np.ndarray:
    """Cell values r -> D_r X_t (one row per path) on the simulation grid."""
    f = problem.fields
    sigma = float(f.sigma(np.zeros(1))[0, 0])
    if f.drift is None:
        return np.full((path.n_paths, path.times.size - 1), sigma)
    deriv = lambda x: f.drift_jacobian(x[..., None])[..., 0, 0]
    return malliavin_profile_additive(path.times, path.values[..., 0], deriv, sigma)


def _solve(problem: SdeProblem, b: SamplePath) -> SamplePath:
    f = problem.fields
    sigma = float(f.sigma(np.zeros(1))[0, 0])
    if f.drift is None:
        return SamplePath(b.grid, problem.a[0] + sigma * b.values, "X")
    v0 = lambda z: f.v0(z[..., None])[..., 0]
    return solve_additive_ode(problem.a[0], v0, sigma, b)


def g_samples(problem: SdeProblem, t: float, n_outer: int, stream: RandomStream,
              theta_nodes: int = 16, n_steps: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (X_t, integral over theta of exp(-theta) <DX_t, DX_t^theta>)."""
    if problem.mode != "additive-1d":
        raise PreconditionError("g estimation is for the additive 1D equation")
    grid = TimeGrid.uniform(n_steps, t)
    q = inner_matrix(grid.times, problem.hurst)
    b = sample_fbm_cholesky(problem.hurst, grid, 1, n_outer, stream.child("B"))
    b_prime = sample_fbm_cholesky(problem.hurst, grid, 1, n_outer, stream.child("B'"))
    x = _solve(problem, b)
    left = _profile_cells(problem, x) @ q
    nodes, weights = roots_laguerre(theta_nodes)
    acc = np.zeros(n_outer)
    for theta, weight in zip(nodes, weights):
        shifted = _solve(problem, ou_shift(b, b_prime, theta))
        acc += weight * np.einsum("pi,pi->p", left, _profile_cells(problem, shifted))
    return x.values[:, -1, 0], acc


def g_estimate(problem: SdeProblem, t: float, n_outer: int, stream: RandomStream,
               theta_nodes: int = 16, bins: int = 20, n_steps: int = 128,
               n_moment: int | None = None) -> GEstimate:
    """Estimate g(z) = E[<DF, -DL^{-1}F> | F = z] for F = X_t - E[X_t].

    Conditioning is by equal-count bins of F. The centering E[X_t] and E|F| come from
    an independent batch of n_moment paths (default n_outer).
    """
    if bins < 1 or n_outer < bins:
        raise DomainError("need 1 <= bins <= n_outer")
    if n_outer / bins < MIN_PER_BIN:
        warnings.warn(f"fewer than {MIN_PER_BIN} samples per bin", RuntimeWarning, stacklevel=2)
    grid = TimeGrid.uniform(n_steps, t)
    extra = sample_fbm_cholesky(problem.hurst, grid, 1, n_moment or n_outer, stream.child("moments"))
    xm = _solve(problem, extra).values[:, -1, 0]
    mean = float(xm.mean())
    e_abs = float(np.abs(xm - mean).mean())
    xt, gs = g_samples(problem, t, n_outer, stream.child("outer"), theta_nodes, n_steps)
    f = xt - mean
    order = np.argsort(f, kind="stable")
    groups = np.array_split(order, bins)
    centers = np.array([f[g].mean() for g in groups])
    values = np.array([gs[g].mean() for g in groups])
    se = np.array([gs[g].std(ddof=1) / np.sqrt(g.size) if g.size > 1 else np.inf for g in groups])
    counts = np.array([g.size for g in groups])
    return GEstimate(centers, values, se, counts, theta_nodes, mean, e_abs)


def g_theory_band(sigma: float, t: float, h: float, m_bound: float) -> tuple[float, float]:
    """sigma^2 t^(2H) exp(-+2 M t): the band the drift derivative bound forces on g."""
    base = sigma ** 2 * t ** (2 * h)
    return base * np.exp(-2 * m_bound * t), base * np.exp(2 * m_bound * t)


def density_bounds_from_g(c1: float, c2: float, e_abs_f: float, z_grid) -> tuple[np.ndarray, np.ndarray]:
    """Lower (E|F|/2c2) exp(-z^2/2c1) and upper (E|F|/2c1) exp(-z^2/2c2)."""
    if not 0 < c1 <= c2:
        raise DomainError("need 0 < c1 <= c2")
    z = np.asarray(z_grid, dtype=float)
    lower = e_abs_f / (2 * c2) * np.exp(-z ** 2 / (2 * c1))
    upper = e_abs_f / (2 * c1) * np.exp(-z ** 2 / (2 * c2))
    return lower, upper
