"""Fractional Brownian motion: covariance, Volterra kernel and path samplers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import beta as beta_fn

from .errors import DegenerateGridError, DomainError, GridMismatchError, RegimeError
from .quadrature import graded_rule, legendre01
from .rng import RandomStream

TABLE_MAGIC = b"FBMKTAB\x00"
TABLE_VERSION = 1
_HEADER = struct.Struct("<8sIddI")
_BODY = struct.Struct("<dddd")


def check_hurst(h: float) -> float:
    h = float(h)
    if not 0.0 < h < 1.0:
        raise DomainError(f"Hurst index must lie in (0, 1), got {h}")
    return h


def _check_times(*ts):
    for t in ts:
        arr = np.asarray(t, dtype=float)
        if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(~np.isfinite(arr)):
            raise DomainError("times must lie in [0, 1]")


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise DomainError("a time grid needs at least one node")
        if times[0] != 0.0:
            raise DomainError("a time grid starts at 0")
        if np.any(np.diff(times) <= 0.0):
            raise DomainError("grid times must be strictly increasing")
        if times[-1] > 1.0:
            raise DomainError("grid times must lie in [0, 1]")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, n_steps: int, t: float = 1.0) -> "TimeGrid":
        return cls(np.linspace(0.0, t, n_steps + 1))

    @classmethod
    def union(cls, *grids) -> "TimeGrid":
        parts = [np.asarray(g.times if isinstance(g, TimeGrid) else g, dtype=float) for g in grids]
        merged = np.unique(np.concatenate(parts))
        # collapse nodes that differ only by rounding
        keep = np.concatenate([[True], np.diff(merged) > 1e-14])
        return cls(merged[keep])

    def __len__(self):
        return self.times.size

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def indices_of(self, other: "TimeGrid | np.ndarray", tol: float = 1e-12) -> np.ndarray:
        """Positions of ``other``'s nodes inside this grid; raises if any is missing."""
        target = np.asarray(other.times if isinstance(other, TimeGrid) else other, dtype=float)
        idx = np.clip(np.searchsorted(self.times, target), 0, self.times.size - 1)
        below = np.clip(idx - 1, 0, None)
        pick = np.where(np.abs(self.times[below] - target) < np.abs(self.times[idx] - target), below, idx)
        if np.any(np.abs(self.times[pick] - target) > tol):
            raise GridMismatchError("grid does not contain all requested nodes")
        return pick


@dataclass
class SamplePath:
    """A batch of paths on a common grid; values have shape (n_paths, n_nodes, dim)."""

    grid: TimeGrid
    values: np.ndarray
    label: str = "B"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :, None]
        elif values.ndim == 2:
            values = values[:, :, None]
        if values.shape[1] != len(self.grid):
            raise GridMismatchError("values length differs from grid length")
        self.values = values

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def path(self, i: int) -> "SamplePath":
        return SamplePath(self.grid, self.values[i:i + 1], self.label)

    def at(self, grid: TimeGrid) -> "SamplePath":
        """Restriction to a coarser grid whose nodes are nodes of this one."""
        return SamplePath(grid, self.values[:, self.grid.indices_of(grid)], self.label)

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)


def cov_r(s, t, h: float):
    """fBm covariance 0.5 (s^2H + t^2H - |t - s|^2H)."""
    h = check_hurst(h)
    _check_times(s, t)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    out = 0.5 * (s ** (2 * h) + t ** (2 * h) - np.abs(t - s) ** (2 * h))
    return out if out.ndim else float(out)


def increment_variance(s, t, h: float):
    h = check_hurst(h)
    _check_times(s, t)
    out = np.abs(np.asarray(t, dtype=float) - np.asarray(s, dtype=float)) ** (2 * h)
    return out if np.ndim(out) else float(out)


def closed_form_constants(h: float) -> tuple[float, float]:
    """Standard normalizing constants of the Volterra kernel.

    Returns the scale of the leading term and of the integral term. They serve as a
    cross-check for the calibrated values, not as the values in use.
    """
    h = check_hurst(h)
    if h > 0.5:
        c = np.sqrt(h * (2 * h - 1) / beta_fn(2 - 2 * h, h - 0.5))
        return c, 0.0
    if h < 0.5:
        c = np.sqrt(2 * h / ((1 - 2 * h) * beta_fn(1 - 2 * h, h + 0.5)))
        return c, (0.5 - h) * c
    return 1.0, 0.0


def _inner_integral(t: np.ndarray, s: np.ndarray, h: float, order: int) -> np.ndarray:
    """The integral term of the kernel without its constant.

    For H > 1/2 this is int_s^t (u-s)^(H-3/2) u^(H-1/2) du and for H < 1/2 it is
    int_s^t (u-s)^(H-1/2) u^(H-3/2) du. After u = s e^y the integrand is
    s^(2H-1) (e^y - 1)^e1 e^(y e2); the stretch y = z^(1/q) near y = 0 absorbs the
    endpoint singularity, and the smooth remainder y > 1 takes a plain rule.
    """
    x, w = legendre01(order)
    if h > 0.5:
        q, e1, e2 = h - 0.5, h - 1.5, h + 0.5
    else:
        q, e1, e2 = h + 0.5, h - 0.5, h - 0.5
    span = np.log1p((t - s) / s)[..., None]
    head = np.minimum(span, 1.0)
    zmax = head ** q
    y = (zmax * x) ** (1.0 / q)
    g = (np.expm1(y) / y) ** e1 * np.exp(y * e2) / q
    total = zmax[..., 0] * (w * g).sum(-1)
    tail = np.maximum(span - 1.0, 0.0)
    y = 1.0 + tail * x
    g = np.expm1(y) ** e1 * np.exp(y * e2)
    total = total + tail[..., 0] * (w * g).sum(-1)
    return s ** (2 * h - 1) * total


def _unit_kernel(t, s, h: float, ratio: float, order: int) -> np.ndarray:
    """Kernel with the leading constant set to 1 and the second one set to ``ratio``."""
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    out = np.zeros(t.shape)
    live = s < t
    if not np.any(live):
        return out
    tl, sl = t[live], s[live]
    if h == 0.5:
        out[live] = 1.0
    elif h > 0.5:
        out[live] = sl ** (0.5 - h) * _inner_integral(tl, sl, h, order)
    else:
        first = (sl / tl) ** (0.5 - h) * (tl - sl) ** (h - 0.5)
        out[live] = first + ratio * sl ** (0.5 - h) * _inner_integral(tl, sl, h, order)
    return out


def _energy_endpoints(h: float, a: float, b: float, t: float):
    near_zero = 1.0 - 2 * h if h > 0.5 else 2 * h - 1.0
    left = (near_zero, 0.0) if a == 0.0 else (None, a)
    right = (2 * h - 1.0, 0.0) if b == t else (None, t - b)
    return left, right


@dataclass(frozen=True)
class KernelTable:
    """Volterra kernel for one Hurst index, calibrated on [0, t_terminal].

    ``scale`` multiplies the leading term; for H < 1/2 the integral term carries
    ``second_scale`` = (1/2 - H) * scale. The scale is fixed by requiring the
    kernel energy over [0, t_terminal] to equal t_terminal^(2H).
    """

    hurst: float
    t_terminal: float
    scale: float
    second_scale: float
    order: int = 64
    calibration_residual: float = 0.0
    closed_form_gap: float = 0.0
    quad_order: int = field(default=20, compare=False)

    @classmethod
    def build(cls, hurst: float, t_terminal: float = 1.0, order: int = 64, quad_order: int = 20):
        h = check_hurst(hurst)
        if not 0.0 < t_terminal <= 1.0:
            raise DomainError("terminal time must lie in (0, 1]")
        if h == 0.5:
            return cls(h, t_terminal, 1.0, 0.0, order, 0.0, 0.0, quad_order)
        ratio = 0.5 - h if h < 0.5 else 0.0
        unit = cls(h, t_terminal, 1.0, ratio, order, 0.0, 0.0, quad_order)
        raw = unit.energy(t_terminal, 0.0, t_terminal)
        scale = float(np.sqrt(t_terminal ** (2 * h) / raw))
        table = cls(h, t_terminal, scale, ratio * scale, order, 0.0, 0.0, quad_order)
        # residual measured with a finer rule than the one used to calibrate
        fine = cls(h, t_terminal, scale, ratio * scale, order, 0.0, 0.0, 2 * quad_order)
        residual = abs(fine.energy(t_terminal, 0.0, t_terminal) / t_terminal ** (2 * h) - 1.0)
        gap = abs(scale / closed_form_constants(h)[0] - 1.0)
        return cls(h, t_terminal, scale, ratio * scale, order, residual, gap, quad_order)

    def k(self, t, s) -> np.ndarray:
        """Vectorized kernel value; zero where s >= t."""
        ratio = self.second_scale / self.scale if self.hurst < 0.5 else 0.0
        return self.scale * _unit_kernel(t, s, self.hurst, ratio, self.order)

    def energy(self, t: float, a: float, b: float) -> float:
        if b == a:
            return 0.0
        if self.hurst == 0.5:
            return float(b - a)
        left, right = _energy_endpoints(self.hurst, a, b, t)
        x, w = graded_rule(a, b, left, right, order=self.quad_order)
        return float(np.dot(w, self.k(t, x) ** 2))

    def save(self, path: str | Path) -> None:
        blob = _HEADER.pack(TABLE_MAGIC, TABLE_VERSION, self.hurst, self.t_terminal, self.order)
        blob += _BODY.pack(self.scale, self.second_scale, self.calibration_residual, self.closed_form_gap)
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path: str | Path) -> "KernelTable":
        blob = Path(path).read_bytes()
        if len(blob) != _HEADER.size + _BODY.size:
            raise ValueError("kernel cache has the wrong size")
        magic, version, h, t, order = _HEADER.unpack_from(blob)
        if magic != TABLE_MAGIC:
            raise ValueError("not a kernel cache file")
        if version != TABLE_VERSION:
            raise ValueError(f"unsupported kernel cache version {version}")
        scale, second, residual, gap = _BODY.unpack_from(blob, _HEADER.size)
        return cls(h, t, scale, second, order, residual, gap)


def _check_kernel_args(t, s, table: KernelTable):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0.0) or np.any(s >= t):
        raise DomainError("kernel needs 0 < s < t")
    if np.any(t > table.t_terminal * (1 + 1e-12)):
        raise DomainError("t exceeds the table's terminal time")


def kernel_k(t, s, table: KernelTable):
    _check_kernel_args(t, s, table)
    out = table.k(t, s)
    return out if out.ndim else float(out)


def kernel_energy(t: float, a: float, b: float, table: KernelTable) -> float:
    """Integral of K(t, u)^2 over [a, b]."""
    if not 0.0 <= a <= b <= t:
        raise DomainError("kernel energy needs 0 <= a <= b <= t")
    if t > table.t_terminal * (1 + 1e-12):
        raise DomainError("t exceeds the table's terminal time")
    return table.energy(t, a, b)


def kernel_cross(s: float, t: float, table: KernelTable) -> float:
    """Integral of K(t, r) K(s, r) over [0, min(s, t)], which should equal cov_r(s, t)."""
    lo, hi = min(s, t), max(s, t)
    if lo == 0.0:
        return 0.0
    h = table.hurst
    if h == 0.5:
        return lo
    near_zero = 1.0 - 2 * h if h > 0.5 else 2 * h - 1.0
    near_top = 2 * h - 1.0 if hi == lo else h - 0.5
    x, w = graded_rule(0.0, lo, (near_zero, 0.0), (near_top, 0.0), order=table.quad_order)
    return float(np.dot(w, table.k(hi, x) * table.k(lo, x)))


def kernel_lower_envelope(table: KernelTable, ts, ss) -> float:
    """Smallest value of K(t, s) / (t - s)^(H - 1/2) over the supplied pairs with s < t."""
    t, s = np.broadcast_arrays(np.asarray(ts, dtype=float), np.asarray(ss, dtype=float))
    mask = (s > 0) & (s < t)
    return float(np.min(table.k(t[mask], s[mask]) / (t[mask] - s[mask]) ** (table.hurst - 0.5)))


def covariance_matrix(times: np.ndarray, h: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return cov_r(times[:, None], times[None, :], h)


def sample_fbm_cholesky(h: float, grid: TimeGrid, d: int, n_paths: int,
                        stream: RandomStream, start: int = 0) -> SamplePath:
    """Exact fBm on an arbitrary grid by Cholesky factorization of the covariance."""
    h = check_hurst(h)
    inner = grid.times[1:]
    try:
        chol = np.linalg.cholesky(covariance_matrix(inner, h))
    except np.linalg.LinAlgError as exc:
        raise DegenerateGridError("covariance matrix is not positive definite") from exc
    z = stream.normal(n_paths, (inner.size, d), start=start)
    values = np.zeros((n_paths, len(grid), d))
    values[:, 1:] = np.einsum("ij,pjd->pid", chol, z)
    return SamplePath(grid, values, "B")


def sample_wiener(grid: TimeGrid, d: int, n_paths: int, stream: RandomStream, start: int = 0) -> SamplePath:
    z = stream.normal(n_paths, (len(grid) - 1, d), start=start)
    steps = np.sqrt(np.diff(grid.times))[None, :, None] * z
    values = np.zeros((n_paths, len(grid), d))
    values[:, 1:] = np.cumsum(steps, axis=1)
    return SamplePath(grid, values, "W")


def sample_fbm_circulant(h: float, n_steps: int, t: float, d: int, n_paths: int,
                         stream: RandomStream, start: int = 0) -> SamplePath:
    """fBm on a uniform grid by circulant embedding of fractional Gaussian noise."""
    h = check_hurst(h)
    k = np.arange(n_steps + 1, dtype=float)
    acov = 0.5 * ((k + 1) ** (2 * h) - 2 * k ** (2 * h) + np.abs(k - 1) ** (2 * h))
    row = np.concatenate([acov, acov[-2:0:-1]])
    eig = np.fft.fft(row).real
    if np.any(eig < -1e-10 * eig.max()):
        raise DegenerateGridError("circulant embedding is not nonnegative definite")
    eig = np.clip(eig, 0.0, None)
    size = row.size
    z = stream.normal(n_paths, (d, 2, size), start=start)
    spectral = np.sqrt(eig / size) * (z[:, :, 0] + 1j * z[:, :, 1])
    noise = np.fft.fft(spectral, axis=-1).real[..., :n_steps] * (t / n_steps) ** h
    values = np.zeros((n_paths, n_steps + 1, d))
    values[:, 1:] = np.cumsum(np.moveaxis(noise, 1, 2), axis=1)
    return SamplePath(TimeGrid.uniform(n_steps, t), values, "B")


def volterra_weights(table: KernelTable, w_times: np.ndarray, out_times: np.ndarray) -> np.ndarray:
    """Matrix of K(t_i, midpoint_j) for W-cells lying below each output time."""
    mids = 0.5 * (w_times[1:] + w_times[:-1])
    rights = w_times[1:]
    tt = np.asarray(out_times, dtype=float)[:, None]
    active = rights[None, :] <= tt + 1e-14
    if table.hurst == 0.5:
        return active.astype(float)
    vals = table.k(np.broadcast_to(tt, active.shape), np.broadcast_to(mids, active.shape))
    return np.where(active, vals, 0.0)


def volterra_build(w: SamplePath, table: KernelTable, grid: TimeGrid) -> SamplePath:
    """fBm from a Wiener path: B_t = sum_j K(t, mid_j) dW_j over W-cells below t.

    The kernel is evaluated at cell midpoints. With H = 1/2 the weights are one and
    the Wiener path is returned on the output grid.
    """
    idx = w.grid.indices_of(grid)
    if grid.horizon > table.t_terminal * (1 + 1e-12):
        raise GridMismatchError("output grid extends past the kernel table")
    weights = volterra_weights(table, w.times, w.times[idx])
    values = np.einsum("ij,pjd->pid", weights, w.increments())
    return SamplePath(grid, values, "B")
