"""Fixed quadrature rules for integrands with algebraic endpoint behaviour."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

GRADING_RATIO = 0.25
FLOOR_REL = 1e-6


@lru_cache(maxsize=None)
def legendre01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def jacobi01(order: int, exponent: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1] for the weight x**exponent."""
    x, w = roots_jacobi(order, 0.0, exponent)
    return 0.5 * (x + 1.0), w * 0.5 ** (exponent + 1.0)


def _graded_half(a: float, b: float, exponent: float | None, gap: float, order: int, levels: int,
                 floor: float = 0.0):
    """Rule on [a, b] with panels shrinking geometrically toward a.

    ``gap`` is the distance from ``a`` to the nearest singular point beyond it; when
    it is zero the innermost panel uses a Jacobi rule with weight (x - a)**exponent.
    """
    width = b - a
    if gap > 0.0:
        n_levels = int(np.clip(np.ceil(np.log(width / gap) / -np.log(GRADING_RATIO)) + 2, 0, levels))
    else:
        n_levels = levels
    xs, ws = legendre01(order)
    nodes, weights = [], []
    right = width
    for _ in range(n_levels):
        left = right * GRADING_RATIO
        if left < floor:
            break
        nodes.append(left + (right - left) * xs)
        weights.append((right - left) * ws)
        right = left
    if gap == 0.0 and exponent is not None:
        xj, wj = jacobi01(order, exponent)
        nodes.append(right * xj)
        # the caller's integrand is multiplied back by the weight, so divide it out here
        weights.append(right * wj / np.power(xj, exponent))
    else:
        nodes.append(right * xs)
        weights.append(right * ws)
    return np.concatenate(nodes), np.concatenate(weights)


def graded_rule(a: float, b: float, left: tuple[float | None, float] = (None, np.inf),
                right: tuple[float | None, float] = (None, np.inf), order: int = 20,
                levels: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights for an integral over [a, b].

    ``left`` and ``right`` describe each endpoint as (exponent, gap). A gap of 0
    marks a true algebraic singularity (x - a)**exponent at that endpoint; a small
    positive gap marks a singularity just outside the interval, which only needs
    geometric refinement. An infinite gap means the endpoint is regular.
    """
    if not b > a:
        raise ValueError("empty interval")
    mid = 0.5 * (a + b)
    # Nodes sit at a + x or b - x, so offsets far below the endpoint's own
    # magnitude are lost to rounding; stop grading there and let the Jacobi
    # panel absorb the rest.
    lx, lw = _half(a, mid, left, order, levels, FLOOR_REL * abs(a))
    rx, rw = _half(mid, b, right, order, levels, FLOOR_REL * abs(b), mirrored=True)
    return np.concatenate([lx, rx]), np.concatenate([lw, rw])


def _half(a, b, singularity, order, levels, floor, mirrored=False):
    exponent, gap = singularity
    if np.isinf(gap):
        xs, ws = legendre01(order)
        return a + (b - a) * xs, (b - a) * ws
    x, w = _graded_half(0.0, b - a, exponent, gap, order, levels, floor)
    if mirrored:
        return b - x, w
    return a + x, w
