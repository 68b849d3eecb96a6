"""Gauss-Legendre rules shared by the solver and diagnostics."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_unit(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes on [0, 1] and weights summing to one."""
    if order < 1:
        raise ValueError(f"quadrature order must be >= 1, got {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def integrate_interval(g, a, b, order: int = 16):
    """Integral of the vectorised ``g`` over [a, b]; ``a``/``b`` may be arrays."""
    nodes, weights = gauss_unit(order)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    span = (b - a)[..., None]
    s = a[..., None] + span * nodes
    return (span * weights * g(s)).sum(axis=-1)


def tensor_rule(order: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on the unit cube: points (q**dim, dim), weights (q**dim,)."""
    nodes, weights = gauss_unit(order)
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    wgrids = np.meshgrid(*([weights] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return pts, w
