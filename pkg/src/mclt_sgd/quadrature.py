"""Gauss-Hermite tensor grids for Gaussian expectations and Gauss-Legendre
panels for the Ornstein-Uhlenbeck time integral."""
from __future__ import annotations

from functools import lru_cache
import itertools

import numpy as np

GH_NODES = 64


@lru_cache(maxsize=None)
def _hermite_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


@lru_cache(maxsize=None)
def standard_normal_grid(dim: int, n: int = GH_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes (m, dim) and weights (m,) integrating against N(0, I_dim)."""
    x, w = _hermite_1d(n)
    if dim == 1:
        return x[:, None].copy(), w.copy()
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return nodes, weights


def time_panels(t_max: float = 24.0, nodes_per_panel: int = 16, refine: int = 1):
    """Gauss-Legendre nodes/weights on [0, t_max] with panels graded towards 0.

    ``refine`` splits every panel into that many equal pieces.
    """
    edges = [0.0, 1e-3, 1e-2, 0.05, 0.2, 0.5, 1.0, 2.0, 3.5, 5.0, 7.0, 10.0, 14.0, 19.0, t_max]
    edges = [e for e in edges if e <= t_max]
    if edges[-1] < t_max:
        edges.append(t_max)
    fine = [edges[0]]
    for a, b in zip(edges[:-1], edges[1:]):
        fine.extend(np.linspace(a, b, refine + 1)[1:])
    g, gw = np.polynomial.legendre.leggauss(nodes_per_panel)
    ts, ws = [], []
    for a, b in zip(fine[:-1], fine[1:]):
        half = 0.5 * (b - a)
        ts.append(a + half * (g + 1.0))
        ws.append(half * gw)
    return np.concatenate(ts), np.concatenate(ws)
