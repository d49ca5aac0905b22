"""Pure-numpy implementations of the hot pairwise kernels.

These are the fallback backend; the compiled extension in ``_kernels_cy``
provides the same two functions with fused loops. Reduction order differs
between backends, so cross-backend agreement is to rounding, not bitwise.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


def aniso_sqdist(
    points: np.ndarray,
    positions: np.ndarray,
    normals: Optional[np.ndarray],
    eta: float,
) -> np.ndarray:
    """Pairwise oriented squared distances, shape (P, N).

    d[j, i] = |p_j - y_i|^2 + (eta - 1) (n_i . (p_j - y_i))^2.
    ``normals`` may be None when ``eta == 1``.
    """
    points = np.asarray(points, dtype=float)
    positions = np.asarray(positions, dtype=float)
    d = (
        (points**2).sum(axis=1)[:, None]
        + (positions**2).sum(axis=1)[None, :]
        - 2.0 * (points @ positions.T)
    )
    np.maximum(d, 0.0, out=d)
    if eta != 1.0:
        proj = points @ normals.T - (positions * normals).sum(axis=1)[None, :]
        d += (eta - 1.0) * proj**2
    return d


def weighted_aniso_sqsum(
    resp: np.ndarray,
    points: np.ndarray,
    positions: np.ndarray,
    normals: Optional[np.ndarray],
    eta: float,
) -> float:
    """sum_{j,i} resp[j, i] * d[j, i] without materialising the (P, N) matrix.

    Row sums of ``resp`` and its first/second point moments collapse the sum
    to O(N + P) memory.
    """
    resp = np.asarray(resp, dtype=float)
    points = np.asarray(points, dtype=float)
    positions = np.asarray(positions, dtype=float)
    row = resp.sum(axis=1)  # (P,)
    col = resp.sum(axis=0)  # (N,)
    s = resp.T @ points  # (N, 3)
    total = float(
        row @ (points**2).sum(axis=1)
        + col @ (positions**2).sum(axis=1)
        - 2.0 * np.einsum("na,na->", s, positions)
    )
    if eta != 1.0:
        pn = points @ normals.T  # (P, N) projections of points
        yn = (positions * normals).sum(axis=1)  # (N,)
        quad = np.einsum("jn,jn,jn->", resp, pn, pn)
        lin = np.einsum("jn,jn->n", resp, pn)
        total += (eta - 1.0) * float(quad - 2.0 * (lin @ yn) + col @ yn**2)
    return total
