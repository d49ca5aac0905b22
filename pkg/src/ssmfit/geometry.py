"""Mesh topology, vertex normals, oriented covariances, and point sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateNormalError, EmptySliceError

__all__ = [
    "MeshTopology",
    "SparsePointSet",
    "vertex_normal",
    "vertex_normals",
    "aniso_covariance",
    "aniso_precision",
    "triangle_areas",
    "osada_point",
    "sample_surface_points",
    "add_gaussian_noise",
    "slice_contour",
    "contour_inplane_noise",
]


@dataclass
class MeshTopology:
    """Oriented triangles plus the designated normal triangle per vertex.

    ``normal_neighbors[i] = (i2, i3)`` names the 'left' and 'right' neighbour
    vertices used for the normal at vertex ``i``; ``(i, i2, i3)`` is always an
    oriented triangle of the mesh. The designation rule: the incident triangle
    with the smallest triangle index, with ``(i2, i3)`` following ``i`` in that
    triangle's stored orientation.
    """

    triangles: np.ndarray
    normal_neighbors: np.ndarray = field(default=None)  # type: ignore[assignment]
    num_vertices: int = 0

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=int)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (T, 3), got {self.triangles.shape}")
        if self.triangles.size == 0:
            raise ValueError("mesh has no triangles")
        if self.triangles.min() < 0:
            raise ValueError("negative vertex index in triangles")
        n = self.num_vertices or int(self.triangles.max()) + 1
        if self.triangles.max() >= n:
            raise ValueError("triangle index out of range")
        if np.any(
            (self.triangles[:, 0] == self.triangles[:, 1])
            | (self.triangles[:, 1] == self.triangles[:, 2])
            | (self.triangles[:, 0] == self.triangles[:, 2])
        ):
            raise ValueError("triangle with repeated vertex index")
        self.num_vertices = n
        if self.normal_neighbors is None:
            self.normal_neighbors = self._designate_normal_neighbors(n)
        else:
            self.normal_neighbors = np.asarray(self.normal_neighbors, dtype=int)
            if self.normal_neighbors.shape != (n, 2):
                raise ValueError("normal_neighbors must be (N, 2)")

    def _designate_normal_neighbors(self, n: int) -> np.ndarray:
        tri = self.triangles
        flat = tri.ravel()
        first = np.full(n, flat.size, dtype=int)
        np.minimum.at(first, flat, np.arange(flat.size))
        if np.any(first == flat.size):
            missing = np.flatnonzero(first == flat.size)
            raise ValueError(f"vertices not used by any triangle: {missing[:10]}")
        t, corner = first // 3, first % 3
        nn = np.empty((n, 2), dtype=int)
        nn[:, 0] = tri[t, (corner + 1) % 3]
        nn[:, 1] = tri[t, (corner + 2) % 3]
        return nn


@dataclass
class SparsePointSet:
    """Observed surface points, optionally labelled with an object id."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (P, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("point set is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return self.points.shape[0]


def _normal_cross(positions: np.ndarray, topology: MeshTopology) -> np.ndarray:
    """Unnormalised normals b_i = (y_i2 - y_i) x (y_i3 - y_i) for all vertices."""
    i2 = topology.normal_neighbors[:, 0]
    i3 = topology.normal_neighbors[:, 1]
    e2 = positions[i2] - positions
    e3 = positions[i3] - positions
    return np.cross(e2, e3)


def _degeneracy_scale(positions: np.ndarray, topology: MeshTopology) -> np.ndarray:
    """Per-vertex squared max edge length of the designated triangle."""
    i2 = topology.normal_neighbors[:, 0]
    i3 = topology.normal_neighbors[:, 1]
    e2 = positions[i2] - positions
    e3 = positions[i3] - positions
    e23 = positions[i3] - positions[i2]
    sq = np.stack(
        [(e2**2).sum(axis=1), (e3**2).sum(axis=1), (e23**2).sum(axis=1)]
    )
    return sq.max(axis=0)


def vertex_normal(positions: np.ndarray, topology: MeshTopology, i: int) -> np.ndarray:
    """Unit surface normal at vertex ``i`` from its designated oriented triangle."""
    positions = np.asarray(positions, dtype=float)
    i2, i3 = topology.normal_neighbors[i]
    b = np.cross(positions[i2] - positions[i], positions[i3] - positions[i])
    norm = np.linalg.norm(b)
    scale = _degeneracy_scale(positions, topology)[i]
    if norm < 1e-12 * scale or norm == 0.0:
        raise DegenerateNormalError(
            f"designated triangle at vertex {i} is degenerate (|b|={norm:.3e})"
        )
    return b / norm


def vertex_normals(
    positions: np.ndarray, topology: MeshTopology, degenerate: str = "raise"
) -> np.ndarray:
    """Unit normals for all vertices, shape (N, 3).

    ``degenerate='raise'`` raises on any degenerate designated triangle;
    ``degenerate='zero'`` returns a zero normal there instead (the oriented
    precision then falls back to the identity).
    """
    positions = np.asarray(positions, dtype=float)
    b = _normal_cross(positions, topology)
    norm = np.linalg.norm(b, axis=1)
    bad = (norm < 1e-12 * _degeneracy_scale(positions, topology)) | (norm == 0.0)
    if np.any(bad):
        if degenerate == "raise":
            idx = int(np.flatnonzero(bad)[0])
            raise DegenerateNormalError(
                f"designated triangle at vertex {idx} is degenerate"
            )
        out = np.zeros_like(b)
        good = ~bad
        out[good] = b[good] / norm[good, None]
        return out
    return b / norm[:, None]


def _check_unit(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if n.shape != (3,):
        raise ValueError("normal must be a 3-vector")
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError(f"normal is not unit length: |n|={np.linalg.norm(n)!r}")
    return n


def aniso_covariance(n: np.ndarray, eta: float) -> np.ndarray:
    """Surface-oriented covariance (1/eta - 1) n n^T + I, spectrum {1/eta, 1, 1}."""
    n = _check_unit(n)
    if eta < 1.0:
        raise ValueError(f"eta must be >= 1, got {eta}")
    return (1.0 / eta - 1.0) * np.outer(n, n) + np.eye(3)


def aniso_precision(n: np.ndarray, eta: float) -> np.ndarray:
    """Inverse of :func:`aniso_covariance`: (eta - 1) n n^T + I."""
    n = _check_unit(n)
    if eta < 1.0:
        raise ValueError(f"eta must be >= 1, got {eta}")
    return (eta - 1.0) * np.outer(n, n) + np.eye(3)


def triangle_areas(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Areas of the given triangles at the given vertex positions."""
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def osada_point(
    a: np.ndarray, b: np.ndarray, c: np.ndarray, r1: np.ndarray, r2: np.ndarray
) -> np.ndarray:
    """Map unit-square samples (r1, r2) to uniform points in triangle (a, b, c).

    point = (1 - sqrt(r1)) a + sqrt(r1)(1 - r2) b + sqrt(r1) r2 c
    """
    s = np.sqrt(np.asarray(r1, dtype=float))
    r2 = np.asarray(r2, dtype=float)
    return (
        (1.0 - s)[..., None] * a
        + (s * (1.0 - r2))[..., None] * b
        + (s * r2)[..., None] * c
    )


def sample_surface_points(
    positions: np.ndarray,
    topology: MeshTopology,
    count: int,
    rng: np.random.Generator,
    vertex_labels: Optional[np.ndarray] = None,
) -> SparsePointSet:
    """Draw ``count`` points uniformly from the mesh surface.

    Triangles are selected with probability proportional to area, then a point
    is placed uniformly inside the triangle. Sampled points inherit the object
    label of their triangle when ``vertex_labels`` is given.
    """
    positions = np.asarray(positions, dtype=float)
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = triangle_areas(positions, topology.triangles)
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("all triangles are degenerate")
    tri_idx = rng.choice(len(areas), size=count, p=areas / total)
    r1 = rng.random(count)
    r2 = rng.random(count)
    tris = topology.triangles[tri_idx]
    pts = osada_point(positions[tris[:, 0]], positions[tris[:, 1]], positions[tris[:, 2]], r1, r2)
    labels = None
    if vertex_labels is not None:
        labels = np.asarray(vertex_labels, dtype=int)[tris[:, 0]]
    return SparsePointSet(points=pts, labels=labels)


def add_gaussian_noise(
    points: SparsePointSet, sigma: float, rng: np.random.Generator
) -> SparsePointSet:
    """Displace every point by an independent spherical Gaussian draw."""
    if sigma < 0:
        raise ValueError("noise standard deviation must be >= 0")
    noisy = points.points + sigma * rng.standard_normal(points.points.shape)
    labels = None if points.labels is None else points.labels.copy()
    return SparsePointSet(points=noisy, labels=labels)


def _plane_polylines(
    positions: np.ndarray, triangles: np.ndarray, axis: int, coord: float
) -> list[np.ndarray]:
    """Intersect the mesh with the plane ``x[axis] = coord``; return polylines."""
    v = positions[:, axis] - coord
    tv = v[triangles]  # (T, 3)
    # triangles whose vertices straddle the plane strictly
    crossing = (tv.min(axis=1) < 0.0) & (tv.max(axis=1) > 0.0)
    if np.any(np.abs(tv) == 0.0):
        return []  # caller jitters the plane away from vertices
    segments = []  # (edge_key_a, edge_key_b, point_a, point_b)
    for t in np.flatnonzero(crossing):
        tri = triangles[t]
        pts, keys = [], []
        for k in range(3):
            i, j = tri[k], tri[(k + 1) % 3]
            if v[i] * v[j] < 0.0:
                s = v[i] / (v[i] - v[j])
                pts.append(positions[i] + s * (positions[j] - positions[i]))
                keys.append((min(i, j), max(i, j)))
        if len(pts) == 2:
            segments.append((keys[0], keys[1], pts[0], pts[1]))
    if not segments:
        return []

    # stitch segments into polylines via shared crossing edges
    by_key: dict[tuple[int, int], list[int]] = {}
    for s, (ka, kb, _, _) in enumerate(segments):
        by_key.setdefault(ka, []).append(s)
        by_key.setdefault(kb, []).append(s)
    used = np.zeros(len(segments), dtype=bool)
    polylines = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        ka, kb, pa, pb = segments[start]
        chain = [pa, pb]
        key = kb
        while True:
            nxt = [s for s in by_key.get(key, []) if not used[s]]
            if not nxt:
                break
            s = nxt[0]
            used[s] = True
            sk_a, sk_b, sp_a, sp_b = segments[s]
            if sk_a == key:
                chain.append(sp_b)
                key = sk_b
            else:
                chain.append(sp_a)
                key = sk_a
            if key == ka:
                break
        # walk the other direction for open chains
        if key != ka:
            key = ka
            head = []
            while True:
                nxt = [s for s in by_key.get(key, []) if not used[s]]
                if not nxt:
                    break
                s = nxt[0]
                used[s] = True
                sk_a, sk_b, sp_a, sp_b = segments[s]
                if sk_a == key:
                    head.append(sp_b)
                    key = sk_b
                else:
                    head.append(sp_a)
                    key = sk_a
            chain = head[::-1] + chain
        polylines.append(np.asarray(chain))
    return polylines


def _polyline_length(poly: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(poly, axis=0), axis=1).sum())


def _resample_arc(
    poly: np.ndarray,
    closed: bool,
    arc_fraction: float,
    n_points: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pick a random contiguous arc of the polyline and resample it equidistantly."""
    if closed:
        poly = np.vstack([poly, poly[:1]])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    arc_len = arc_fraction * total
    if closed:
        start = rng.random() * total
    else:
        start = rng.random() * max(total - arc_len, 0.0)
    if n_points == 1:
        ts = np.array([start])
    else:
        ts = start + np.arange(n_points) * (arc_len / (n_points - 1))
    if closed:
        ts = np.mod(ts, total)
    out = np.empty((n_points, 3))
    for d in range(3):
        out[:, d] = np.interp(ts, cum, poly[:, d])
    return out


def slice_contour(
    positions: np.ndarray,
    topology: MeshTopology,
    axis: int,
    rng: np.random.Generator,
    arc_fraction: float,
    n_points: int,
    coordinate: Optional[float] = None,
    max_retries: int = 10,
) -> SparsePointSet:
    """Planar contour points from a random mesh slice orthogonal to ``axis``.

    The slicing plane sits at a uniformly random coordinate within the mesh
    extent (or at ``coordinate`` when given). The longest intersection
    polyline is kept, a random contiguous arc covering ``arc_fraction`` of its
    length is selected, and ``n_points`` equidistant points are returned.
    """
    positions = np.asarray(positions, dtype=float)
    if not 0.0 < arc_fraction <= 1.0:
        raise ValueError("arc_fraction must be in (0, 1]")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    lo = positions[:, axis].min()
    hi = positions[:, axis].max()
    extent = hi - lo
    for attempt in range(max_retries):
        if coordinate is not None:
            coord = coordinate
        else:
            coord = lo + rng.random() * extent
        # nudge away from vertex coordinates so every crossing is strict
        jitter = (attempt + 1) * 1e-9 * max(extent, 1.0)
        for c in (coord, coord + jitter, coord - jitter):
            polys = _plane_polylines(positions, topology.triangles, axis, c)
            if polys:
                best = max(polys, key=_polyline_length)
                if _polyline_length(best) > 0.0:
                    closed = bool(np.allclose(best[0], best[-1]))
                    if closed:
                        best = best[:-1]
                    pts = _resample_arc(best, closed, arc_fraction, n_points, rng)
                    pts[:, axis] = c  # exact coplanarity
                    return SparsePointSet(points=pts)
        if coordinate is not None:
            break
    raise EmptySliceError(
        f"plane orthogonal to axis {axis} missed the mesh after {max_retries} tries"
    )


def contour_inplane_noise(
    contour: SparsePointSet, sigma: float, rng: np.random.Generator
) -> SparsePointSet:
    """Rigidly translate a planar contour by one in-plane Gaussian draw."""
    if sigma < 0:
        raise ValueError("noise standard deviation must be >= 0")
    pts = contour.points
    centered = pts - pts.mean(axis=0)
    # basis of the contour plane from the two leading right singular vectors
    _, svals, vt = np.linalg.svd(centered, full_matrices=True)
    residual = svals[2] if len(svals) == 3 else 0.0
    if residual > 1e-6:
        raise ValueError(
            f"contour points are not coplanar (out-of-plane extent {residual:.3e})"
        )
    shift2d = sigma * rng.standard_normal(2)
    shift = shift2d @ vt[:2]
    labels = None if contour.labels is None else contour.labels.copy()
    return SparsePointSet(points=pts + shift, labels=labels)
