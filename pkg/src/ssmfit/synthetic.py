"""Synthetic shape models for experiments: ellipsoids and the didactic rectangle.

The ellipsoid families are built like real models: a base mesh is deformed by
random smooth fields into a training set, and the PCA construction runs on
that. The rectangle is the classic shape-approximation fixture: a 2D contour
model embedded as a thin prism so the 3D normal machinery applies unchanged.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import MeshTopology, SparsePointSet
from .model import ShapeModel, build_pdm, vec_positions

__all__ = [
    "fibonacci_sphere_mesh",
    "ellipsoid_pdm",
    "multi_ellipsoid_pdm",
    "rectangle_pdm",
    "rectangle_contour_points",
    "rectangle_ring_polygon",
]


def fibonacci_sphere_mesh(n: int, rng: Optional[np.random.Generator] = None):
    """Unit-sphere mesh with exactly ``n`` vertices (golden-spiral points + hull).

    Returns (positions (n, 3), triangles (T, 3)) with outward orientation.
    """
    if n < 8:
        raise ValueError("need at least 8 vertices for a usable sphere mesh")
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if rng is not None:
        pts += 0.01 * rng.standard_normal(pts.shape)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    hull = ConvexHull(pts)
    tris = hull.simplices.copy()
    centroid = pts[tris].mean(axis=1)
    normals = np.cross(
        pts[tris[:, 1]] - pts[tris[:, 0]], pts[tris[:, 2]] - pts[tris[:, 0]]
    )
    flip = (normals * centroid).sum(axis=1) < 0.0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return pts, tris


def _smooth_field(points: np.ndarray, rng: np.random.Generator,
                  linear: float, quadratic: float) -> np.ndarray:
    """Random smooth displacement: affine part plus quadratic forms per axis."""
    A = linear * rng.standard_normal((3, 3))
    disp = points @ A.T
    for axis in range(3):
        B = quadratic * rng.standard_normal((3, 3))
        B = 0.5 * (B + B.T)
        disp[:, axis] += np.einsum("pa,ab,pb->p", points, B, points)
    return disp


def ellipsoid_pdm(
    n_vertices: int,
    num_modes: int,
    seed: int = 0,
    axes=(1.0, 0.85, 0.7),
    deformation_scale: float = 0.06,
) -> ShapeModel:
    """Single-object ellipsoid PDM learned from randomly deformed instances."""
    rng = np.random.default_rng(seed)
    sphere, tris = fibonacci_sphere_mesh(n_vertices, rng)
    base = sphere * np.asarray(axes)
    K = max(num_modes + 4, 2 * num_modes)
    shapes = [
        base + _smooth_field(base, rng, deformation_scale, 0.7 * deformation_scale)
        for _ in range(K)
    ]
    topo = MeshTopology(triangles=tris, num_vertices=n_vertices)
    return build_pdm(shapes, num_modes, topo)


def multi_ellipsoid_pdm(
    n_vertices: int,
    num_modes: int,
    seed: int = 0,
    n_objects: int = 2,
    deformation_scale: float = 0.06,
) -> ShapeModel:
    """Multi-object PDM: side-by-side ellipsoids with per-vertex object labels."""
    if n_objects < 2:
        raise ValueError("multi-object model needs at least 2 objects")
    rng = np.random.default_rng(seed)
    per = n_vertices // n_objects
    parts, tri_parts, labels = [], [], []
    offset = 0
    for obj in range(n_objects):
        count = per if obj < n_objects - 1 else n_vertices - per * (n_objects - 1)
        sphere, tris = fibonacci_sphere_mesh(count, rng)
        centre = np.array([2.2 * obj, 0.0, 0.0])
        parts.append(sphere * np.array([1.0, 0.8, 0.7]) + centre)
        tri_parts.append(tris + offset)
        labels.append(np.full(count, obj))
        offset += count
    base = np.vstack(parts)
    tris = np.vstack(tri_parts)
    labels = np.concatenate(labels)
    K = max(num_modes + 4, 2 * num_modes)
    shapes = []
    for _ in range(K):
        # shared global scaling correlates the objects; local fields vary them
        scale = 1.0 + deformation_scale * rng.standard_normal()
        shape = base * scale
        start = 0
        for part in parts:
            stop = start + len(part)
            local = shape[start:stop] - shape[start:stop].mean(axis=0)
            shape[start:stop] += _smooth_field(
                local, rng, deformation_scale, 0.7 * deformation_scale
            )
            start = stop
        shapes.append(shape)
    topo = MeshTopology(triangles=tris, num_vertices=n_vertices)
    return build_pdm(shapes, num_modes, topo, vertex_labels=labels)


def _rectangle_ring(width: float, height: float, ring_count: int) -> np.ndarray:
    """CCW ring of ``ring_count`` points on the rectangle boundary (corners included)."""
    if ring_count % 4:
        raise ValueError("ring_count must be a multiple of 4")
    per_edge = ring_count // 4
    w, h = 0.5 * width, 0.5 * height
    corners = np.array([[-w, -h], [w, -h], [w, h], [-w, h]])
    pts = []
    for c in range(4):
        a, b = corners[c], corners[(c + 1) % 4]
        for k in range(per_edge):
            t = k / per_edge
            pts.append((1 - t) * a + t * b)
    return np.asarray(pts)


def rectangle_pdm(
    ring_count: int = 12,
    width: float = 1.6,
    height: float = 1.2,
    prism_height: float = 0.3,
    mode_sigmas=(0.8, 0.6),
) -> ShapeModel:
    """Didactic rectangle-contour PDM embedded as a thin prism.

    Two rings of ``ring_count`` vertices (at z = -/+ prism_height/2) carry the
    rectangle contour; the two modes scale the contour along x and y, moving
    both rings in lockstep, so the prism-wall normal formula reproduces the 2D
    contour normals. ``mode_sigmas`` are the prior standard deviations of the
    two scale modes.
    """
    ring = _rectangle_ring(width, height, ring_count)
    R = ring_count
    z = np.array([-0.5 * prism_height, 0.5 * prism_height])
    verts = np.vstack(
        [np.column_stack([ring, np.full(R, z[0])]),
         np.column_stack([ring, np.full(R, z[1])])]
    )
    tris = []
    for i in range(R):
        j = (i + 1) % R
        bi, bj, ti, tj = i, j, i + R, j + R
        tris.append((bi, bj, ti))
        tris.append((bj, tj, ti))
    tris = np.asarray(tris)

    n = 2 * R
    modes = np.zeros((3 * n, 2))
    # planar stacking: rows [0, n) are x, [n, 2n) are y, [2n, 3n) are z
    modes[:n, 0] = verts[:, 0]
    modes[n : 2 * n, 1] = verts[:, 1]
    modes[:, 0] /= np.linalg.norm(modes[:, 0])
    modes[:, 1] /= np.linalg.norm(modes[:, 1])
    sig = np.asarray(mode_sigmas, dtype=float)
    eigenvalues = sig**2

    topo = MeshTopology(triangles=tris, num_vertices=n)
    return ShapeModel(
        mean=vec_positions(verts),
        modes=modes,
        eigenvalues=eigenvalues,
        topology=topo,
    )


def rectangle_ring_polygon(model: ShapeModel, alpha: np.ndarray) -> np.ndarray:
    """In-plane (x, y) polygon of the deformed contour, one row per ring vertex."""
    from .model import deform

    verts = deform(model, alpha)
    R = model.num_vertices // 2
    return 0.5 * (verts[:R, :2] + verts[R:, :2])


def rectangle_contour_points(
    model: ShapeModel,
    rng: np.random.Generator,
    alpha: Optional[np.ndarray] = None,
    target_scale: float = 0.15,
):
    """Target points for the shape-approximation experiment.

    Unless ``alpha`` is given, the target deformation takes a fixed moderate
    magnitude (``target_scale`` prior standard deviations per mode, random
    signs), so the initialisation error stays at a controlled level. One point
    is placed between each pair of adjacent contour vertices of the target, in
    the prism's mid plane. Returns (points, target alpha).
    """
    if alpha is None:
        alpha = (
            target_scale
            * np.sqrt(model.eigenvalues)
            * rng.choice([-1.0, 1.0], size=model.num_modes)
        )
    poly = rectangle_ring_polygon(model, alpha)
    R = len(poly)
    u = rng.uniform(0.2, 0.8, size=R)
    nxt = np.roll(np.arange(R), -1)
    xy = (1.0 - u)[:, None] * poly + u[:, None] * poly[nxt]
    pts = np.column_stack([xy, np.zeros(R)])
    return SparsePointSet(points=pts), alpha
