import numpy as np
import pytest
from scipy.spatial import ConvexHull

from ssmfit.geometry import MeshTopology
from ssmfit.model import ShapeModel, vec_positions


def hull_mesh(n, rng=None, jitter=0.02):
    """Roughly uniform sphere mesh with n vertices via convex hull."""
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    th = i * np.pi * (3.0 - np.sqrt(5.0))
    pts = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
    if rng is not None and jitter:
        pts += jitter * rng.standard_normal(pts.shape)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    hull = ConvexHull(pts)
    tris = hull.simplices.copy()
    centroid = pts[tris].mean(axis=1)
    nrm = np.cross(pts[tris[:, 1]] - pts[tris[:, 0]], pts[tris[:, 2]] - pts[tris[:, 0]])
    flip = (nrm * centroid).sum(axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return pts, tris


def random_model(n, m, rng, labels=None):
    """ShapeModel with a hull mesh and random orthonormal modes."""
    pts, tris = hull_mesh(n, rng)
    topo = MeshTopology(triangles=tris, num_vertices=n)
    q, _ = np.linalg.qr(rng.standard_normal((3 * n, m)))
    lam = np.sort(rng.random(m) + 0.05)[::-1]
    return ShapeModel(
        mean=vec_positions(pts),
        modes=q,
        eigenvalues=lam,
        topology=topo,
        vertex_labels=labels,
    )


def cube_mesh(side=1.0, origin=(0.0, 0.0, 0.0)):
    """Closed unit cube mesh: 8 vertices, 12 consistently oriented triangles."""
    o = np.asarray(origin, dtype=float)
    v = o + side * np.array(
        [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float
    )

    def quad(a, b, c, d):
        return [(a, b, c), (a, c, d)]

    tris = []
    tris += quad(0, 1, 3, 2)  # x = 0
    tris += quad(4, 6, 7, 5)  # x = 1
    tris += quad(0, 4, 5, 1)  # y = 0
    tris += quad(2, 3, 7, 6)  # y = 1
    tris += quad(0, 2, 6, 4)  # z = 0
    tris += quad(1, 5, 7, 3)  # z = 1
    return v, np.asarray(tris)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
