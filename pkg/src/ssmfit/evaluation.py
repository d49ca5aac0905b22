"""Volumetric and surface accuracy metrics, plus the convergence benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .baselines import IcpConfig, icp_fit
from .errors import MeshNotClosedError, SsmFitError
from .fitting import FitConfig, fit
from .geometry import MeshTopology, sample_surface_points, triangle_areas
from .model import ShapeModel, deform, sample_alpha

__all__ = [
    "VoxelGrid",
    "BenchmarkRecord",
    "voxelize",
    "dice",
    "surface_distance",
    "vertex_rmse",
    "point_to_polyline_distance",
    "benchmark_convergence",
]


@dataclass
class VoxelGrid:
    """Isotropic occupancy grid (origin at the low corner of voxel (0,0,0))."""

    origin: np.ndarray
    spacing: float
    dims: Tuple[int, int, int]
    occupancy: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        if self.occupancy.shape != self.dims:
            raise ValueError("occupancy shape does not match dims")

    @property
    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.spacing**3

    def compatible(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and abs(self.spacing - other.spacing) < 1e-12 * self.spacing
            and np.allclose(self.origin, other.origin, atol=1e-9 * self.spacing)
        )


# deterministic ray-lattice offsets (units of spacing) tried on grazing hits
_JITTERS = ((0.0, 0.0), (0.23, 0.37), (-0.31, 0.17), (0.11, -0.41))


def _check_closed_topology(triangles: np.ndarray, n: int) -> None:
    """Closed, consistently oriented meshes pair every directed edge with its reverse."""
    e = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    fwd = e[:, 0].astype(np.int64) * n + e[:, 1]
    rev = e[:, 1].astype(np.int64) * n + e[:, 0]
    if len(np.unique(fwd)) != len(fwd) or not np.array_equal(np.sort(fwd), np.sort(rev)):
        raise MeshNotClosedError(
            "mesh is not closed and consistently oriented (unpaired edges)"
        )


def _crossings(positions, triangles, origin, spacing, ny, nz, dy, dz):
    """All (ray id, crossing x) pairs for +x rays through the (y, z) lattice."""
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    y0c = origin[1] + 0.5 * spacing + dy
    z0c = origin[2] + 0.5 * spacing + dz

    ymin = np.minimum(np.minimum(a[:, 1], b[:, 1]), c[:, 1])
    ymax = np.maximum(np.maximum(a[:, 1], b[:, 1]), c[:, 1])
    zmin = np.minimum(np.minimum(a[:, 2], b[:, 2]), c[:, 2])
    zmax = np.maximum(np.maximum(a[:, 2], b[:, 2]), c[:, 2])
    iy_lo = np.maximum(np.ceil((ymin - y0c) / spacing).astype(int), 0)
    iy_hi = np.minimum(np.floor((ymax - y0c) / spacing).astype(int), ny - 1)
    iz_lo = np.maximum(np.ceil((zmin - z0c) / spacing).astype(int), 0)
    iz_hi = np.minimum(np.floor((zmax - z0c) / spacing).astype(int), nz - 1)
    ny_k = np.maximum(iy_hi - iy_lo + 1, 0)
    nz_k = np.maximum(iz_hi - iz_lo + 1, 0)
    counts = ny_k * nz_k
    live = counts > 0
    if not np.any(live):
        return np.empty(0, dtype=int), np.empty(0), False

    tri_idx = np.repeat(np.flatnonzero(live), counts[live])
    starts = np.concatenate([[0], np.cumsum(counts[live])[:-1]])
    off = np.arange(counts[live].sum()) - np.repeat(starts, counts[live])
    nzk = nz_k[tri_idx]
    iy = iy_lo[tri_idx] + off // nzk
    iz = iz_lo[tri_idx] + off % nzk
    py = y0c + iy * spacing
    pz = z0c + iz * spacing

    ta, tb, tc = a[tri_idx], b[tri_idx], c[tri_idx]
    e0y, e0z = tb[:, 1] - ta[:, 1], tb[:, 2] - ta[:, 2]
    e1y, e1z = tc[:, 1] - ta[:, 1], tc[:, 2] - ta[:, 2]
    det = e0y * e1z - e0z * e1y
    ok = np.abs(det) > 1e-300  # silhouette-degenerate projections carry no area
    wy = py - ta[:, 1]
    wz = pz - ta[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (wy * e1z - wz * e1y) / det
        v = (e0y * wz - e0z * wy) / det
    inside = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    # edge-grazing hits pair up as zero-width intervals; flag for a jitter retry
    eps = 1e-9
    grazing = bool(
        np.any(
            ok
            & (u >= -eps)
            & (v >= -eps)
            & (u + v <= 1.0 + eps)
            & ((np.abs(u) <= eps) | (np.abs(v) <= eps) | (np.abs(u + v - 1.0) <= eps))
        )
    )
    u, v = u[inside], v[inside]
    tri_in = tri_idx[inside]
    x = (
        a[tri_in, 0]
        + u * (b[tri_in, 0] - a[tri_in, 0])
        + v * (c[tri_in, 0] - a[tri_in, 0])
    )
    ray = iy[inside] * nz + iz[inside]
    return ray, x, grazing


def voxelize(
    positions: np.ndarray,
    topology: MeshTopology,
    spacing: float,
    bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> VoxelGrid:
    """Occupancy grid of the mesh interior by +x ray parity.

    Grid bounds are the mesh bounding box padded by two voxels (or the given
    ``bounds``). Rays whose crossing count stays odd after the deterministic
    jitter ladder indicate a non-watertight mesh.
    """
    positions = np.asarray(positions, dtype=float)
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    lo, hi = (
        (positions.min(axis=0), positions.max(axis=0)) if bounds is None else bounds
    )
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    origin = lo - 2.0 * spacing
    dims = tuple(int(np.ceil((hi - lo) / spacing)) + 4 for hi, lo in zip(hi, lo))
    nx, ny, nz = dims

    tris = topology.triangles
    _check_closed_topology(tris, topology.num_vertices)
    parity_ok = False
    for dy, dz in _JITTERS:
        ray, x, grazing = _crossings(
            positions, tris, origin, spacing, ny, nz, dy * spacing, dz * spacing
        )
        per_ray = np.bincount(ray, minlength=ny * nz)
        parity_ok = bool(np.all(per_ray % 2 == 0))
        if parity_ok and not grazing:
            break
    if not parity_ok:
        raise MeshNotClosedError(
            "odd ray-crossing parity persists after jitter; mesh is not closed"
        )

    occupancy = np.zeros(dims, dtype=bool)
    if ray.size:
        order = np.lexsort((x, ray))
        ray_s, x_s = ray[order], x[order]
        ray_start = np.concatenate([[0], np.cumsum(np.bincount(ray_s))])[:-1]
        within = np.arange(ray_s.size) - ray_start[ray_s]
        entry = within % 2 == 0
        x_in, x_out = x_s[entry], x_s[~entry]
        ray_pairs = ray_s[entry]
        x0c = origin[0] + 0.5 * spacing
        ix_lo = np.clip(np.floor((x_in - x0c) / spacing).astype(int) + 1, 0, nx)
        ix_hi = np.clip(np.floor((x_out - x0c) / spacing).astype(int) + 1, 0, nx)
        delta = np.zeros((nx + 1, ny * nz), dtype=np.int32)
        np.add.at(delta, (ix_lo, ray_pairs), 1)
        np.add.at(delta, (ix_hi, ray_pairs), -1)
        occupancy = (
            np.cumsum(delta[:-1], axis=0).astype(bool).reshape(nx, ny, nz)
        )
    return VoxelGrid(origin=origin, spacing=spacing, dims=dims, occupancy=occupancy)


def dice(grid_a: VoxelGrid, grid_b: VoxelGrid) -> float:
    """Dice overlap 2|A & B| / (|A| + |B|); 1.0 when both grids are empty."""
    if not grid_a.compatible(grid_b):
        raise ValueError("grids must share origin, spacing, and dims")
    na = int(grid_a.occupancy.sum())
    nb = int(grid_b.occupancy.sum())
    if na + nb == 0:
        return 1.0
    inter = int((grid_a.occupancy & grid_b.occupancy).sum())
    return 2.0 * inter / (na + nb)


def _point_mesh_distance(
    points: np.ndarray, positions: np.ndarray, triangles: np.ndarray
) -> np.ndarray:
    """Exact distance from each point to the closest point on the mesh."""
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    e0 = b - a
    e1 = c - a
    d00 = (e0 * e0).sum(1)
    d01 = (e0 * e1).sum(1)
    d11 = (e1 * e1).sum(1)
    denom = d00 * d11 - d01**2
    denom = np.where(denom <= 0, np.inf, denom)

    out = np.empty(len(points))
    chunk = max(1, int(2_000_000 // max(len(triangles), 1)))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        w = p[:, None, :] - a[None, :, :]  # (s, T, 3)
        d20 = (w * e0).sum(2)
        d21 = (w * e1).sum(2)
        u = (d11 * d20 - d01 * d21) / denom
        v = (d00 * d21 - d01 * d20) / denom
        inside = (u >= 0) & (v >= 0) & (u + v <= 1)
        proj = a + u[..., None] * e0 + v[..., None] * e1
        d_face = np.where(inside, np.linalg.norm(p[:, None, :] - proj, axis=2), np.inf)

        def seg_dist(sa, sab):
            t = ((p[:, None, :] - sa) * sab).sum(2) / (sab * sab).sum(1)
            t = np.clip(t, 0.0, 1.0)
            q = sa + t[..., None] * sab
            return np.linalg.norm(p[:, None, :] - q, axis=2)

        d_ab = seg_dist(a, e0)
        d_ac = seg_dist(a, e1)
        d_bc = seg_dist(b, c - b)
        d_all = np.minimum(np.minimum(d_face, d_ab), np.minimum(d_ac, d_bc))
        out[s : s + chunk] = d_all.min(axis=1)
    return out


def surface_distance(
    positions_a: np.ndarray,
    topology_a: MeshTopology,
    positions_b: np.ndarray,
    topology_b: MeshTopology,
    n_samples: int = 2000,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """Symmetric sampled surface distance (mean, maximum).

    Samples ``n_samples`` area-weighted points per surface and measures exact
    point-to-triangle distances to the other mesh; both directions are pooled.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    sa = sample_surface_points(positions_a, topology_a, n_samples, rng).points
    sb = sample_surface_points(positions_b, topology_b, n_samples, rng).points
    d_ab = _point_mesh_distance(sa, positions_b, topology_b.triangles)
    d_ba = _point_mesh_distance(sb, positions_a, topology_a.triangles)
    pooled = np.concatenate([d_ab, d_ba])
    return float(pooled.mean()), float(pooled.max())


def vertex_rmse(positions_a: np.ndarray, positions_b: np.ndarray) -> float:
    """Root mean squared per-vertex distance between corresponded shapes."""
    a = np.asarray(positions_a, dtype=float)
    b = np.asarray(positions_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=1).mean()))


def point_to_polyline_distance(
    points: np.ndarray, polyline: np.ndarray, closed: bool = True
) -> np.ndarray:
    """Distance from each point to a polyline (closed by default)."""
    pts = np.asarray(points, dtype=float)
    poly = np.asarray(polyline, dtype=float)
    a = poly
    b = np.roll(poly, -1, axis=0) if closed else poly[1:]
    if not closed:
        a = poly[:-1]
    ab = b - a
    denom = (ab**2).sum(1)
    denom = np.where(denom == 0, 1.0, denom)
    w = pts[:, None, :] - a[None, :, :]
    t = np.clip((w * ab).sum(2) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)


@dataclass
class BenchmarkRecord:
    """One (method, run, iteration) sample of the convergence benchmark."""

    method: str
    run: int
    iteration: int
    elapsed_s: float
    q: float
    q_normalized: float


@dataclass
class SurfacePointSampler:
    """Picklable area-weighted sampler for benchmark worker pools."""

    count: int

    def __call__(self, positions, topology, rng):
        return sample_surface_points(positions, topology, self.count, rng)


def _benchmark_single_run(model, points_sampler, methods, seed, run, time_budget):
    """One benchmark run; returns (records, note-or-None)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, run]))
    alpha_star = sample_alpha(model, rng)
    target = deform(model, alpha_star)
    pts = points_sampler(target, model.topology, rng)

    traces = {}
    for name, config in methods:
        try:
            if isinstance(config, IcpConfig):
                res = icp_fit(model, pts, config)
                qs = [-r for r in res.residual_trace]
            else:
                res = fit(model, pts, config, time_budget=time_budget)
                qs = list(res.q_trace)
            traces[name] = (list(res.trace_elapsed), qs)
        except SsmFitError as exc:
            return [], f"run {run}: method {name} failed: {exc}"

    all_q = np.concatenate([qs for _, qs in traces.values()])
    qmin, qmax = float(all_q.min()), float(all_q.max())
    span = qmax - qmin
    records = []
    for name, (ts, qs) in traces.items():
        prev = 0.0
        for k, (t, q) in enumerate(zip(ts, qs)):
            t = max(t, prev + 1e-9)  # keep times strictly increasing
            prev = t
            qn = (q - qmin) / span if span > 0 else 1.0
            records.append(
                BenchmarkRecord(
                    method=name, run=run, iteration=k, elapsed_s=t, q=q, q_normalized=qn
                )
            )
    return records, None


def benchmark_convergence(
    model: ShapeModel,
    points_sampler: Callable[[np.ndarray, MeshTopology, np.random.Generator], object],
    methods: Sequence[Tuple[str, Union[FitConfig, IcpConfig]]],
    runs: int,
    time_budget: Optional[float] = None,
    seed: int = 0,
    threads: int = 1,
) -> Tuple[list, list]:
    """Per-iteration objective-vs-time traces over random synthetic fits.

    Each run draws a shape instance from the prior, samples points from its
    surface, and executes every method on the same points. Objective values
    are normalised jointly across all methods within the run (min -> 0,
    max -> 1). Runs own independent rng streams derived from (seed, run), so
    results do not depend on the worker count. Returns (records, notes);
    failed methods are noted and their run is excluded.
    """
    if len(methods) < 1:
        raise ValueError("need at least one method")
    records: list = []
    notes: list = []
    if threads > 1 and runs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _benchmark_single_run,
                    model,
                    points_sampler,
                    methods,
                    seed,
                    run,
                    time_budget,
                )
                for run in range(runs)
            ]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [
            _benchmark_single_run(model, points_sampler, methods, seed, run, time_budget)
            for run in range(runs)
        ]
    for recs, note in outcomes:
        records.extend(recs)
        if note is not None:
            notes.append(note)
    return records, notes
