"""Point distribution model: PCA construction, deformation, Gaussian shape prior.

Shape vectors use the planar stacking convention ``[x_1..x_N, y_1..y_N,
z_1..z_N]``, i.e. the column-concatenation of the ``N x 3`` vertex matrix.
The three rows of vertex ``i`` in the mean and the mode matrix are therefore
rows ``(i, N+i, 2N+i)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateModelError
from .geometry import MeshTopology

__all__ = [
    "ShapeModel",
    "vec_positions",
    "unvec_positions",
    "build_pdm",
    "deform",
    "deform_vertex",
    "prior_log_density",
    "sample_alpha",
]


def vec_positions(positions: np.ndarray) -> np.ndarray:
    """Stack an (N, 3) vertex array into a 3N-vector (x-block, y-block, z-block)."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"expected (N, 3) positions, got {positions.shape}")
    return positions.ravel(order="F")


def unvec_positions(vector: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec_positions`."""
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1 or vector.size % 3:
        raise ValueError(f"expected a 3N-vector, got shape {vector.shape}")
    return vector.reshape(3, -1).T


@dataclass
class ShapeModel:
    """A PCA point distribution model over corresponded mesh vertices.

    Attributes
    ----------
    mean : (3N,) array
        Mean shape in stacked coordinates.
    modes : (3N, M) array
        Orthonormal deformation modes (columns).
    eigenvalues : (M,) array
        Strictly positive, non-increasing variances of the shape prior.
    topology : MeshTopology
        Oriented triangles plus the per-vertex normal-triangle designation.
    vertex_labels : (N,) int array, optional
        Object id per vertex for multi-object models.
    """

    mean: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    topology: MeshTopology
    vertex_labels: Optional[np.ndarray] = None
    units: str = "mm"
    _mean_vertices: np.ndarray = field(init=False, repr=False)
    _mode_blocks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.modes = np.asarray(self.modes, dtype=float)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if self.mean.ndim != 1 or self.mean.size % 3:
            raise ValueError(f"mean must be a 3N-vector, got {self.mean.shape}")
        n = self.mean.size // 3
        if self.modes.shape != (3 * n, self.num_modes):
            raise ValueError(
                f"modes must be (3N, M) = ({3 * n}, {self.num_modes}), got {self.modes.shape}"
            )
        if np.any(self.eigenvalues <= 0):
            raise ValueError("eigenvalues must be strictly positive")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be non-increasing")
        tris = self.topology.triangles
        if tris.size and tris.max() >= n:
            raise ValueError("triangle index out of range for this model")
        if self.vertex_labels is not None:
            self.vertex_labels = np.asarray(self.vertex_labels, dtype=int)
            if self.vertex_labels.shape != (n,):
                raise ValueError("vertex_labels must have one entry per vertex")
        # cached per-vertex views: (N, 3) mean and (N, 3, M) mode blocks
        self._mean_vertices = unvec_positions(self.mean)
        self._mode_blocks = np.ascontiguousarray(
            self.modes.reshape(3, n, self.num_modes).transpose(1, 0, 2)
        )

    @property
    def num_vertices(self) -> int:
        return self.mean.size // 3

    @property
    def num_modes(self) -> int:
        return self.modes.shape[1] if self.modes.ndim == 2 else 0

    @property
    def mean_vertices(self) -> np.ndarray:
        """Mean shape as an (N, 3) array."""
        return self._mean_vertices

    @property
    def mode_blocks(self) -> np.ndarray:
        """Per-vertex mode blocks, shape (N, 3, M); block i holds rows (i, N+i, 2N+i)."""
        return self._mode_blocks

    def bounding_box_diagonal(self) -> float:
        """Diagonal length of the mean shape's axis-aligned bounding box."""
        v = self._mean_vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def build_pdm(
    training_shapes: Sequence[np.ndarray],
    num_modes: int,
    topology: MeshTopology,
    vertex_labels: Optional[np.ndarray] = None,
) -> ShapeModel:
    """Build a PDM from K corresponded (N, 3) training shapes by PCA.

    The eigendecomposition goes through the K x K Gram matrix, so the full
    3N x 3N covariance is never formed. Eigenvalues below ``1e-12 *
    largest`` are dropped with a warning.
    """
    shapes = [np.asarray(s, dtype=float) for s in training_shapes]
    if len(shapes) < 2:
        raise ValueError("need at least two training shapes")
    n = shapes[0].shape[0]
    for k, s in enumerate(shapes):
        if s.shape != (n, 3):
            raise ValueError(
                f"training shape {k} has shape {s.shape}, expected ({n}, 3)"
            )
    K = len(shapes)
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    if num_modes > min(3 * n, K - 1):
        raise ValueError(
            f"num_modes={num_modes} exceeds min(3N, K-1)={min(3 * n, K - 1)}"
        )

    X = np.stack([vec_positions(s) for s in shapes], axis=1)  # (3N, K)
    mean = X.mean(axis=1)
    D = X - mean[:, None]
    gram = (D.T @ D) / (K - 1)  # (K, K)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    if evals[0] <= 0 or not np.isfinite(evals[0]):
        raise DegenerateModelError("training shapes carry no variance")
    keep = evals > 1e-12 * evals[0]
    if keep.sum() < num_modes:
        warnings.warn(
            f"only {int(keep.sum())} modes above rank tolerance; "
            f"dropping {num_modes - int(keep.sum())} requested ones",
            stacklevel=2,
        )
    m = min(num_modes, int(keep.sum()))
    if m == 0:
        raise DegenerateModelError("training shapes carry no variance")
    evals = evals[:m]
    # eigenvectors of the covariance: D v / sqrt((K-1) lambda)
    modes = D @ evecs[:, :m]
    modes /= np.sqrt((K - 1) * evals)[None, :]

    return ShapeModel(
        mean=mean,
        modes=modes,
        eigenvalues=evals,
        topology=topology,
        vertex_labels=vertex_labels,
    )


def deform(model: ShapeModel, alpha: np.ndarray) -> np.ndarray:
    """Deformed vertex positions (N, 3) for shape parameters ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (model.num_modes,):
        raise ValueError(
            f"alpha must have length {model.num_modes}, got {alpha.shape}"
        )
    return unvec_positions(model.mean + model.modes @ alpha)


def deform_vertex(model: ShapeModel, alpha: np.ndarray, i: int) -> np.ndarray:
    """Position of vertex ``i`` under ``alpha`` (per-vertex form of :func:`deform`)."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (model.num_modes,):
        raise ValueError(
            f"alpha must have length {model.num_modes}, got {alpha.shape}"
        )
    return model.mean_vertices[i] + model.mode_blocks[i] @ alpha


def prior_log_density(model: ShapeModel, alpha: np.ndarray) -> float:
    """Log density of the zero-mean Gaussian shape prior at ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    lam = model.eigenvalues
    if alpha.shape != lam.shape:
        raise ValueError(f"alpha must have length {lam.size}, got {alpha.shape}")
    return float(
        -0.5 * np.sum(np.log(2.0 * np.pi * lam)) - 0.5 * np.sum(alpha**2 / lam)
    )


def sample_alpha(model: ShapeModel, rng: np.random.Generator) -> np.ndarray:
    """Draw shape parameters from the prior (independent Gaussians, variance lambda_m)."""
    return rng.standard_normal(model.num_modes) * np.sqrt(model.eigenvalues)
