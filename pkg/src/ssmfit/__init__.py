"""Shape-model surface reconstruction from sparse 3D point clouds."""

from ._core import BACKEND
from .baselines import IcpConfig, icp_fit, nearest_neighbours
from .errors import (
    DegenerateModelError,
    DegenerateNormalError,
    EmptySliceError,
    FormatError,
    LabelMismatchError,
    MeshNotClosedError,
    NumericalError,
    SsmFitError,
)
from .fitting import (
    FitConfig,
    FitResult,
    FitState,
    e_step,
    fit,
    init_sigma2,
    q_gradient,
    q_value,
    sigma2_update,
)
from .geometry import (
    MeshTopology,
    SparsePointSet,
    add_gaussian_noise,
    aniso_covariance,
    aniso_precision,
    contour_inplane_noise,
    sample_surface_points,
    slice_contour,
    vertex_normal,
    vertex_normals,
)
from .model import (
    ShapeModel,
    build_pdm,
    deform,
    deform_vertex,
    prior_log_density,
    sample_alpha,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DegenerateModelError",
    "DegenerateNormalError",
    "EmptySliceError",
    "FitConfig",
    "FitResult",
    "FitState",
    "FormatError",
    "IcpConfig",
    "LabelMismatchError",
    "MeshNotClosedError",
    "MeshTopology",
    "NumericalError",
    "ShapeModel",
    "SparsePointSet",
    "SsmFitError",
    "add_gaussian_noise",
    "aniso_covariance",
    "aniso_precision",
    "build_pdm",
    "contour_inplane_noise",
    "deform",
    "deform_vertex",
    "e_step",
    "fit",
    "icp_fit",
    "init_sigma2",
    "nearest_neighbours",
    "prior_log_density",
    "q_gradient",
    "q_value",
    "sample_alpha",
    "sample_surface_points",
    "sigma2_update",
    "slice_contour",
    "vertex_normal",
    "vertex_normals",
]
