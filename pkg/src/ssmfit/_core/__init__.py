"""Backend selection for the hot pairwise kernels.

The compiled Cython extension is used when importable; otherwise the numpy
implementations take over. ``SSMFIT_BACKEND=numpy`` or ``=cython`` forces a
specific backend (the latter raises if the extension was not built).
"""

import os as _os

from . import kernels_py as _numpy_impl

_requested = _os.environ.get("SSMFIT_BACKEND", "auto").lower()

if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"SSMFIT_BACKEND must be auto, cython or numpy, got {_requested!r}")

if _requested in ("auto", "cython"):
    try:
        from . import _kernels_cy as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _numpy_impl
        BACKEND = "numpy"
else:
    _impl = _numpy_impl
    BACKEND = "numpy"


def _as_c_contiguous(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.float64)


if BACKEND == "cython":

    def aniso_sqdist(points, positions, normals, eta):
        return _impl.aniso_sqdist(
            _as_c_contiguous(points),
            _as_c_contiguous(positions),
            None if normals is None else _as_c_contiguous(normals),
            float(eta),
        )

    def weighted_aniso_sqsum(resp, points, positions, normals, eta):
        return _impl.weighted_aniso_sqsum(
            _as_c_contiguous(resp),
            _as_c_contiguous(points),
            _as_c_contiguous(positions),
            None if normals is None else _as_c_contiguous(normals),
            float(eta),
        )

else:
    aniso_sqdist = _impl.aniso_sqdist
    weighted_aniso_sqsum = _impl.weighted_aniso_sqsum

__all__ = ["BACKEND", "aniso_sqdist", "weighted_aniso_sqsum"]
