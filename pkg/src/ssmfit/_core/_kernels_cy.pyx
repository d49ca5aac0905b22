# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused C implementations of the hot pairwise kernels."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def aniso_sqdist(double[:, ::1] points, double[:, ::1] positions,
                 normals, double eta):
    """Pairwise oriented squared distances, shape (P, N)."""
    cdef Py_ssize_t P = points.shape[0]
    cdef Py_ssize_t N = positions.shape[0]
    out_arr = np.empty((P, N), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] nrm
    cdef Py_ssize_t j, i
    cdef double dx, dy, dz, d, proj, w
    if eta == 1.0 or normals is None:
        for j in range(P):
            for i in range(N):
                dx = points[j, 0] - positions[i, 0]
                dy = points[j, 1] - positions[i, 1]
                dz = points[j, 2] - positions[i, 2]
                out[j, i] = dx * dx + dy * dy + dz * dz
    else:
        nrm = normals
        w = eta - 1.0
        for j in range(P):
            for i in range(N):
                dx = points[j, 0] - positions[i, 0]
                dy = points[j, 1] - positions[i, 1]
                dz = points[j, 2] - positions[i, 2]
                proj = nrm[i, 0] * dx + nrm[i, 1] * dy + nrm[i, 2] * dz
                out[j, i] = dx * dx + dy * dy + dz * dz + w * proj * proj
    return out_arr


def weighted_aniso_sqsum(double[:, ::1] resp, double[:, ::1] points,
                         double[:, ::1] positions, normals, double eta):
    """sum_{j,i} resp[j, i] * d[j, i], fused."""
    cdef Py_ssize_t P = points.shape[0]
    cdef Py_ssize_t N = positions.shape[0]
    cdef double[:, ::1] nrm
    cdef Py_ssize_t j, i
    cdef double dx, dy, dz, proj, w, total = 0.0
    if eta == 1.0 or normals is None:
        for j in range(P):
            for i in range(N):
                dx = points[j, 0] - positions[i, 0]
                dy = points[j, 1] - positions[i, 1]
                dz = points[j, 2] - positions[i, 2]
                total += resp[j, i] * (dx * dx + dy * dy + dz * dz)
    else:
        nrm = normals
        w = eta - 1.0
        for j in range(P):
            for i in range(N):
                dx = points[j, 0] - positions[i, 0]
                dy = points[j, 1] - positions[i, 1]
                dz = points[j, 2] - positions[i, 2]
                proj = nrm[i, 0] * dx + nrm[i, 1] * dy + nrm[i, 2] * dz
                total += resp[j, i] * (dx * dx + dy * dy + dz * dz + w * proj * proj)
    return total
