# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled neighbor kernels: exhaustive KNN and farthest-point sampling.

Must stay bit-identical to ``_kernels_py`` (see that module's docstring for
the shared contract); keep the float64 accumulation order and the
(squared distance, index) total order in sync when touching either file.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def knn_points(double[:, ::1] points, double[:, ::1] queries, Py_ssize_t k):
    """k nearest rows of points (N, C) per query row (M, C) -> (idx, d2)."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t c = points.shape[1]
    cdef Py_ssize_t m = queries.shape[0]
    idx_arr = np.empty((m, k), dtype=np.int64)
    d2_arr = np.empty((m, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] d2 = d2_arr
    buf_d_arr = np.empty(k, dtype=np.float64)
    buf_i_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = buf_d_arr
    cdef long long[::1] bi = buf_i_arr
    cdef Py_ssize_t i, j, ch, pos, filled
    cdef double acc, dx

    for i in range(m):
        filled = 0
        for j in range(n):
            acc = 0.0
            for ch in range(c):
                dx = points[j, ch] - queries[i, ch]
                acc += dx * dx
            if filled < k:
                pos = filled
                filled += 1
            elif acc < bd[k - 1]:
                pos = k - 1
            else:
                # ties keep the earlier (lower) index already in the buffer
                continue
            while pos > 0 and bd[pos - 1] > acc:
                bd[pos] = bd[pos - 1]
                bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = acc
            bi[pos] = j
        for j in range(k):
            idx[i, j] = bi[j]
            d2[i, j] = bd[j]
    return idx_arr, d2_arr


def farthest_points(double[:, ::1] points, Py_ssize_t m, Py_ssize_t start):
    """Greedy farthest-point sample; see the pure twin for the contract."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t c = points.shape[1]
    out_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] out = out_arr
    mind_arr = np.full(n, np.inf, dtype=np.float64)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t t, j, ch, cur, best
    cdef double acc, dx, bestd

    out[0] = start
    cur = start
    for t in range(1, m):
        for j in range(n):
            acc = 0.0
            for ch in range(c):
                dx = points[j, ch] - points[cur, ch]
                acc += dx * dx
            if acc < mind[j]:
                mind[j] = acc
        mind[cur] = -1.0
        best = 0
        bestd = mind[0]
        for j in range(1, n):
            if mind[j] > bestd:
                bestd = mind[j]
                best = j
        out[t] = best
        cur = best
    return out_arr
