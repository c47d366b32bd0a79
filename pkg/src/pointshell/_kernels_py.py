"""Pure numpy twin of the compiled neighbor kernels.

Semantics contract shared with ``_kernels.pyx`` (checked bit-for-bit in the
test suite):

* squared distances are float64, accumulated channel by channel in order,
  so both backends perform the identical sequence of IEEE operations;
* neighbors are ordered by (squared distance, source index) ascending;
* farthest-point sampling marks chosen points with -1 in the running
  min-distance array and breaks argmax ties toward the lowest index.
"""

import numpy as np

BACKEND = "python"


def _sqdist_to(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared distances from every row of points (N, C) to query (C,)."""
    n = points.shape[0]
    d2 = np.zeros(n, dtype=np.float64)
    for c in range(points.shape[1]):
        diff = points[:, c] - query[c]
        d2 += diff * diff
    return d2


def knn_points(points: np.ndarray, queries: np.ndarray, k: int):
    """k nearest rows of points (N, C) for each query row (M, C).

    Returns (indices (M, k) int64, squared distances (M, k) float64).
    """
    m = queries.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    d2 = np.empty((m, k), dtype=np.float64)
    for i in range(m):
        row = _sqdist_to(points, queries[i])
        # stable sort == ties broken by ascending source index
        order = np.argsort(row, kind="stable")[:k]
        idx[i] = order
        d2[i] = row[order]
    return idx, d2


def farthest_points(points: np.ndarray, m: int, start: int) -> np.ndarray:
    """Greedy farthest-point sample of m indices from points (N, C).

    Starts at `start`; each next pick maximizes the minimum squared distance
    to the chosen set, ties going to the lowest index. Chosen entries are
    held at -1 so duplicates of chosen points are never re-picked.
    """
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    mind = np.full(points.shape[0], np.inf, dtype=np.float64)
    cur = start
    for t in range(1, m):
        mind = np.minimum(mind, _sqdist_to(points, points[cur]))
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
        out[t] = cur
    return out
