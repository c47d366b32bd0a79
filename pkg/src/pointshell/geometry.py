"""Geometry kernels: neighbor queries, representative sampling, shell partitioning.

The exhaustive-scan inner loops live in a compiled extension
(``pointshell._kernels``, Cython) with a bit-identical numpy twin
(``_kernels_py``); the compiled one is picked at import unless
``POINTSHELL_PURE_PYTHON=1`` is set. Everything here is a pure function of
its inputs and safe to call concurrently.

All distance math runs in float64 regardless of the stored coordinate dtype.
Neighbors are ordered by squared distance with ties broken by ascending
source index; the reported distances are square roots of the selected
squared distances.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SizeError
from . import _kernels_py

if os.environ.get("POINTSHELL_PURE_PYTHON") == "1":
    _kernels = _kernels_py
else:
    try:
        from . import _kernels  # type: ignore[no-redef]
    except ImportError:
        _kernels = _kernels_py

BACKEND: str = _kernels.BACKEND


@dataclass
class PointCloud:
    """A set of 3D points with optional per-point features and labels.

    Storage order carries no meaning. Coordinates and features are kept as
    float32 (the on-disk format); `labels` is either a per-cloud class id
    (int) or a per-point int32 array of segment ids.
    """

    points: np.ndarray
    features: np.ndarray | None = None
    labels: int | np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise SizeError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise SizeError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=np.float32)
            if self.features.ndim != 2 or len(self.features) != len(self.points):
                raise SizeError(
                    f"features must be (N, C) with N={len(self.points)}, "
                    f"got {self.features.shape}"
                )
        if isinstance(self.labels, np.ndarray):
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (len(self.points),):
                raise SizeError("per-point labels must have shape (N,)")
        elif self.labels is not None:
            self.labels = int(self.labels)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborSet:
    """k neighbors of one representative point, nearest first."""

    center_index: int
    neighbor_indices: np.ndarray  # (K,) int64
    distances: np.ndarray  # (K,) float64, nondecreasing


@dataclass
class ShellPartition:
    """Neighbor indices grouped into ordered concentric shells (inner first)."""

    shells: list[np.ndarray] = field(default_factory=list)
    radii: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _as_f64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64)


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int):
    """k nearest rows of `points` (N, C) for each query coordinate (M, C).

    Returns (indices (M, k) int64, distances (M, k) float64). The backbone
    of every layer's neighborhood construction; queries need not be members
    of `points`.
    """
    points = _as_f64(points)
    queries = _as_f64(queries)
    if k > points.shape[0]:
        raise SizeError(f"k={k} exceeds point count {points.shape[0]}")
    if k < 1:
        raise SizeError("k must be at least 1")
    idx, d2 = _kernels.knn_points(points, queries, k)
    return idx, np.sqrt(d2)


def knn_query(
    cloud: PointCloud, center_index: int, k: int, space: str = "coordinates"
) -> NeighborSet:
    """k nearest points to cloud[center_index], self-inclusive.

    `space` picks the metric space: "coordinates" (xyz) or "features"
    (requires cloud.features).
    """
    if space == "coordinates":
        data = cloud.points
    elif space == "features":
        if cloud.features is None:
            raise ConfigError("feature-space query on a cloud without features")
        data = cloud.features
    else:
        raise ConfigError(f"unknown query space {space!r}")
    center_index = int(center_index)
    if not 0 <= center_index < len(cloud):
        raise SizeError(f"center index {center_index} out of range")
    idx, dist = knn_batch(data, data[center_index : center_index + 1], k)
    return NeighborSet(center_index, idx[0], dist[0])


def sample_indices(
    points: np.ndarray, m: int, strategy: str, rng: np.random.Generator
) -> np.ndarray:
    """Representative sampling on a raw (N, C) coordinate array."""
    n = points.shape[0]
    if not 1 <= m <= n:
        raise SizeError(f"cannot sample {m} representatives from {n} points")
    if strategy == "random":
        return np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64)
    if strategy == "farthest":
        start = int(rng.integers(n))
        return _kernels.farthest_points(_as_f64(points), m, start)
    raise ConfigError(f"unknown sampling strategy {strategy!r}")


def sample_representatives(
    cloud: PointCloud,
    m: int,
    strategy: str = "random",
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Pick m representative point indices.

    "random" draws m distinct indices from the seeded generator; "farthest"
    runs greedy farthest-point sampling from a seeded-random first pick
    (ties toward the lowest index). `seed` may be an int or a Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_indices(cloud.points, m, strategy, rng)


def partition_shells_fixed(
    neighbors: NeighborSet, shell_size: int, num_shells: int
) -> ShellPartition:
    """Chunk distance-sorted neighbors into consecutive blocks of shell_size.

    radii[i] is the distance of the last point in block i.
    """
    k = len(neighbors.neighbor_indices)
    if shell_size * num_shells != k:
        raise SizeError(
            f"{k} neighbors cannot fill {num_shells} shells of {shell_size}"
        )
    shells = [
        neighbors.neighbor_indices[i * shell_size : (i + 1) * shell_size]
        for i in range(num_shells)
    ]
    radii = neighbors.distances[shell_size - 1 :: shell_size].copy()
    return ShellPartition(shells, radii)


def equidistant_shell_ids(distances: np.ndarray, num_shells: int) -> np.ndarray:
    """Shell index (0-based) per distance: boundaries at i * d_max / num_shells.

    Distance 0 maps to the innermost shell. Works on any array shape; the
    maximum is taken over the last axis.
    """
    d = np.asarray(distances, dtype=np.float64)
    dmax = d.max(axis=-1, keepdims=True)
    width = dmax / num_shells
    with np.errstate(invalid="ignore", divide="ignore"):
        ids = np.ceil(np.divide(d, width, out=np.zeros_like(d), where=width > 0))
    return (np.clip(ids, 1, num_shells) - 1).astype(np.int64)


def equidistant_bounds(distances: np.ndarray, num_shells: int) -> np.ndarray:
    """Segment bounds (..., num_shells + 1) for distance rows sorted ascending.

    Row r's shell s covers sorted positions bounds[r, s]:bounds[r, s + 1];
    empty shells are allowed.
    """
    d = np.asarray(distances, dtype=np.float64)
    ids = equidistant_shell_ids(d, num_shells)
    counts = (ids[..., None, :] == np.arange(num_shells)[:, None]).sum(axis=-1)
    bounds = np.zeros(d.shape[:-1] + (num_shells + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=bounds[..., 1:])
    return bounds


def partition_shells_equidistant(
    neighbors: NeighborSet, num_shells: int
) -> ShellPartition:
    """Partition neighbors into num_shells equal-width distance bands.

    Shells may be empty; radii are the analytic band boundaries
    i * d_max / num_shells.
    """
    if num_shells < 1:
        raise SizeError("need at least one shell")
    if len(neighbors.neighbor_indices) < 1:
        raise SizeError("need at least one neighbor")
    bounds = equidistant_bounds(neighbors.distances, num_shells)
    shells = [
        neighbors.neighbor_indices[bounds[s] : bounds[s + 1]]
        for s in range(num_shells)
    ]
    dmax = float(neighbors.distances.max())
    radii = (np.arange(1, num_shells + 1) / num_shells) * dmax
    return ShellPartition(shells, radii)
