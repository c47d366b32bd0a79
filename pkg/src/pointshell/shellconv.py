"""The shell convolution operator.

One application: localize neighbors around a representative point, lift each
localized point with a shared pointwise mlp, concatenate any previous-layer
features, max-pool per concentric shell, then run a 1D convolution across
the ordered shells (inner to outer). Everything differentiable is built on
the autodiff module; the geometry module supplies neighborhoods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ConfigError, SizeError
from .geometry import NeighborSet, PointCloud


@dataclass
class ShellConvParams:
    """Trainable state of one shell convolution.

    lift: (W, b) pairs of the shared pointwise mlp, input width 3.
    kernel: (num_shells, c_mid, c_out) conv weights spanning all shells.
    bias: (c_out,).
    c_prev: previous-layer feature width expected at the concat step.
    """

    lift: list[tuple[Tensor, Tensor]]
    kernel: Tensor
    bias: Tensor
    shell_size: int
    num_shells: int
    c_prev: int = 0

    def __post_init__(self):
        width = 3
        for w, b in self.lift:
            if w.shape[0] != width or b.shape != (w.shape[1],):
                raise ConfigError(
                    f"lift widths do not chain: {w.shape} after width {width}"
                )
            width = w.shape[1]
        sk, c_mid, c_out = self.kernel.shape
        if sk != self.num_shells:
            raise ConfigError(
                f"shell kernel extent {sk} must span all {self.num_shells} shells"
            )
        if c_mid != width + self.c_prev:
            raise ConfigError(
                f"kernel input width {c_mid} != lift {width} + previous {self.c_prev}"
            )
        if self.bias.shape != (c_out,):
            raise ConfigError("conv bias width mismatch")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[2]

    @property
    def lift_out(self) -> int:
        return self.lift[-1][0].shape[1]

    @property
    def neighbor_count(self) -> int:
        return self.shell_size * self.num_shells

    def named_params(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(self.lift):
            out.append((f"{prefix}.lift{i}.w", w))
            out.append((f"{prefix}.lift{i}.b", b))
        out.append((f"{prefix}.kernel", self.kernel))
        out.append((f"{prefix}.bias", self.bias))
        return out


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=shape), dtype=dtype)


def init_shell_conv(
    c_prev: int,
    lift_widths,
    shell_size: int,
    num_shells: int,
    c_out: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ShellConvParams:
    """Fresh parameters with seeded Glorot-uniform weights and zero biases."""
    lift = []
    width = 3
    for w_out in lift_widths:
        lift.append(
            (
                glorot(rng, (width, w_out), width, w_out, dtype),
                ad.parameter(np.zeros(w_out), dtype=dtype),
            )
        )
        width = w_out
    c_mid = width + c_prev
    kernel = glorot(
        rng, (num_shells, c_mid, c_out), num_shells * c_mid, c_out, dtype
    )
    bias = ad.parameter(np.zeros(c_out), dtype=dtype)
    return ShellConvParams(lift, kernel, bias, shell_size, num_shells, c_prev)


def apply_mlp(x: Tensor, layers, final_relu: bool = True) -> Tensor:
    """Chain (W, b) layers over the last axis, ReLU between (and after, by default)."""
    lead = x.shape[:-1]
    h = ad.reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if final_relu or i + 1 < len(layers):
            h = ad.relu(h)
    return ad.reshape(h, lead + (h.shape[-1],)) if x.data.ndim != 2 else h


def segment_maxpool(x: Tensor, bounds: np.ndarray) -> Tensor:
    """Max-pool contiguous segments of the middle axis.

    x: (R, K, C); bounds: (R, S + 1) nondecreasing ints with bounds[:, 0] == 0
    and bounds[:, -1] == K. Returns (R, S, C); empty segments pool to zero and
    receive no gradient; ties route to the lowest position.
    """
    r, k, c = x.shape
    s = bounds.shape[1] - 1
    bounds = np.asarray(bounds, dtype=np.int64)
    flat = x.data.reshape(r * k, c)
    lengths = (bounds[:, 1:] - bounds[:, :-1]).ravel()
    nonempty = lengths > 0
    # non-empty segments tile the flat array exactly, so reduceat over their
    # starts alone avoids its empty-segment quirks
    starts = (np.arange(r)[:, None] * k + bounds[:, :s]).ravel()[nonempty]
    seg = np.zeros((r * s, c), dtype=x.data.dtype)
    seg[nonempty] = np.maximum.reduceat(flat, starts, axis=0)

    def backward(g):
        if not x.requires_grad:
            return
        # first position attaining the segment max, per channel
        elem_seg = np.repeat(np.flatnonzero(nonempty), lengths[nonempty])
        eq = flat == seg[elem_seg]
        pos = np.arange(r * k, dtype=np.int64)[:, None]
        first = np.minimum.reduceat(np.where(eq, pos, r * k), starts, axis=0)
        gflat = g.reshape(r * s, c)[nonempty]
        dx = np.zeros_like(flat)
        dx.reshape(-1)[(first * c + np.arange(c)).ravel()] += gflat.ravel()
        ad.accumulate(x, dx.reshape(x.data.shape))

    return ad.make_op(seg.reshape(r, s, c), (x,), backward)


def pool_shells(
    features: Tensor, distances: np.ndarray, shell_size: int, num_shells: int,
    partition_mode: str,
) -> Tensor:
    """Per-shell channelwise max of neighbor features.

    features: (..., K, C) in the neighbors' distance-sorted order;
    distances: (..., K). Returns (..., num_shells, C).
    """
    lead = features.shape[:-2]
    k, c = features.shape[-2:]
    if partition_mode == "fixed":
        if shell_size * num_shells != k:
            raise SizeError(
                f"{k} neighbors cannot fill {num_shells} shells of {shell_size}"
            )
        blocked = ad.reshape(features, lead + (num_shells, shell_size, c))
        return ad.maxpool_over_axis(blocked, axis=len(lead) + 1)
    if partition_mode == "equidistant":
        bounds = geometry.equidistant_bounds(distances, num_shells)
        flat = ad.reshape(features, (-1, k, c))
        pooled = segment_maxpool(flat, bounds.reshape(-1, num_shells + 1))
        return ad.reshape(pooled, lead + (num_shells, c))
    raise ConfigError(f"unknown partition mode {partition_mode!r}")


def shell_conv(
    center: np.ndarray,
    neighbors: NeighborSet,
    cloud: PointCloud | np.ndarray,
    params: ShellConvParams,
    prev_features: Tensor | np.ndarray | None = None,
    partition_mode: str = "fixed",
) -> Tensor:
    """One operator application at one representative point.

    `prev_features` rows, when given, must align with
    neighbors.neighbor_indices. Returns a differentiable (c_out,) vector.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    idx = neighbors.neighbor_indices
    k = len(idx)
    if partition_mode == "fixed" and k != params.neighbor_count:
        raise SizeError(
            f"{k} neighbors but the plan wants {params.neighbor_count}"
        )
    dtype = params.kernel.dtype
    localized = points[idx].astype(dtype) - np.asarray(center, dtype=dtype)
    local = apply_mlp(Tensor(localized), params.lift)
    if prev_features is not None:
        prev = prev_features if isinstance(prev_features, Tensor) else Tensor(
            np.asarray(prev_features, dtype=dtype)
        )
        if prev.shape[0] != k:
            raise SizeError("prev_features rows misaligned with neighbors")
        feats = ad.concat(prev, local, axis=1)
    else:
        feats = local
    pooled = pool_shells(
        feats, neighbors.distances, params.shell_size, params.num_shells,
        partition_mode,
    )
    out = ad.conv1d(pooled, params.kernel)
    out = ad.add(ad.reshape(out, (params.c_out,)), params.bias)
    return ad.relu(out)


@dataclass
class LayerOutput:
    """Representative-point cloud plus its differentiable features."""

    cloud: PointCloud
    features: Tensor
    representatives: np.ndarray


def shell_conv_layer(
    cloud: PointCloud,
    prev_features: Tensor | np.ndarray | None,
    representatives: np.ndarray,
    params: ShellConvParams,
    knn_space: str = "coordinates",
    partition_mode: str = "fixed",
) -> LayerOutput:
    """Apply the operator at every representative of one cloud.

    `prev_features` holds one row per *cloud* point (gathered internally).
    Feature-space neighbor queries use those rows; without features the
    query falls back to coordinates.
    """
    reps = np.asarray(representatives, dtype=np.int64)
    dtype = params.kernel.dtype
    prev: Tensor | None = None
    if prev_features is not None:
        prev = prev_features if isinstance(prev_features, Tensor) else Tensor(
            np.asarray(prev_features, dtype=dtype)
        )
        if prev.shape[0] != len(cloud):
            raise SizeError("prev_features must have one row per cloud point")
    if knn_space == "features" and prev is not None:
        query_data = prev.data
    elif knn_space in ("coordinates", "features"):
        query_data = cloud.points
    else:
        raise ConfigError(f"unknown query space {knn_space!r}")
    k = params.neighbor_count
    idx, dist = geometry.knn_batch(query_data, query_data[reps], k)

    centers = cloud.points[reps].astype(dtype)  # (M, 3)
    localized = cloud.points[idx].astype(dtype) - centers[:, None, :]
    local = apply_mlp(Tensor(localized), params.lift)  # (M, K, L)
    feats = ad.concat(ad.take_rows(prev, idx), local, axis=2) if prev is not None else local
    pooled = pool_shells(
        feats, dist, params.shell_size, params.num_shells, partition_mode
    )
    out = ad.conv1d(pooled, params.kernel)  # (M, 1, C_out)
    out = ad.add(ad.reshape(out, (len(reps), params.c_out)), params.bias)
    out = ad.relu(out)
    new_cloud = PointCloud(cloud.points[reps], features=out.data, labels=None)
    return LayerOutput(new_cloud, out, reps)


def shell_conv_batch(
    points: np.ndarray,
    prev_features: Tensor | None,
    rep_idx: np.ndarray,
    params: ShellConvParams,
    knn_space: str = "coordinates",
    partition_mode: str = "fixed",
    query_points: np.ndarray | None = None,
) -> tuple[np.ndarray, Tensor]:
    """Batched layer: points (B, N, 3), prev_features (B, N, Cp) or None.

    rep_idx (B, M) indexes `points` rows; when `query_points` (B, M, 3) is
    given (decoder path) the neighborhoods are centered there instead and
    rep_idx is ignored. Returns (center coordinates (B, M, 3), features
    Tensor (B, M, c_out)).
    """
    if knn_space not in ("coordinates", "features"):
        raise ConfigError(f"unknown query space {knn_space!r}")
    b = points.shape[0]
    dtype = params.kernel.dtype
    if query_points is not None:
        centers = np.asarray(query_points)
    else:
        centers = np.take_along_axis(points, rep_idx[:, :, None], axis=1)
    m = centers.shape[1]
    k = params.neighbor_count
    # feature-space queries only apply where representatives are cloud members
    # (encoder); decoder centers come from another cloud and use coordinates
    in_feature_space = (
        knn_space == "features" and prev_features is not None and query_points is None
    )
    idx = np.empty((b, m, k), dtype=np.int64)
    dist = np.empty((b, m, k), dtype=np.float64)
    for i in range(b):
        if in_feature_space:
            space_pts = prev_features.data[i]
            queries = space_pts[rep_idx[i]]
        else:
            space_pts = points[i]
            queries = centers[i]
        idx[i], dist[i] = geometry.knn_batch(space_pts, queries, k)

    b_ix = np.arange(b)[:, None, None]
    gathered = points[b_ix, idx].astype(dtype)  # (B, M, K, 3)
    localized = gathered - centers.astype(dtype)[:, :, None, :]
    local = apply_mlp(Tensor(localized), params.lift)  # (B, M, K, L)
    if prev_features is not None:
        prev_rows = ad.take_rows_batch(prev_features, idx)  # (B, M, K, Cp)
        feats = ad.concat(prev_rows, local, axis=3)
    else:
        feats = local
    pooled = pool_shells(
        feats, dist, params.shell_size, params.num_shells, partition_mode
    )
    out = ad.conv1d(pooled, params.kernel)  # (B, M, 1, C_out)
    out = ad.add(ad.reshape(out, (b, m, params.c_out)), params.bias)
    return centers, ad.relu(out)
