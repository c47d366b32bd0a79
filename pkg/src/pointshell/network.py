"""Network assembly: classification encoder, segmentation encoder-decoder,
and parameter / FLOP accounting.

The classifier stacks shell-conv layers that subsample the cloud while
widening channels, max-pools the surviving representatives channelwise, and
finishes with a small mlp head. The segmenter mirrors the encoder with
decoder layers centered at the skip layers' (finer) representative points,
querying neighbors in the current coarser cloud and concatenating the skip
features to each decoder output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ConfigError, SizeError
from .shellconv import (
    ShellConvParams,
    apply_mlp,
    glorot,
    init_shell_conv,
    shell_conv_batch,
)


@dataclass
class NetworkConfig:
    """The (N_i, S_i, C_i) plan of a whole network plus head and query options.

    layers: per encoder layer (representatives, shells, out channels);
    representatives must strictly decrease and channels strictly increase.
    decoder: per decoder layer (shells, out channels); None picks the
    mirrored default for segmentation.
    """

    task: str = "classification"
    layers: list = field(
        default_factory=lambda: [(512, 4, 128), (128, 2, 256), (32, 1, 512)]
    )
    shell_size: int = 16
    head_widths: list = field(default_factory=lambda: [256, 128])
    k_out: int = 40
    sampling: str = "random"
    knn_space: str = "coordinates"
    partition_mode: str = "fixed"
    lift_widths: list = field(default_factory=lambda: [32, 64])
    decoder: list | None = None
    in_features: int = 0
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        self.layers = [tuple(int(v) for v in layer) for layer in self.layers]
        self.head_widths = [int(v) for v in self.head_widths]
        self.lift_widths = [int(v) for v in self.lift_widths]
        if self.decoder is not None:
            self.decoder = [tuple(int(v) for v in layer) for layer in self.decoder]
        self.validate()

    def validate(self):
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.sampling not in ("random", "farthest"):
            raise ConfigError(f"unknown sampling strategy {self.sampling!r}")
        if self.knn_space not in ("coordinates", "features"):
            raise ConfigError(f"unknown knn space {self.knn_space!r}")
        if self.partition_mode not in ("fixed", "equidistant"):
            raise ConfigError(f"unknown partition mode {self.partition_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        if self.k_out < 1:
            raise ConfigError("k_out must be positive")
        if self.shell_size < 1 or any(w < 1 for w in self.lift_widths):
            raise ConfigError("shell_size and lift widths must be positive")
        npts = [n for n, _, _ in self.layers]
        chans = [c for _, _, c in self.layers]
        if any(a <= b for a, b in zip(npts, npts[1:])):
            raise ConfigError(f"representative counts must strictly decrease: {npts}")
        if any(a >= b for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"channel widths must strictly increase: {chans}")
        for i, (n, s, c) in enumerate(self.layers):
            if min(n, s, c) < 1:
                raise ConfigError(f"layer {i} has nonpositive extents")
            if i > 0 and s * self.shell_size > self.layers[i - 1][0]:
                raise ConfigError(
                    f"layer {i} wants {s * self.shell_size} neighbors from "
                    f"{self.layers[i - 1][0]} points"
                )
        if self.task == "segmentation":
            for i, (s, c) in enumerate(self.decoder_plan()):
                src = self.decoder_source_size(i)
                if s * self.shell_size > src:
                    raise ConfigError(
                        f"decoder layer {i} wants {s * self.shell_size} "
                        f"neighbors from {src} points"
                    )

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def decoder_plan(self) -> list:
        """(shells, channels) per decoder layer; defaults mirror the encoder."""
        if self.decoder is not None:
            return self.decoder
        shells = [s for _, s, _ in reversed(self.layers)]
        chans = [c for _, _, c in self.layers[-2::-1]] + [64]
        return list(zip(shells, chans))

    def decoder_source_size(self, i: int) -> int:
        """Point count of the coarser cloud decoder layer i queries."""
        return self.layers[-1][0] if i == 0 else self.layers[-1 - i][0]

    def decoder_center_size(self, i: int, input_n: int) -> int:
        """Point count of the (finer) skip level decoder layer i outputs at."""
        depth = len(self.layers)
        return self.layers[depth - 2 - i][0] if i < depth - 1 else input_n

    def skip_channels(self, i: int) -> int:
        """Feature width of the skip level decoder layer i concatenates."""
        depth = len(self.layers)
        return self.layers[depth - 2 - i][2] if i < depth - 1 else self.in_features

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [list(t) for t in self.layers]
        if d["decoder"] is not None:
            d["decoder"] = [list(t) for t in d["decoder"]]
        return d


@dataclass
class Network:
    config: NetworkConfig
    encoder: list[ShellConvParams]
    decoder: list[ShellConvParams] | None
    head: list  # (W, b) pairs

    def named_parameters(self):
        out = []
        for i, p in enumerate(self.encoder):
            out.extend(p.named_params(f"enc{i}"))
        if self.decoder:
            for i, p in enumerate(self.decoder):
                out.extend(p.named_params(f"dec{i}"))
        for i, (w, b) in enumerate(self.head):
            out.append((f"head{i}.w", w))
            out.append((f"head{i}.b", b))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def _init_head(widths, rng, dtype):
    layers = []
    for w_in, w_out in zip(widths, widths[1:]):
        layers.append(
            (
                glorot(rng, (w_in, w_out), w_in, w_out, dtype),
                ad.parameter(np.zeros(w_out), dtype=dtype),
            )
        )
    return layers


def build_classifier(config: NetworkConfig) -> Network:
    """Encoder stack + channelwise global maxpool + mlp head to k_out logits."""
    if config.task != "classification":
        raise ConfigError("config.task must be 'classification'")
    rng = np.random.default_rng(np.random.SeedSequence(config.init_seed))
    dtype = config.np_dtype
    encoder = []
    c_prev = config.in_features
    for n, s, c in config.layers:
        encoder.append(
            init_shell_conv(
                c_prev, config.lift_widths, config.shell_size, s, c, rng, dtype
            )
        )
        c_prev = c
    head = _init_head(
        [config.layers[-1][2], *config.head_widths, config.k_out], rng, dtype
    )
    return Network(config, encoder, None, head)


def build_segmenter(config: NetworkConfig) -> Network:
    """Encoder plus mirrored decoder with skip concatenation; per-point head."""
    if config.task != "segmentation":
        raise ConfigError("config.task must be 'segmentation'")
    rng = np.random.default_rng(np.random.SeedSequence(config.init_seed))
    dtype = config.np_dtype
    encoder = []
    c_prev = config.in_features
    for n, s, c in config.layers:
        encoder.append(
            init_shell_conv(
                c_prev, config.lift_widths, config.shell_size, s, c, rng, dtype
            )
        )
        c_prev = c
    decoder = []
    plan = config.decoder_plan()
    if len(plan) != len(config.layers):
        raise ConfigError("decoder must have one layer per encoder layer")
    source_c = config.layers[-1][2]
    for i, (s, c) in enumerate(plan):
        decoder.append(
            init_shell_conv(
                source_c, config.lift_widths, config.shell_size, s, c, rng, dtype
            )
        )
        source_c = c + config.skip_channels(i)
    head = _init_head([source_c, config.k_out], rng, dtype)
    return Network(config, encoder, decoder, head)


def build(config: NetworkConfig) -> Network:
    if config.task == "classification":
        return build_classifier(config)
    return build_segmenter(config)


def sample_representatives_stack(
    points: np.ndarray, config: NetworkConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Per-layer (B, M_i) representative indices for a batch of clouds.

    Layer 0 indexes the input cloud; layer i > 0 indexes the layer i-1
    representative list.
    """
    b = points.shape[0]
    stacks = []
    cur = points
    for n, _, _ in config.layers:
        layer_idx = np.empty((b, n), dtype=np.int64)
        for i in range(b):
            layer_idx[i] = geometry.sample_indices(cur[i], n, config.sampling, rng)
        stacks.append(layer_idx)
        cur = np.take_along_axis(cur, layer_idx[:, :, None], axis=1)
    return stacks


def forward(
    net: Network,
    points: np.ndarray,
    features: np.ndarray | None = None,
    representatives: list | None = None,
    seed: int = 0,
    sever_skips: bool = False,
) -> Tensor:
    """Batch forward pass.

    points: (B, N, 3) with every cloud the same N; features: optional
    (B, N, C_in). representatives: per-layer (B, M_i) index arrays (layer 0
    into the input, deeper layers into the previous representative list);
    sampled from `seed` when omitted. Returns logits (B, k) for
    classification or (B, N, k) for segmentation.
    """
    cfg = net.config
    points = np.asarray(points)
    if points.ndim != 3 or points.shape[2] != 3:
        raise SizeError(f"expected points of shape (B, N, 3), got {points.shape}")
    n_in = points.shape[1]
    if cfg.layers[0][1] * cfg.shell_size > n_in:
        raise SizeError(
            f"layer 0 wants {cfg.layers[0][1] * cfg.shell_size} neighbors "
            f"from {n_in} input points"
        )
    if cfg.layers[0][0] > n_in:
        raise SizeError(
            f"cannot sample {cfg.layers[0][0]} representatives from {n_in} points"
        )
    if representatives is None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        representatives = sample_representatives_stack(points, cfg, rng)

    dtype = cfg.np_dtype
    cur_pts = points
    cur_feat: Tensor | None = (
        Tensor(np.asarray(features, dtype=dtype)) if features is not None else None
    )
    skips = [(cur_pts, cur_feat)]
    for layer_i, params in enumerate(net.encoder):
        cur_pts, cur_feat = shell_conv_batch(
            cur_pts,
            cur_feat,
            representatives[layer_i],
            params,
            knn_space=cfg.knn_space,
            partition_mode=cfg.partition_mode,
        )
        skips.append((cur_pts, cur_feat))

    if cfg.task == "classification":
        pooled = ad.maxpool_over_axis(cur_feat, axis=1)  # (B, C_last)
        return apply_mlp(pooled, net.head, final_relu=False)

    # segmentation decoder: centers at the skip levels, coarse-cloud queries
    for i, params in enumerate(net.decoder):
        skip_pts, skip_feat = skips[len(net.encoder) - 1 - i]
        cur_pts, out = shell_conv_batch(
            cur_pts,
            cur_feat,
            None,
            params,
            knn_space="coordinates",
            partition_mode=cfg.partition_mode,
            query_points=skip_pts,
        )
        if skip_feat is not None:
            if sever_skips:
                skip_feat = Tensor(np.zeros_like(skip_feat.data))
            out = ad.concat(out, skip_feat, axis=2)
        cur_feat = out
    b, n = cur_feat.shape[0], cur_feat.shape[1]
    flat = ad.reshape(cur_feat, (b * n, cur_feat.shape[2]))
    logits = apply_mlp(flat, net.head, final_relu=False)
    return ad.reshape(logits, (b, n, cfg.k_out))


def forward_single(
    net: Network, cloud, representatives: list | None = None, seed: int = 0
) -> Tensor:
    """Unbatched classification forward through the public layer API.

    Exists as the cross-check twin of the batched path; representatives are
    per-layer (M_i,) index arrays.
    """
    from .shellconv import shell_conv_layer

    cfg = net.config
    if cfg.task != "classification":
        raise ConfigError("forward_single covers the classification path")
    if representatives is None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        stacks = sample_representatives_stack(cloud.points[None], cfg, rng)
        representatives = [s[0] for s in stacks]
    cur = cloud
    feats: Tensor | None = None
    if cloud.features is not None:
        feats = Tensor(cloud.features.astype(cfg.np_dtype))
    for params, reps in zip(net.encoder, representatives):
        out = shell_conv_layer(
            cur, feats, reps, params,
            knn_space=cfg.knn_space, partition_mode=cfg.partition_mode,
        )
        cur, feats = out.cloud, out.features
    pooled = ad.maxpool_over_axis(feats, axis=0)  # (C_last,)
    logits = apply_mlp(ad.reshape(pooled, (1, -1)), net.head, final_relu=False)
    return ad.reshape(logits, (cfg.k_out,))


def count_parameters(net: Network) -> int:
    """Total trainable scalars."""
    return int(sum(t.data.size for _, t in net.named_parameters()))


@dataclass
class FlopReport:
    """Static operation counts under the documented convention.

    Multiplies and adds are counted separately (a fused multiply-add is 2);
    a linear map over R rows, k inputs, n outputs costs 2*R*k*n (bias adds
    folded); the shell conv costs 2*R*S_out*S_k*C_mid*C_out; relu and
    maxpool comparisons count 1 per element; neighbor queries count the
    distance arithmetic (3C - 1 per point pair, C the search-space width)
    but not sorting or selection; the loss is excluded. Training counts
    forward plus the analytically derived backward of the same ops.
    """

    inference: int
    training: int
    rows: list

    def table(self) -> str:
        lines = [f"{'stage':<24}{'inference':>16}{'training':>16}"]
        for name, inf, tr in self.rows:
            lines.append(f"{name:<24}{inf:>16,}{tr:>16,}")
        lines.append(f"{'total':<24}{self.inference:>16,}{self.training:>16,}")
        return "\n".join(lines)


def matmul_flops(m: int, k: int, n: int) -> int:
    """(m, k) @ (k, n): m*n*k multiplies plus m*n*(k - 1) adds."""
    return m * n * (2 * k - 1)


def conv1d_flops(s: int, s_k: int, c_in: int, c_out: int, stride: int = 1) -> int:
    """Per-row forward cost of the valid 1D conv including its bias add."""
    s_out = (s - s_k) // stride + 1
    return s_out * c_out * 2 * s_k * c_in


def _linear_flops(rows: int, k: int, n: int) -> tuple[int, int]:
    # bias adds bring the forward total to exactly 2*rows*k*n
    fwd = matmul_flops(rows, k, n) + rows * n
    # backward: dX = G W^T and dW = X^T G, plus bias column sums
    bwd = 4 * rows * k * n + rows * n
    return fwd, bwd


def _relu_flops(count: int) -> tuple[int, int]:
    return count, count


def _shell_layer_flops(
    reps: int, source_n: int, k: int, lift_widths, c_prev: int, s: int, c_out: int,
    knn_c: int,
) -> tuple[int, int, int]:
    """(knn, inference, training) flop counts of one shell-conv layer."""
    knn = reps * source_n * (3 * knn_c - 1)
    inf = 0
    tr = 0
    rows = reps * k
    w_in = 3
    for w in lift_widths:
        f, b = _linear_flops(rows, w_in, w)
        rf, rb = _relu_flops(rows * w)
        inf += f + rf
        tr += f + b + rf + rb
        w_in = w
    c_mid = w_in + c_prev
    # per-shell maxpool comparisons over K elements into S slots
    pool = reps * (k - s) * c_mid
    inf += pool
    tr += pool
    f, b = _linear_flops(reps, s * c_mid, c_out)
    rf, rb = _relu_flops(reps * c_out)
    inf += f + rf
    tr += f + b + rf + rb
    return knn, inf, tr


def count_flops(net: Network, input_size: int, batch_size: int = 1) -> FlopReport:
    """Static multiply/add counts for one forward (inference) and one
    forward+backward (training) pass; see FlopReport for the convention."""
    cfg = net.config
    rows = []
    total_inf = 0
    total_tr = 0
    source_n = input_size
    c_prev = cfg.in_features
    for i, ((n, s, c), params) in enumerate(zip(cfg.layers, net.encoder)):
        knn_c = 3 if cfg.knn_space == "coordinates" or c_prev == 0 else c_prev
        knn, inf, tr = _shell_layer_flops(
            batch_size * n, source_n, params.neighbor_count, cfg.lift_widths,
            c_prev, s, c, knn_c,
        )
        if cfg.sampling == "farthest":
            knn += batch_size * (n - 1) * source_n * 8
        rows.append((f"encoder{i} neighbors", knn, knn))
        rows.append((f"encoder{i} compute", inf, tr))
        total_inf += knn + inf
        total_tr += knn + tr
        source_n = n
        c_prev = c
    if cfg.task == "classification":
        b = batch_size
        pool = b * (cfg.layers[-1][0] - 1) * c_prev
        rows.append(("global maxpool", pool, pool))
        total_inf += pool
        total_tr += pool
        w_in = c_prev
        inf = tr = 0
        widths = [*cfg.head_widths, cfg.k_out]
        for j, w in enumerate(widths):
            f, bk = _linear_flops(b, w_in, w)
            inf += f
            tr += f + bk
            if j + 1 < len(widths):
                rf, rb = _relu_flops(b * w)
                inf += rf
                tr += rf + rb
            w_in = w
        rows.append(("head", inf, tr))
        total_inf += inf
        total_tr += tr
    else:
        for i, ((s, c), params) in enumerate(zip(cfg.decoder_plan(), net.decoder)):
            reps = batch_size * cfg.decoder_center_size(i, input_size)
            knn, inf, tr = _shell_layer_flops(
                reps, cfg.decoder_source_size(i),
                params.neighbor_count, cfg.lift_widths, params.c_prev, s, c, 3,
            )
            rows.append((f"decoder{i} neighbors", knn, knn))
            rows.append((f"decoder{i} compute", inf, tr))
            total_inf += knn + inf
            total_tr += knn + tr
        w_in = net.head[0][0].shape[0]
        f, bk = _linear_flops(batch_size * input_size, w_in, cfg.k_out)
        rows.append(("head", f, f + bk))
        total_inf += f
        total_tr += f + bk
    return FlopReport(total_inf, total_tr, rows)
