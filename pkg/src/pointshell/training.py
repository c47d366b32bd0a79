"""Optimization harness: Adam, augmentation, epoch loop, metrics.

Every random stream is derived from (seed, epoch, purpose, cloud id), so a
run is reproducible from its config alone and a resumed run consumes the
exact streams the uninterrupted run would have.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_io
from . import geometry
from . import network as net_mod
from .errors import DivergenceError, SizeError
from .geometry import PointCloud

_SHUFFLE, _JITTER, _REPS, _EVAL = 0, 1, 2, 3


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    epochs: int = 30
    jitter_sigma: float = 0.01
    seed: int = 0
    eval_every: int = 5
    resample_representatives: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1:
            raise SizeError("batch_size must be at least 1")
        # 0 is allowed so no-op training runs can probe determinism
        if self.learning_rate < 0:
            raise SizeError("learning_rate must be nonnegative")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise SizeError("adam betas must lie in [0, 1)")
        if self.jitter_sigma < 0:
            raise SizeError("jitter_sigma must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, config: TrainConfig, names=None):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if names is None:
        names = [str(i) for i in range(len(params))]
    state.step += 1
    b1, b2 = config.adam_betas
    t = state.step
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise SizeError(f"gradient shape {g.shape} != param shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return state


def augment_jitter(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    """Perturb coordinates with seeded Gaussian noise (std sigma, clipped at 3 sigma)."""
    if sigma < 0:
        raise SizeError("sigma must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal(cloud.points.shape) * sigma
    np.clip(noise, -3 * sigma, 3 * sigma, out=noise)
    return PointCloud(
        cloud.points + noise.astype(np.float32),
        features=cloud.features,
        labels=cloud.labels,
    )


@dataclass
class EvalMetrics:
    overall_accuracy: float
    per_class_accuracy: list
    mean_iou: float | None
    loss: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    wall_time: float
    test: EvalMetrics | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["test"] = self.test.to_dict() if self.test else None
        return d


def _epoch_rng(seed: int, epoch: int, purpose: int, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, purpose, *extra)))


def _labels_of(cloud: PointCloud, task: str):
    if cloud.labels is None:
        raise SizeError("training requires labeled clouds")
    if task == "classification":
        if not isinstance(cloud.labels, int):
            raise SizeError("classification needs per-cloud labels")
        return cloud.labels
    if not isinstance(cloud.labels, np.ndarray):
        raise SizeError("segmentation needs per-point labels")
    return cloud.labels


def _assemble(
    clouds: list[PointCloud], task: str, dtype
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    n = len(clouds[0])
    if any(len(c) != n for c in clouds):
        raise SizeError("all clouds in a batch must share the same point count")
    pts = np.stack([c.points for c in clouds]).astype(dtype)
    labels = np.asarray([_labels_of(c, task) for c in clouds], dtype=np.int64)
    feats = None
    if clouds[0].features is not None:
        feats = np.stack([c.features for c in clouds]).astype(dtype)
    return pts, labels, feats


def representatives_for(
    clouds_pts: np.ndarray, config, seed: int, epoch: int, cloud_ids,
    purpose: int = _REPS,
) -> list[np.ndarray]:
    """Per-layer (B, M_i) representative stacks, seeded per (epoch, cloud)."""
    b = clouds_pts.shape[0]
    stacks = [
        np.empty((b, n), dtype=np.int64) for n, _, _ in config.layers
    ]
    for i in range(b):
        cur = clouds_pts[i]
        for layer_i, (n, _, _) in enumerate(config.layers):
            rng = _epoch_rng(seed, epoch, purpose, int(cloud_ids[i]), layer_i)
            idx = geometry.sample_indices(cur, n, config.sampling, rng)
            stacks[layer_i][i] = idx
            cur = cur[idx]
    return stacks


def _batch_loss(net, pts, labels, reps, feats=None):
    logits = net_mod.forward(net, pts, features=feats, representatives=reps)
    if net.config.task == "segmentation":
        flat = ad.reshape(logits, (-1, net.config.k_out))
        loss = ad.softmax_cross_entropy(flat, labels.reshape(-1))
    else:
        loss = ad.softmax_cross_entropy(logits, labels)
    return logits, loss


def _count_correct(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=-1) == labels).sum())


def train(
    net,
    dataset,
    config: TrainConfig,
    checkpoint_path=None,
    metrics_path=None,
    start_epoch: int = 0,
    opt_state: AdamState | None = None,
    history: list | None = None,
    log=None,
):
    """Run the epoch loop; returns (net, per-epoch history).

    Augmentation touches the training split only; checkpoints (when a path
    is given) are written every `eval_every` epochs and at the end.
    """
    cfg = net.config
    for i in dataset.train_indices + dataset.test_indices:
        labels = _labels_of(dataset.clouds[i], cfg.task)
        top = labels if isinstance(labels, int) else int(labels.max())
        if top >= cfg.k_out:
            raise SizeError(f"label {top} out of range for k_out={cfg.k_out}")
    named = net.named_parameters()
    names = [n for n, _ in named]
    params = [t for _, t in named]
    state = opt_state if opt_state is not None else AdamState()
    history = history if history is not None else []
    dtype = cfg.np_dtype
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = _epoch_rng(config.seed, epoch, _SHUFFLE).permutation(
            len(dataset.train_indices)
        )
        train_ids = [dataset.train_indices[i] for i in order]
        loss_sum = 0.0
        correct = 0
        total = 0
        rep_epoch = epoch if config.resample_representatives else 0
        for lo in range(0, len(train_ids), config.batch_size):
            ids = train_ids[lo : lo + config.batch_size]
            clouds = [
                augment_jitter(
                    dataset.clouds[i],
                    config.jitter_sigma,
                    _epoch_rng(config.seed, epoch, _JITTER, i),
                )
                for i in ids
            ]
            pts, labels, feats = _assemble(clouds, cfg.task, dtype)
            reps = representatives_for(pts, cfg, config.seed, rep_epoch, ids)
            try:
                logits, loss = _batch_loss(net, pts, labels, reps, feats)
            except DivergenceError as e:
                raise DivergenceError(
                    f"non-finite values at epoch {epoch}, batch {lo // config.batch_size}: {e}"
                ) from e
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(f"loss diverged at epoch {epoch}")
            loss.backward()
            adam_step(
                [p.data for p in params], [p.grad for p in params], state, config, names
            )
            ad.zero_grad(params)
            weight = labels.size
            loss_sum += loss_val * weight
            correct += _count_correct(logits.data, labels)
            total += weight
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / max(total, 1),
            train_accuracy=correct / max(total, 1),
            wall_time=time.perf_counter() - t0,
        )
        last = epoch + 1 == config.epochs
        if (epoch + 1) % config.eval_every == 0 or last:
            if dataset.test_indices:
                record.test = evaluate(net, dataset, batch_size=config.batch_size)
            if checkpoint_path is not None:
                save_state(net, state, epoch + 1, config, history + [record],
                           checkpoint_path)
        history.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict()) + "\n")
        if log is not None:
            test = f" test_oa={record.test.overall_accuracy:.4f}" if record.test else ""
            log(
                f"epoch {epoch}: loss={record.train_loss:.4f} "
                f"oa={record.train_accuracy:.4f}{test} ({record.wall_time:.1f}s)"
            )
    return net, history


def evaluate(net, dataset, split: str = "test", batch_size: int = 32) -> EvalMetrics:
    """Accuracy / per-class accuracy / mean-IoU over a split; pure."""
    cfg = net.config
    ids = dataset.test_indices if split == "test" else dataset.train_indices
    if not ids:
        raise SizeError(f"dataset has no {split} split")
    k = cfg.k_out
    confusion = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    total = 0
    with ad.no_grad():
        for lo in range(0, len(ids), batch_size):
            batch_ids = ids[lo : lo + batch_size]
            clouds = [dataset.clouds[i] for i in batch_ids]
            pts, labels, feats = _assemble(clouds, cfg.task, cfg.np_dtype)
            reps = representatives_for(pts, cfg, 0, 0, batch_ids, purpose=_EVAL)
            logits, loss = _batch_loss(net, pts, labels, reps, feats)
            pred = logits.data.argmax(axis=-1).reshape(-1)
            truth = labels.reshape(-1)
            np.add.at(confusion, (truth, pred), 1)
            loss_sum += float(loss.data) * truth.size
            total += truth.size
    return metrics_from_confusion(
        confusion, with_iou=cfg.task == "segmentation", loss=loss_sum / total
    )


def metrics_from_confusion(
    confusion: np.ndarray, with_iou: bool = False, loss: float = 0.0
) -> EvalMetrics:
    """Accuracy metrics from a (truth, prediction) count matrix.

    mIoU averages tp / (tp + fp + fn) over the labels present in either the
    ground truth or the predictions.
    """
    k = confusion.shape[0]
    tp = np.diag(confusion).astype(np.float64)
    gt = confusion.sum(axis=1)
    pr = confusion.sum(axis=0)
    per_class = [float(tp[i] / gt[i]) if gt[i] else 0.0 for i in range(k)]
    miou = None
    if with_iou:
        union = gt + pr - tp
        present = union > 0
        miou = float((tp[present] / union[present]).mean()) if present.any() else 0.0
    total = confusion.sum()
    return EvalMetrics(
        overall_accuracy=float(tp.sum() / total) if total else 0.0,
        per_class_accuracy=per_class,
        mean_iou=miou,
        loss=loss,
    )


def save_state(net, state: AdamState, next_epoch: int, config: TrainConfig,
               history: list, path) -> None:
    """Write a resumable checkpoint (weights + optimizer moments + history)."""
    data_io.save_checkpoint(
        net,
        {
            "next_epoch": next_epoch,
            "train_config": config.to_dict(),
            "adam": {"step": state.step, "m": state.m, "v": state.v},
            "history": [r.to_dict() for r in history],
        },
        path,
    )


def _record_from_dict(d: dict) -> EpochRecord:
    test = d.get("test")
    return EpochRecord(
        epoch=d["epoch"],
        train_loss=d["train_loss"],
        train_accuracy=d["train_accuracy"],
        wall_time=d["wall_time"],
        test=EvalMetrics(**test) if test else None,
    )


def resume(path, dataset, epochs: int | None = None, checkpoint_path=None,
           metrics_path=None, log=None):
    """Continue a checkpointed run to `epochs` (default: the stored target)."""
    net, state_dict = data_io.load_checkpoint(path)
    cfg = TrainConfig(**state_dict["train_config"])
    if epochs is not None:
        cfg.epochs = epochs
    adam = AdamState(
        step=state_dict["adam"]["step"],
        m=state_dict["adam"]["m"],
        v=state_dict["adam"]["v"],
    )
    history = [_record_from_dict(d) for d in state_dict["history"]]
    return train(
        net,
        dataset,
        cfg,
        checkpoint_path=checkpoint_path if checkpoint_path is not None else path,
        metrics_path=metrics_path,
        start_epoch=state_dict["next_epoch"],
        opt_state=adam,
        history=history,
        log=log,
    )
