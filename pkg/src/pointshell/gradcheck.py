"""Finite-difference self-checks for every differentiable operator.

Backs the `gradcheck` CLI command. Checks run at float64 with central
differences; the reported number is the worst relative error across seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .shellconv import ShellConvParams, segment_maxpool, shell_conv
from .geometry import knn_query, PointCloud


def numeric_grads(f, arrays, eps: float = 1e-5):
    """Central-difference gradients of scalar f w.r.t. each input array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f()
            flat[i] = keep - eps
            lo = f()
            flat[i] = keep
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric) -> float:
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


def check_op(build, seeds: int, eps: float = 1e-5) -> float:
    """Worst relative FD error for `build(rng) -> (loss_fn, arrays)`.

    loss_fn() must run the op on the (mutated in place) float64 arrays and
    return a scalar; the analytic gradients come from one backward pass on
    tensors wrapping the same arrays.
    """
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        loss_fn, arrays = build(rng)
        tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        loss = loss_fn(*tensors)
        loss.backward()
        analytic = [t.grad for t in tensors]

        def scalar():
            with ad.no_grad():
                return float(loss_fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data)

        numeric = numeric_grads(scalar, [t.data for t in tensors], eps)
        for a, n in zip(analytic, numeric):
            worst = max(worst, relative_error(a if a is not None else np.zeros_like(n), n))
    return worst


def _weighted_sum(t: Tensor, rng) -> Tensor:
    # random positive-plus-negative weights prevent cancellation hiding errors
    w = Tensor(rng.standard_normal((t.data.size, 1)), dtype=np.float64)
    return ad.reshape(ad.matmul(ad.reshape(t, (1, -1)), w), ())


def build_suite(seeds: int = 10, eps: float = 1e-5):
    """(name, worst relative error) rows for every differentiable op."""

    def matmul_case(rng):
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 3))
        return (lambda ta, tb: _weighted_sum(ad.matmul(ta, tb), np.random.default_rng(1))), [a, b]

    def relu_case(rng):
        x = rng.standard_normal((5, 7)) + 0.05  # keep away from the kink
        x[np.abs(x) < 0.02] = 0.5
        return (lambda tx: _weighted_sum(ad.relu(tx), np.random.default_rng(2))), [x]

    def add_case(rng):
        x = rng.standard_normal((4, 5))
        b = rng.standard_normal(5)
        return (lambda tx, tb: _weighted_sum(ad.add(tx, tb), np.random.default_rng(3))), [x, b]

    def maxpool_case(rng):
        x = rng.standard_normal((3, 6, 4))
        return (lambda tx: _weighted_sum(ad.maxpool_over_axis(tx, 1), np.random.default_rng(4))), [x]

    def conv_case(rng):
        x = rng.standard_normal((5, 4, 3))
        k = rng.standard_normal((2, 3, 6))
        return (lambda tx, tk: _weighted_sum(ad.conv1d(tx, tk), np.random.default_rng(5))), [x, k]

    def concat_case(rng):
        a = rng.standard_normal((4, 2))
        b = rng.standard_normal((4, 3))
        return (lambda ta, tb: _weighted_sum(ad.concat(ta, tb, 1), np.random.default_rng(6))), [a, b]

    def softmax_case(rng):
        logits = rng.standard_normal((3, 5))
        targets = rng.integers(0, 5, 3)
        return (lambda tl: ad.softmax_cross_entropy(tl, targets)), [logits]

    def gather_case(rng):
        x = rng.standard_normal((6, 3))
        idx = rng.integers(0, 6, (4, 2))
        return (lambda tx: _weighted_sum(ad.take_rows(tx, idx), np.random.default_rng(7))), [x]

    def segment_case(rng):
        x = rng.standard_normal((2, 6, 3))
        bounds = np.array([[0, 2, 2, 6], [0, 1, 4, 6]], dtype=np.int64)
        return (
            lambda tx: _weighted_sum(segment_maxpool(tx, bounds), np.random.default_rng(8))
        ), [x]

    def shell_conv_case(rng):
        cloud = PointCloud(rng.standard_normal((12, 3)).astype(np.float32))
        neighbors = knn_query(cloud, 0, 8)
        prev = rng.standard_normal((8, 2))
        w1 = rng.standard_normal((3, 5)) * 0.5
        b1 = rng.standard_normal(5) * 0.1
        kernel = rng.standard_normal((2, 7, 3)) * 0.5
        bias = rng.standard_normal(3) * 0.1

        def loss_fn(tprev, tw1, tb1, tk, tb):
            params = ShellConvParams(
                [(tw1, tb1)], tk, tb, shell_size=4, num_shells=2, c_prev=2
            )
            out = shell_conv(
                cloud.points[0], neighbors, cloud, params, prev_features=tprev
            )
            return _weighted_sum(out, np.random.default_rng(9))

        return loss_fn, [prev, w1, b1, kernel, bias]

    cases = [
        ("matmul", matmul_case),
        ("add", add_case),
        ("relu", relu_case),
        ("maxpool_over_axis", maxpool_case),
        ("conv1d", conv_case),
        ("concat", concat_case),
        ("softmax_cross_entropy", softmax_case),
        ("take_rows", gather_case),
        ("segment_maxpool", segment_case),
        ("shell_conv", shell_conv_case),
    ]
    return [(name, check_op(fn, seeds, eps)) for name, fn in cases]


@dataclass
class GradCheckReport:
    rows: list
    threshold: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err < self.threshold for _, err in self.rows)

    def table(self) -> str:
        lines = [f"{'op':<24}{'max rel err':>14}  status"]
        for name, err in self.rows:
            status = "pass" if err < self.threshold else "FAIL"
            lines.append(f"{name:<24}{err:>14.3e}  {status}")
        return "\n".join(lines)


def run(seeds: int = 10, eps: float = 1e-5, threshold: float = 1e-4) -> GradCheckReport:
    return GradCheckReport(build_suite(seeds, eps), threshold)
