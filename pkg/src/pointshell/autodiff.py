"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional backward record (parent tensors
and a closure). Ops build the graph eagerly; ``Tensor.backward()`` walks it
once in reverse topological order. Only the operator set the shell-conv
network needs is provided; there is no general broadcasting and no
higher-order differentiation.

Conventions:

* every op output is checked finite; non-finite values raise DivergenceError;
* interior gradients are cleared at the start of each backward pass, leaf
  gradients accumulate across passes until ``zero_grad``;
* a backward closure hands each parent an array the parent may take
  ownership of (distinct parents never receive the same array object).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DivergenceError, SizeError

_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference / evaluation paths)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise DivergenceError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def backward(self) -> None:
        """Backpropagate from this scalar; repeated calls accumulate leaf grads."""
        if self.data.size != 1:
            raise SizeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def make_op(data, parents, backward) -> Tensor:
    """Create an op-result tensor; `backward(grad)` must push to the parents.

    Public so domain modules can define their own differentiable ops.
    """
    out = Tensor(data)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# operators


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product (m, k) @ (k, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise SizeError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may be broadcast against `a` (bias pattern)."""
    out = a.data + b.data
    if out.shape != a.data.shape:
        raise SizeError(f"add result {out.shape} must keep shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g)
        if not b.requires_grad:
            return
        if b.data.shape == g.shape:
            accumulate(b, g.copy())
        else:
            extra = g.ndim - b.data.ndim
            gb = g.sum(axis=tuple(range(extra))) if extra else g
            axes = tuple(i for i, s in enumerate(b.data.shape) if s == 1 and gb.shape[i] != 1)
            if axes:
                gb = gb.sum(axis=axes, keepdims=True)
            accumulate(b, gb if gb is not g else g.copy())

    return make_op(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 0 at x == 0."""

    def backward(g):
        accumulate(x, (x.data > 0) * g)

    return make_op(np.maximum(x.data, 0), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        accumulate(x, g.reshape(x.data.shape))

    return make_op(x.data.reshape(shape), (x,), backward)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate two tensors along `axis`; off-axis extents must agree."""
    if a.data.ndim != b.data.ndim:
        raise SizeError("concat operands must have equal rank")
    axis = axis % a.data.ndim
    for d in range(a.data.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise SizeError(f"concat off-axis mismatch: {a.shape} vs {b.shape}")
    na = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [na], axis=axis)
        if a.requires_grad:
            accumulate(a, ga)
        if b.requires_grad:
            accumulate(b, gb)

    return make_op(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def maxpool_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max-reduce one axis; backward routes to the first attaining index."""
    axis = axis % x.data.ndim
    if x.shape[axis] < 1:
        raise SizeError("cannot maxpool an empty axis")
    # one scan: gather the max through the argmax indices
    amax = np.argmax(x.data, axis=axis)
    keep = np.expand_dims(amax, axis)
    out = np.take_along_axis(x.data, keep, axis).squeeze(axis)

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, keep, np.expand_dims(g, axis), axis)
        accumulate(x, dx)

    return make_op(out, (x,), backward)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation along the second-to-last axis of x.

    x: (..., S, C_in), kernel: (S_k, C_in, C_out) -> (..., S_out, C_out)
    with S_out = (S - S_k) // stride + 1. No padding.
    """
    sk, cin, cout = kernel.shape
    s = x.shape[-2]
    if x.shape[-1] != cin:
        raise SizeError(f"conv1d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    if sk > s:
        raise SizeError(f"kernel extent {sk} exceeds input extent {s}")
    if stride < 1:
        raise SizeError("stride must be positive")
    s_out = (s - sk) // stride + 1
    out = np.empty(x.shape[:-2] + (s_out, cout), dtype=x.dtype)
    for j in range(s_out):
        seg = x.data[..., j * stride : j * stride + sk, :]
        out[..., j, :] = np.tensordot(seg, kernel.data, axes=([-2, -1], [0, 1]))

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for j in range(s_out):
                dx[..., j * stride : j * stride + sk, :] += np.tensordot(
                    g[..., j, :], kernel.data, axes=([-1], [2])
                )
            accumulate(x, dx)
        if kernel.requires_grad:
            dk = np.zeros_like(kernel.data)
            for j in range(s_out):
                seg = x.data[..., j * stride : j * stride + sk, :]
                dk += (
                    seg.reshape(-1, sk * cin).T @ g[..., j, :].reshape(-1, cout)
                ).reshape(sk, cin, cout)
            accumulate(kernel, dk)

    return make_op(out, (x, kernel), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of x (N, ...) by an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.data)
        flat = dx.reshape(dx.shape[0], -1)
        _scatter_add_rows(flat, idx.ravel(), g.reshape(idx.size, -1))
        accumulate(x, dx)

    return make_op(x.data[idx], (x,), backward)


def take_rows_batch(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x (B, N, ...), idx (B, ...) -> (B, idx.shape[1:], ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    b, n = x.shape[0], x.shape[1]
    if idx.shape[0] != b:
        raise SizeError("batch extents of x and idx differ")
    b_ix = np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1))

    def backward(g):
        dx = np.zeros_like(x.data)
        flat = dx.reshape(b * n, -1)
        flat_idx = (b_ix * n + idx).ravel()
        _scatter_add_rows(flat, flat_idx, g.reshape(flat_idx.size, -1))
        accumulate(x, dx)

    return make_op(x.data[b_ix, idx], (x,), backward)


def _scatter_add_rows(target: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    """target[idx[r]] += values[r], duplicates summed in stable index order."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    sums = np.add.reduceat(values[order], starts, axis=0)
    target[sidx[starts]] += sums


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]; max-shifted for stability."""
    if logits.data.ndim != 2:
        raise SizeError(f"logits must be 2D, got {logits.shape}")
    nrows, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (nrows,):
        raise SizeError(f"expected {nrows} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise SizeError(f"target out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(nrows)
    loss = -logp[rows, targets].mean()

    def backward(g):
        soft = np.exp(logp)
        soft[rows, targets] -= 1.0
        accumulate(logits, soft * (g / nrows))

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def backward(loss: Tensor) -> None:
    """Module-level alias for Tensor.backward."""
    loss.backward()
