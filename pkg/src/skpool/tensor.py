"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Only the operations the keypoint pooling network needs are provided. Every
tensor is a matrix; scalars are 1x1. Leaf tensors created with
``requires_grad=True`` accumulate gradients across ``backward`` calls until
:func:`zero_grads` is called. Intermediate gradients live only for the
duration of one ``backward`` sweep, so calling ``backward`` twice on the same
loss adds the leaf gradients twice.

Forward matrix products go through ``np.einsum`` rather than BLAS: BLAS
kernels treat tail rows differently, so a row's result can depend on its
position in the matrix, which would break bitwise permutation invariance.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    InvalidLabelError,
    InvalidSegmentsError,
    NumericError,
    UsageError,
)

_tape_counter = itertools.count()


class Tensor:
    """A float64 matrix that may participate in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape_id = next(_tape_counter)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.tape_id = next(_tape_counter)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Segments:
    """Row-to-group assignment driving the pooled operations.

    ``group_of[i]`` is the 0-based group id of row ``i``; every group in
    ``range(num_groups)`` must own at least one row.
    """

    def __init__(self, group_of, num_groups: int | None = None):
        g = np.asarray(group_of, dtype=np.int64).reshape(-1)
        if num_groups is None:
            num_groups = int(g.max()) + 1 if g.size else 0
        if g.size and (g.min() < 0 or g.max() >= num_groups):
            raise InvalidSegmentsError(
                f"group ids must lie in [0, {num_groups}), got range [{g.min()}, {g.max()}]"
            )
        counts = np.bincount(g, minlength=num_groups) if num_groups else np.zeros(0, np.int64)
        if np.any(counts == 0):
            empty = np.flatnonzero(counts == 0)[:5].tolist()
            raise InvalidSegmentsError(f"empty groups {empty} (of {num_groups})")
        self.group_of = g
        self.num_groups = int(num_groups)
        self.counts = counts
        # stable sort keeps ascending row order inside each group
        self.order = np.argsort(g, kind="stable")
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)

    @classmethod
    def single(cls, n: int) -> Segments:
        return cls(np.zeros(n, dtype=np.int64), 1)

    def __len__(self) -> int:
        return self.group_of.size

    def __repr__(self) -> str:
        return f"Segments(rows={len(self)}, groups={self.num_groups})"


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, w: Tensor) -> Tensor:
    if a.cols != w.rows:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {w.shape}")
    out = np.einsum("nd,ed->ne", a.data, np.ascontiguousarray(w.data.T))

    def backward(g):
        ga = g @ w.data.T if a.requires_grad else None
        gw = a.data.T @ g if w.requires_grad else None
        return ga, gw

    return _node(out, (a, w), backward)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise {op} needs equal shapes: {a.shape} vs {b.shape}")
    if op == "add":
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if op == "mul":
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    raise UsageError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1xD row vector (bias) to every row of ``x``."""
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"row broadcast needs 1x{x.cols}, got {b.shape}")
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat needs equal row counts: {a.shape} vs {b.shape}")
    d1 = a.cols
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(out, (a, b), lambda g: (g[:, :d1], g[:, d1:]))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.cols:
        raise DimensionError(f"row stacking needs equal widths: {a.shape} vs {b.shape}")
    n1 = a.rows
    out = np.concatenate([a.data, b.data], axis=0)
    return _node(out, (a, b), lambda g: (g[:n1], g[n1:]))


def _check_segments(x: Tensor, s: Segments) -> None:
    if len(s) != x.rows:
        raise DimensionError(f"segments cover {len(s)} rows but tensor has {x.rows}")
    if s.num_groups == 0:
        raise InvalidSegmentsError("segments have no groups")


def segment_max_pool(x: Tensor, s: Segments) -> Tensor:
    """Channel-wise max over each group: (N x D) -> (num_groups x D).

    The backward pass routes each output gradient to a single row, the lowest
    row index attaining the maximum.
    """
    _check_segments(x, s)
    xs = x.data[s.order]
    out = np.maximum.reduceat(xs, s.starts, axis=0)
    if not x.requires_grad:
        return _node(out, (x,), None)

    n = x.rows
    hit = xs == out[s.group_of[s.order]]
    cand = np.where(hit, s.order[:, None], n)
    argmax = np.minimum.reduceat(cand, s.starts, axis=0)
    cols = np.broadcast_to(np.arange(x.cols), argmax.shape)

    def backward(g):
        gx = np.zeros_like(x.data)
        # rows of distinct groups are disjoint, so (argmax, col) pairs never collide
        gx[argmax, cols] = g
        return (gx,)

    return _node(out, (x,), backward)


def segment_expand(pooled: Tensor, s: Segments) -> Tensor:
    """Broadcast one row per group back to every member row: out[i] = pooled[group_of[i]]."""
    if pooled.rows != s.num_groups:
        raise DimensionError(f"expand needs {s.num_groups} rows, got {pooled.rows}")
    out = pooled.data[s.group_of]

    def backward(g):
        return (np.add.reduceat(g[s.order], s.starts, axis=0),)

    return _node(out, (pooled,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.cols
    if d < 1 or eps <= 0:
        raise UsageError(f"layer_norm needs D >= 1 and eps > 0 (D={d}, eps={eps})")
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError(f"gain/bias must be 1x{d}, got {gain.shape} and {bias.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("layer_norm received non-finite input")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        gx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(out, (x, gain, bias), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # np.where keeps zeros positive; x * mask would give -0.0 on negative inputs
    out = np.where(pos, x.data, 0.0)
    return _node(out, (x,), lambda g: (np.where(pos, g, 0.0),))


activation = relu


def sum_all(x: Tensor) -> Tensor:
    return _node(np.array([[x.data.sum()]]), (x,), lambda g: (np.full_like(x.data, g[0, 0]),))


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -sum_c label_c * log softmax(logits)_c. Labels may be soft."""
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if lab.ndim == 1:
        lab = lab.reshape(1, -1)
    if lab.shape != logits.shape:
        raise DimensionError(f"labels {lab.shape} do not match logits {logits.shape}")
    sums = lab.sum(axis=1)
    if np.any(lab < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.flatnonzero((np.abs(sums - 1.0) > 1e-6) | np.any(lab < 0, axis=1))[0])
        raise InvalidLabelError(f"label row {bad} is not a probability vector (sum={sums[bad]!r})")
    b = logits.rows
    logp = log_softmax(logits.data)
    loss = -(lab * logp).sum() / b

    def backward(g):
        return (g[0, 0] * (np.exp(logp) - lab) / b,)

    return _node(np.array([[loss]]), (logits,), backward)


# ---------------------------------------------------------------------------
# tape


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.shape != (1, 1):
        raise UsageError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar loss from the current values of ``params``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on vanishing gradients from dominating.
    """
    zero_grads(params)
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = f().item()
            flat[k] = orig - eps
            down = f().item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grads(params)
    return worst
