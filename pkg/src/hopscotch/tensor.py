"""Dense tensors with reverse-mode automatic differentiation.

A small tape engine on top of numpy arrays: every operation returns a new
Tensor that remembers its parents and one vector-Jacobian closure per parent.
``backward`` walks the tape in reverse topological order and accumulates
gradients into the leaves that require them.

float32 is the working precision; float64 exists for finite-difference
gradient checking, where 32-bit noise would swamp the comparison. Values and
graph structure are immutable after construction; only leaf ``grad`` buffers
are written, and only by ``backward``.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyMaskWarning(UserWarning):
    """A masked loss was requested with no scored positions."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An immutable dense array plus its position in the autodiff graph.

    ``op`` names the producing operation ("leaf" for user-constructed
    tensors); ``parents`` holds the input tensors and ``_vjps`` one closure
    per parent mapping the output gradient to that parent's gradient.
    Parents are only retained when a gradient path exists, so evaluation
    under ``no_grad`` keeps no graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray):
            if dtype is None:
                dtype = data.dtype if data.dtype in _FLOAT_DTYPES else np.float32
            arr = np.ascontiguousarray(data, dtype=dtype)
        else:
            arr = np.array(data, dtype=np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents = ()
        self._vjps = ()

    @classmethod
    def _from_op(cls, data, op, parents, vjps):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t.parents = tuple(parents)
            t._vjps = tuple(vjps)
        else:
            t.requires_grad = False
            t.parents = ()
            t._vjps = ()
        t.op = op
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every grad-requiring leaf.

    ``root`` must be scalar-valued. Leaf gradients reachable from this graph
    are reset before accumulation; fan-out within the graph accumulates
    additively. Interior gradients live only for the duration of the pass.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward called on a tensor with no gradient path")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        if not node.parents:
            node.grad = None

    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in zip(node.parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, np.float32)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data
    return Tensor._from_op(
        data,
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, np.float32)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data
    return Tensor._from_op(
        data,
        "mul",
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a = _as_tensor(a, np.float32)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from exc
    return Tensor._from_op(
        data,
        "matmul",
        (a, b),
        (
            lambda g: _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape),
            lambda g: _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape),
        ),
    )


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = t.data.shape
    return Tensor._from_op(
        t.data.reshape(shape), "reshape", (t,), (lambda g: g.reshape(orig),)
    )


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(t.data, axes), "transpose", (t,), (lambda g: np.transpose(g, inverse),)
    )


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = int(ids.flat[int(np.argmax((ids < 0) | (ids >= n_rows)))])
        raise IndexError(f"embedding id {bad} out of range [0, {n_rows})")
    data = table.data[ids]

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return buf

    return Tensor._from_op(data, "embedding", (table,), (vjp,))


def masked_fill(t: Tensor, keep, fill: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``fill`` (no grad through them)."""
    keep = np.asarray(keep, dtype=bool)
    data = np.where(keep, t.data, t.dtype.type(fill))
    return Tensor._from_op(data, "masked_fill", (t,), (lambda g: _unbroadcast(g * keep, t.data.shape),))


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)
    shape = t.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Tensor._from_op(data, "sum", (t,), (vjp,))


# ---------------------------------------------------------------------------
# neural-net ops


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return Tensor._from_op(p, "softmax", (x,), (vjp,))


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """y_i = x_i / sqrt(mean(x_i^2) + eps) * gain, along the last axis."""
    if eps <= 0:
        raise ValueError(f"rms_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    y = x.data * r * gain.data

    def vjp_x(g):
        gg = g * gain.data
        return r * gg - x.data * (r**3 / d) * (gg * x.data).sum(axis=-1, keepdims=True)

    def vjp_gain(g):
        lead = tuple(range(x.data.ndim - 1))
        return (g * x.data * r).sum(axis=lead)

    return Tensor._from_op(y, "rms_norm", (x, gain), (vjp_x, vjp_gain))


def silu(x: Tensor) -> Tensor:
    # exp(-|x|) keeps the sigmoid overflow-free on both tails
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    data = x.data * s

    def vjp(g):
        return g * s * (1.0 + x.data * (1.0 - s))

    return Tensor._from_op(data.astype(x.dtype, copy=False), "silu", (x,), (vjp,))


def sequence_nll(logits: Tensor, targets, mask) -> Tensor:
    """Per-row mean negative log likelihood over masked-in positions.

    ``logits`` is [B, T, V]; ``targets`` and ``mask`` are integer arrays of
    shape [B, T]. Returns a Tensor of shape [B]. Every row must have at least
    one scored position.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    if logits.ndim != 3:
        raise ShapeError(f"sequence_nll expects [B, T, V] logits, got {logits.shape}")
    if targets.shape != logits.shape[:2] or mask.shape != logits.shape[:2]:
        raise ShapeError(
            f"sequence_nll: targets {targets.shape} / mask {mask.shape} "
            f"do not match logits {logits.shape}"
        )
    vocab = logits.shape[-1]
    scored = mask > 0
    if scored.any():
        bad = targets[scored]
        if bad.min() < 0 or bad.max() >= vocab:
            raise IndexError(
                f"target id {int(bad[(bad < 0) | (bad >= vocab)][0])} out of range [0, {vocab})"
            )
    counts = scored.sum(axis=-1)
    if (counts == 0).any():
        row = int(np.argmax(counts == 0))
        raise ValueError(f"sequence_nll: row {row} has no scored positions")

    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    e = np.exp(z)
    se = e.sum(axis=-1, keepdims=True)
    logp = np.take_along_axis(z - np.log(se), targets[..., None], axis=-1)[..., 0]
    fmask = scored.astype(logits.dtype)
    rows = (-logp * fmask).sum(axis=-1) / counts.astype(logits.dtype)

    def vjp(g):
        p = e / se
        idx = targets[..., None]
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
        w = (fmask / counts[:, None].astype(logits.dtype)) * g[:, None]
        return p * w[..., None]

    return Tensor._from_op(rows, "sequence_nll", (logits,), (vjp,))


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean NLL over masked-in positions of a single [T, V] logit matrix.

    An all-zero mask yields a zero scalar and an EmptyMaskWarning instead of
    dividing by zero.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    mask = np.asarray(mask)
    if not (mask > 0).any():
        warnings.warn("cross_entropy over an all-zero mask", EmptyMaskWarning)
        return Tensor(np.zeros((), dtype=logits.dtype))
    rows = sequence_nll(
        reshape(logits, (1,) + logits.shape),
        np.asarray(targets, dtype=np.int64)[None, :],
        mask[None, :],
    )
    return reshape(rows, ())
