"""Dense tensors with tape-based reverse-mode differentiation on numpy arrays.

Every operation returns a fresh tensor and records its parents plus a
backward closure; ``Tensor.backward`` replays the implicit tape once in
reverse topological order, accumulating gradients additively at fan-out.
The graph is rebuilt on every forward pass.

Broadcasting is deliberately narrow: shapes are right-aligned and only
size-1 axes may expand. Anything else raises ``DimensionError``.

Compute dtype is float32 by default; float64 is available per tensor for
finite-difference oracle work.
"""

from __future__ import annotations

import contextlib
import warnings

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_np_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise ConfigError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'")
    d = np.dtype(dtype)
    if d not in _DTYPE_NAMES:
        raise ConfigError(f"unsupported dtype {d}; use f32 or f64")
    return d


class Tensor:
    """N-dimensional float array plus an optional gradient tape node.

    ``data`` is a row-major contiguous numpy array and is treated as
    immutable by all ops; optimizers may rewrite parameter ``data``
    between graph lifetimes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, dtype=None, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        dt = _as_np_dtype(dtype) if dtype is not None else None
        arr = np.array(data, dtype=dt if dt is not None else None)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward_fn = None

    @classmethod
    def _make(cls, data, parents=(), backward_fn=None):
        """Internal fast path: wrap op output without copying."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _DTYPE_NAMES[self.data.dtype]

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- gradient machinery ------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Propagate gradients from this scalar to every tensor that
        requires grad, including intermediates. Each node is visited
        exactly once, in reverse topological order."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {list(self.shape)}"
            )
        if not self.requires_grad:
            raise ContractError("backward on a tensor that is not on a recorded graph")
        order = toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape & reduction methods ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return tensor_abs(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)

    def repeat(self, reps, axis):
        return repeat(self, reps, axis)

    def narrow(self, axis, start, stop):
        return narrow(self, axis, start, stop)


def toposort(root: Tensor) -> list[Tensor]:
    """Tape order of the graph below ``root`` (parents before children)."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def graph_tensors(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root`` (alias of the tape order)."""
    return toposort(root)


def zero_grads(root: Tensor) -> None:
    """Reset the gradient of every tensor in ``root``'s graph."""
    for t in toposort(root):
        t.grad = None


# -- helpers -----------------------------------------------------------------


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._make(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _broadcast_shapes(sa, sb, op: str):
    """Right-aligned broadcasting with size-1 expansion only."""
    out = []
    for i in range(1, max(len(sa), len(sb)) + 1):
        da = sa[-i] if i <= len(sa) else 1
        db = sb[-i] if i <= len(sb) else 1
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise DimensionError(
                f"{op}: shapes {list(sa)} and {list(sb)} are not broadcastable"
            )
    return tuple(reversed(out))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of right-aligned expansion)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, op_name, forward, da_fn, db_fn):
    a = a if isinstance(a, Tensor) else Tensor._make(np.asarray(a))
    b = b if isinstance(b, Tensor) else _coerce(b, a)
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    _check_same_dtype(a, b, op_name)
    _broadcast_shapes(a.shape, b.shape, op_name)
    out_data = forward(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da_fn(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db_fn(g, a.data, b.data), b.shape))

    return Tensor._make(out_data, (a, b), bwd)


# -- elementwise ops ----------------------------------------------------------


def add(a, b):
    b = _coerce(b, a) if not isinstance(b, Tensor) else b
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    b = _coerce(b, a) if not isinstance(b, Tensor) else b
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    b = _coerce(b, a) if not isinstance(b, Tensor) else b
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    b = _coerce(b, a) if not isinstance(b, Tensor) else b
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._make(-a.data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return Tensor._make(out_data, (a,), bwd)


def tensor_abs(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return Tensor._make(np.abs(a.data), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; output rows sum to 1 along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - inner) * y)

    return Tensor._make(y, (a,), bwd)


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axis, keepdims).astype(a.data.dtype))

    return Tensor._make(np.asarray(out_data), (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            expanded = _expand_reduced(g, a.shape, axis, keepdims)
            a._accumulate((expanded / count).astype(a.data.dtype))

    return Tensor._make(np.asarray(out_data), (a,), bwd)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._make(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute: axes {list(axes)} invalid for rank {a.ndim}")
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def repeat(a: Tensor, reps: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``reps`` times (interleaved)."""
    out_data = np.repeat(a.data, reps, axis=axis)
    axis_n = axis % a.ndim

    def bwd(g):
        if a.requires_grad:
            shape = a.shape[:axis_n] + (a.shape[axis_n], reps) + a.shape[axis_n + 1:]
            a._accumulate(g.reshape(shape).sum(axis=axis_n + 1))

    return Tensor._make(out_data, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis_n = axis % a.ndim
    if not (0 <= start < stop <= a.shape[axis_n]):
        raise DimensionError(
            f"narrow: [{start}:{stop}] out of range for axis {axis} of {list(a.shape)}"
        )
    index = tuple([slice(None)] * axis_n + [slice(start, stop)])
    out_data = np.ascontiguousarray(a.data[index])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a._accumulate(full)

    return Tensor._make(out_data, (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    axis_n = axis % tensors[0].ndim
    sizes = [t.shape[axis_n] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = tuple([slice(None)] * axis_n + [slice(lo, hi)])
                t._accumulate(np.ascontiguousarray(g[index]))

    return Tensor._make(out_data, tuple(tensors), bwd)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports [..., m, k] @ [k, p] (shared weight) and
    [..., m, k] @ [..., k, p] with identical leading batch dims."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: ranks must be >= 2, got {list(a.shape)} x {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {list(a.shape)} x {list(b.shape)}")

    if b.ndim == 2:
        out_data = a.data @ b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                p = g.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, p))

        return Tensor._make(out_data, (a, b), bwd)

    if a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        out_data = a.data @ b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

        return Tensor._make(out_data, (a, b), bwd)

    raise DimensionError(f"matmul: unsupported shapes {list(a.shape)} x {list(b.shape)}")


# -- embedding ----------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: id out of range for table with {table.shape[0]} rows"
        )
    out_data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(gt)

    return Tensor._make(np.ascontiguousarray(out_data), (table,), bwd)


# -- normalization ------------------------------------------------------------


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2, last) + eps) * weight."""
    if eps < 0:
        raise ConfigError(f"rms_norm: eps must be >= 0, got {eps}")
    d = x.shape[-1]
    if weight.ndim != 1 or weight.shape[0] != d:
        raise DimensionError(
            f"rms_norm: weight shape {list(weight.shape)} does not match last axis of {list(x.shape)}"
        )
    _check_same_dtype(x, weight, "rms_norm")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    out_data = x.data * inv * weight.data

    def bwd(g):
        if x.requires_grad:
            gw = g * weight.data
            inner = (gw * x.data).sum(axis=-1, keepdims=True)
            x._accumulate(gw * inv - x.data * (inv ** 3) * inner / d)
        if weight.requires_grad:
            contrib = g * x.data * inv
            weight._accumulate(contrib.reshape(-1, d).sum(axis=0))

    return Tensor._make(out_data, (x, weight), bwd)


# -- rotary position encoding -------------------------------------------------


def rope(x: Tensor, base: float) -> Tensor:
    """Rotate consecutive value pairs by position-dependent angles.

    Expects layout [..., seq, heads, head_dim]; position runs along axis -3
    and pair j of the last axis turns by pos * base^(-2j/head_dim).
    """
    if x.ndim < 3:
        raise DimensionError(f"rope: rank must be >= 3, got {list(x.shape)}")
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigError(f"rope: head_dim must be even, got {head_dim}")
    seq = x.shape[-3]
    dt = x.data.dtype
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(seq, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.cos(angles)[:, None, :].astype(dt)  # [seq, 1, head_dim/2]
    sin = np.sin(angles)[:, None, :].astype(dt)

    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        if x.requires_grad:
            ge = g[..., 0::2]
            go = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            x._accumulate(gx)

    return Tensor._make(out_data, (x,), bwd)


# -- language-model loss -------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int) -> Tensor:
    """Mean negative log-softmax over non-ignored positions.

    ``logits`` is [N, V]; ``targets`` is an int array of N token ids, each
    < V or equal to ``ignore_id``. All-ignored input warns and yields 0.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {list(logits.shape)}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: targets shape {list(targets.shape)} does not match logits rows {logits.shape[0]}"
        )
    vocab = logits.shape[1]
    valid = targets != ignore_id
    bad = valid & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise IndexError(
            f"cross_entropy: target {int(targets[bad][0])} out of range for vocab {vocab}"
        )
    count = int(valid.sum())
    if count == 0:
        warnings.warn("cross_entropy: every position ignored; loss is 0", RuntimeWarning)

        def bwd_zero(g):
            if logits.requires_grad:
                logits._accumulate(np.zeros_like(logits.data))

        return Tensor._make(np.asarray(0.0, dtype=logits.data.dtype), (logits,), bwd_zero)

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    rows = np.nonzero(valid)[0]
    picked = logits.data[rows, targets[rows]]
    loss = (lse[rows] - picked).mean()

    def bwd(g):
        if logits.requires_grad:
            p = e / e.sum(axis=1, keepdims=True)
            grad = np.zeros_like(logits.data)
            grad[rows] = p[rows]
            grad[rows, targets[rows]] -= 1.0
            logits._accumulate(grad * (g / count))

    return Tensor._make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)
