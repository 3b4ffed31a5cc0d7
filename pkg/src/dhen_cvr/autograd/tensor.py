"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves when a :class:`Tape` is active and at least
one input requires a gradient.  Outside of a tape every op is a plain numpy
computation, which is also how inference runs.

    >>> w = Tensor([3.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_pool(w * w)
    >>> tape.backward(loss)
    >>> w.grad
    array([ 6., -4.])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinity from its inputs."""


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_produced", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class _Entry:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so every input of entry k was
    produced by an earlier entry or is a leaf.  The tape is kept after
    :meth:`backward`, and a second call accumulates gradients again.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class FlopCounter:
    """Counts arithmetic work of ops executed while active.

    Matmul counts 2*m*n*k, every other op one per output element.
    """

    def __init__(self):
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)


_COUNTERS: list[FlopCounter] = []


def _count(n: int) -> None:
    for c in _COUNTERS:
        c.flops += int(n)


def apply_op(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    flops: int | None = None,
) -> Tensor:
    """Wrap a computed array as an op output and record it when needed.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    Custom primitives may be defined through this function.
    """
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    if _COUNTERS:
        _count(out_data.size if flops is None else flops)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.grad = None
    out._produced = False
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        _TAPES[-1].entries.append(_Entry(op, out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` slot."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.entries:
        raise ValueError("tape is empty; run the forward pass inside `with tape:`")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for inp, ig in zip(entry.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._produced:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
            else:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
    if not loss._produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _suffix_ok(a_shape, b_shape) -> bool:
    return b_shape == a_shape or (
        len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape
    )


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible "
                         "(only a trailing-suffix operand may broadcast)")
    b_shape = b.shape
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b_shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _suffix_ok(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are incompatible")
    b_shape = b.shape
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b_shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    k, n = ad.shape[-1], bd.shape[-1]
    flops = 2 * out.size * k
    if b.ndim == 2:
        def vjp(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb
    else:
        def vjp(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb
    return apply_op("matmul", out, (a, b), vjp, flops=flops)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return apply_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return apply_op("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if x.size == 0:
        raise ShapeError("log on empty input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return apply_op("log", out, (a,), lambda g: (g / x,))


def _check_axis(a: Tensor, axis: int, op: str) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError(f"{op} over an empty axis")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` with the biased variance, then scale and shift."""
    axis = _check_axis(x, axis, "layer_norm")
    if (gamma is not None or beta is not None) and axis != x.ndim - 1:
        raise ShapeError("layer_norm scale/shift are only supported on the last axis")
    d = x.shape[axis]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm parameter shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = 1.0 / np.sqrt(var + eps)
    xhat = xc * r
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = [x] + [p for p in (gamma, beta) if p is not None]

    def vjp(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = r * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        res = [dx]
        if gamma is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            res.append(g.reshape(-1, d).sum(axis=0))
        return res

    return apply_op("layer_norm", out, inputs, vjp, flops=8 * xd.size)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-feature normalization over the batch axis of a (B, d) input.

    Train mode normalizes with the unbiased batch variance and updates the
    running statistics in place; eval mode uses the running statistics.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (B, d) input, got {x.shape}")
    n, d = x.shape
    xd = x.data
    if train:
        if n < 2:
            raise ShapeError("batch_norm in train mode needs batch size >= 2 "
                             "(unbiased variance is undefined for one example)")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).sum(axis=0) / (n - 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        r = 1.0 / np.sqrt(var + eps)
        xhat = xc * r
        gd = gamma.data

        def vjp(g):
            dxhat = g * gd
            dx = r * (dxhat - dxhat.mean(axis=0)) - r * xhat * (dxhat * xhat).sum(axis=0) / (n - 1)
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        r = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * r
        gd = gamma.data

        def vjp(g):
            return g * gd * r, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = xhat * gamma.data + beta.data
    return apply_op("batch_norm", out, (x, gamma, beta), vjp, flops=6 * xd.size)


def dropout(x: Tensor, rate: float, train: bool, seed: int | None) -> Tensor:
    """Inverted dropout: eval mode is the identity.

    ``seed=None`` draws fresh entropy, which makes the op nondeterministic.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return apply_op("dropout", x.data, (x,), lambda g: (g,), flops=0)
    rng = np.random.Generator(np.random.Philox(seed))
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    return apply_op("dropout", x.data * factor, (x,), lambda g: (g * factor,))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of a (V, d) table; output shape is ids.shape + (d,)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    v, d = table.shape
    out = table.data[ids]

    def vjp(g):
        flat = ids.reshape(-1)
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(v, flat.size))
        return (np.asarray(scatter @ g.reshape(-1, d)),)

    return apply_op("embedding", out, (table,), vjp, flops=0)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def vjp(g):
        idx = [slice(None)] * nd
        res = []
        for i in range(len(tensors)):
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            res.append(g[tuple(idx)])
        return res

    return apply_op("concat", out, tensors, vjp, flops=0)


def _basic_key(key) -> tuple:
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not (isinstance(k, (slice, int)) or k is Ellipsis):
            raise TypeError("slice only supports basic indexing (ints, slices, ...)")
    return key


def slice_(x: Tensor, key) -> Tensor:
    key = _basic_key(key)
    out = x.data[key]
    if out.size == 0:
        raise ShapeError(f"slice {key} of shape {x.shape} is empty")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return apply_op("slice", np.ascontiguousarray(out), (x,), vjp, flops=0)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from exc
    in_shape = x.shape
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(in_shape),), flops=0)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return apply_op("transpose", out, (x,), lambda g: (np.transpose(g, inv),), flops=0)


def sum_pool(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(x.data.sum())
        shape = x.shape
        return apply_op("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _check_axis(x, axis, "sum_pool")
    out = x.data.sum(axis=axis)
    shape = x.shape
    return apply_op("sum", out, (x,),
                    lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean_pool(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_check_axis(x, axis, "mean_pool")]
    return scale(sum_pool(x, axis), 1.0 / n)


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Elementwise -(y log p + (1-y) log(1-p)) with p = sigmoid(z), stably."""
    y = np.asarray(y, dtype=DTYPE)
    if y.shape != z.shape:
        raise ShapeError(f"labels shape {y.shape} != logits shape {z.shape}")
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    p = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-np.abs(zd))), np.exp(-np.abs(zd)) / (1.0 + np.exp(-np.abs(zd))))
    return apply_op("bce_with_logits", out, (z,), lambda g: (g * (p - y),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Plain-array logistic function without overflow warnings."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def xavier_std(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))
