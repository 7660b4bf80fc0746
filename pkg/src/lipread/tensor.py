"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new :class:`Tensor` and, when any input
requires a gradient, records a :class:`TapeNode` holding the inputs and a
closure that maps the output gradient to input gradients. ``backward`` walks
the recorded graph in reverse topological order.

Broadcasting follows numpy rules; gradients are summed back to input shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

MASK_VALUE = -1e30  # finite stand-in for -inf in masked logits

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    """One recorded operation: its name, inputs, and backward rule."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``
        with ``requires_grad``. ``self`` must be a scalar."""
        if self.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones((), dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            node = t.node
            if node is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of operation ``op``.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    # a finite sum implies finite entries; only fall back to the full scan on overflow
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if grad_enabled():
        inputs = tuple(inputs)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = TapeNode(op, inputs, backward_fn)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return custom_op(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return custom_op(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericalError("log of a non-positive value")
    ad = a.data
    return custom_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return custom_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return custom_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "swish")


def glu(a, axis: int = -1) -> Tensor:
    """Split ``a`` in two halves along ``axis``; return first * sigmoid(second)."""
    a = as_tensor(a)
    if a.shape[axis] % 2:
        raise ShapeError(f"glu needs an even extent on axis {axis}, got shape {a.shape}")
    x1, x2 = np.split(a.data, 2, axis=axis)
    s = _sigmoid(x2)

    def back(g):
        return (np.concatenate([g * s, g * x1 * s * (1.0 - s)], axis=axis),)

    return custom_op(x1 * s, (a,), back, "glu")


def where(mask: np.ndarray, a, value: float) -> Tensor:
    """Entries of ``a`` where ``mask`` is False, ``value`` where True."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return custom_op(np.where(mask, value, a.data), (a,), lambda g: (g * keep,), "masked_fill")


masked_fill = where


# ------------------------------------------------------------------ reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return custom_op(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size / max(out.size, 1)
    return custom_op(out, (a,), lambda g: (_expand_reduced(g / n, shape, axis, keepdims),), "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericalError("softmax of non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericalError("log_softmax of non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (a,), back, "log_softmax")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then affine."""
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    inputs = [a]
    out = xhat
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        out = xhat * gamma.data + beta.data
        inputs += [gamma, beta]
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = g if gamma is None else g * gamma.data
        dx = None
        if a.requires_grad:
            dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        if gamma is None:
            return (dx,)
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(out, inputs, back, "layer_norm")


# ------------------------------------------------------------------ structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op(ad @ bd, (a, b), back, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return custom_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def back(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return custom_op(np.asarray(a.data[idx]), (a,), back, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    cuts = np.cumsum(sizes)[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding: ids outside [0, {V})")

    def back(g):
        z = np.zeros(weight.shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (z,)

    return custom_op(weight.data[ids], (weight,), back, "embedding")


def pick(a, ids) -> Tensor:
    """Gather ``a[..., ids[...]]`` along the last axis (one id per row)."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} does not match rows of {a.shape}")
    lead = np.indices(ids.shape, sparse=True)
    idx = tuple(lead) + (ids,)
    shape = a.shape

    def back(g):
        z = np.zeros(shape)
        z[idx] = g
        return (z,)

    return custom_op(a.data[idx], (a,), back, "pick")


# --------------------------------------------------------------- convolutions


def conv(x, w, b=None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation in channels-last layout.

    x: (N, *spatial, C_in); w: (*kernel, C_in, C_out); b: (C_out,).
    ``stride`` and ``padding`` are ints or per-spatial-axis tuples.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {w.shape}")
    stride = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * nd if isinstance(padding, int) else tuple(padding)
    k = w.shape[:nd]
    cin, cout = w.shape[-2], w.shape[-1]
    xp = np.pad(x.data, [(0, 0)] + [(p, p) for p in padding] + [(0, 0)])
    full = xp.shape[1:-1]
    out_sp = tuple((full[i] - k[i]) // stride[i] + 1 for i in range(nd))
    if min(out_sp) < 1:
        raise ShapeError(f"conv: input {x.shape} too small for kernel {k} with padding {padding}")
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    win = win[(slice(None),) + tuple(slice(0, o) for o in out_sp)]
    # (N, *out, C_in, *k) -> (N, *out, *k, C_in)
    perm = (0,) + tuple(range(1, nd + 1)) + tuple(range(nd + 2, 2 * nd + 2)) + (nd + 1,)
    cols = win.transpose(perm).reshape(-1, int(np.prod(k)) * cin)
    wmat = w.data.reshape(-1, cout)
    out = cols @ wmat
    out = out.reshape((x.shape[0],) + out_sp + (cout,))
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape((x.shape[0],) + out_sp + k + (cin,))
            gxp = np.zeros(xp.shape)
            for off in np.ndindex(*k):
                sl = (slice(None),) + tuple(
                    slice(off[i], off[i] + stride[i] * (out_sp[i] - 1) + 1, stride[i]) for i in range(nd)
                )
                gxp[sl] += gcols[(slice(None),) * (nd + 1) + off]
            inner = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[1:-1]))
            gx = gxp[inner]
        res = [gx, gw]
        if b is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return custom_op(out, inputs, back, "conv")


def depthwise_conv1d(x, w, b=None, padding: int = 0) -> Tensor:
    """Per-channel temporal convolution. x: (B, T, C); w: (k, C); b: (C,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[0]
    xp = np.pad(x.data, [(0, 0), (padding, padding), (0, 0)])
    T_out = xp.shape[1] - k + 1
    if T_out < 1:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} too short for kernel {k}")
    out = np.zeros((x.shape[0], T_out, x.shape[2]))
    for j in range(k):
        out += xp[:, j : j + T_out] * w.data[j]
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs.append(b)

    def back(g):
        gw = np.stack([(xp[:, j : j + T_out] * g).sum(axis=(0, 1)) for j in range(k)]) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[:, j : j + T_out] += g * w.data[j]
            gx = gxp[:, padding : padding + x.shape[1]]
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 1)))
        return tuple(res)

    return custom_op(out, inputs, back, "depthwise_conv1d")
