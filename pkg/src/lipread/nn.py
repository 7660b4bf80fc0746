"""Parameter containers and basic layers.

Initialization: linear and convolution weights are drawn from
U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero; layer-norm gains at
one. Embedding tables use the same uniform law with fan_in = embedding dim.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class; parameters and child modules are discovered from attributes
    (including lists of modules) in assignment order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Parameter]":
        out: OrderedDict[str, Parameter] = OrderedDict()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    out.update(v.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = [k for k in params if k not in state]
        extra = [k for k in state if k not in params]
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {v.shape}")
            p.data = np.ascontiguousarray(v).copy()
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        if bias:
            self.bias = Parameter(np.zeros(d_out))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, rng, n: int, d: int):
        self.weight = uniform_init(rng, (n, d), d)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class FeedForward(Module):
    """LayerNorm -> Linear -> activation -> Linear."""

    def __init__(self, rng, d: int, d_ff: int, activation=T.swish):
        self.norm = LayerNorm(d)
        self.inner = Linear(rng, d, d_ff)
        self.outer = Linear(rng, d_ff, d)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(self.activation(self.inner(self.norm(x))))


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, heads: int):
        if d % heads:
            raise ShapeError(f"d_model {d} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d // heads
        self.query = Linear(rng, d, d)
        self.key = Linear(rng, d, d)
        self.value = Linear(rng, d, d)
        self.out = Linear(rng, d, d)
        self.last_weights = None

    def split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def project_kv(self, x: Tensor):
        return self.split(self.key(x)), self.split(self.value(x))

    def attend(self, q_in: Tensor, k: Tensor, v: Tensor, blocked=None) -> Tensor:
        """q_in: (B, Lq, d) un-projected queries; k, v: (B, h, Lk, d_head).
        ``blocked`` broadcasts to (B, 1, Lq, Lk); True entries get no weight."""
        B, Lq, d = q_in.shape
        q = self.split(self.query(q_in))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        if blocked is not None:
            scores = T.where(blocked, scores, T.MASK_VALUE)
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return self.out(ctx)

    def __call__(self, query: Tensor, memory: Tensor, blocked=None) -> Tensor:
        k, v = self.project_kv(memory)
        return self.attend(query, k, v, blocked)
