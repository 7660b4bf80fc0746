"""Training objective combining intermediate CTC, output CTC and attention losses.

    L_inter = mean_k L_inter^k                       (0 when there are no modules)
    L_attn  = (1 - alpha) L_left + alpha L_right
    L       = lam (gamma L_inter + (1 - gamma) L_ctc) + (1 - lam) L_attn
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, TrainingError
from .tensor import Tensor


def _value(v) -> float:
    return float(v.data if isinstance(v, Tensor) else v)


@dataclass
class HyperParams:
    ctc_weight: float = 0.1  # lambda
    inter_weight: float = 0.3  # gamma
    alpha: float = 0.3
    num_interctc: int | None = None  # K; None means "whatever the encoder has"

    def __post_init__(self):
        for name in ("ctc_weight", "inter_weight", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class LossBreakdown:
    ctc: object
    inter_k: list = field(default_factory=list)
    left: object = 0.0
    right: object = 0.0
    inter: object = 0.0
    attn: object = 0.0
    total: object = 0.0

    def as_floats(self) -> dict:
        f = _value
        out = {"ctc": f(self.ctc)}
        for k, v in enumerate(self.inter_k, 1):
            out[f"inter_{k}"] = f(v)
        out.update(inter=f(self.inter), left=f(self.left), right=f(self.right), attn=f(self.attn), total=f(self.total))
        return out

    def log_line(self, **prefix) -> str:
        items = list(prefix.items()) + list(self.as_floats().items())
        return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in items)


def total_intermediate_loss(inter_losses) -> object:
    """Arithmetic mean; an empty list gives 0."""
    inter_losses = list(inter_losses)
    if not inter_losses:
        return 0.0
    acc = inter_losses[0]
    for v in inter_losses[1:]:
        acc = acc + v
    return acc * (1.0 / len(inter_losses))


def total_loss(b: LossBreakdown, hp: HyperParams) -> object:
    """Fill ``b.inter``, ``b.attn`` and ``b.total``; return the total.

    Works on floats or tensors. Raises TrainingError naming any non-finite
    component.
    """
    lam, gamma = hp.ctc_weight, hp.inter_weight
    if not b.inter_k:
        gamma = 0.0
    components = {"ctc": b.ctc, "left": b.left, "right": b.right}
    components.update({f"inter_{k}": v for k, v in enumerate(b.inter_k, 1)})
    for name, v in components.items():
        x = _value(v)
        if not math.isfinite(x):
            raise TrainingError(f"non-finite loss component {name}={x}")
    b.inter = total_intermediate_loss(b.inter_k)
    b.attn = (1.0 - hp.alpha) * b.left + hp.alpha * b.right
    b.total = lam * (gamma * b.inter + (1.0 - gamma) * b.ctc) + (1.0 - lam) * b.attn
    return b.total
