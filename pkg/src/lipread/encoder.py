"""Conformer encoder with intermediate-CTC residual conditioning.

After every ``interctc_interval`` blocks (never after the last one) the block
output x is mapped to a frame-level token distribution
``z = softmax(W1 x + b1)``, and the next block receives ``x + W2 z + b2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, uniform_init


@dataclass
class ConformerConfig:
    num_blocks: int = 6
    d_model: int = 32
    heads: int = 4
    conv_kernel: int = 7
    ffn_dim: int = 128
    interctc_interval: int = 2
    max_len: int = 512

    @property
    def num_interctc(self) -> int:
        if self.interctc_interval <= 0:
            return 0
        return (self.num_blocks - 1) // self.interctc_interval

    @property
    def interctc_blocks(self) -> list:
        """1-based indices of the blocks followed by a residual module."""
        return [self.interctc_interval * (k + 1) for k in range(self.num_interctc)]


@dataclass
class IntermediatePrediction:
    z: T.Tensor  # (B, T, V) probabilities
    logprobs: T.Tensor  # log z, fed to the CTC loss
    module_index: int  # k, 1-based
    block_index: int  # l, 1-based


@dataclass
class EncoderOutput:
    x_e: T.Tensor
    intermediates: list = field(default_factory=list)
    lengths: np.ndarray | None = None


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """(B, T) bool, True on valid frames."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


class ConvModule(Module):
    def __init__(self, rng, d: int, kernel: int):
        if kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd, got {kernel}")
        self.norm = LayerNorm(d)
        self.pointwise_in = Linear(rng, d, 2 * d)
        self.depthwise_weight = uniform_init(rng, (kernel, d), kernel)
        self.depthwise_bias = Parameter(np.zeros(d))
        self.depthwise_norm = LayerNorm(d)
        self.pointwise_out = Linear(rng, d, d)
        self.kernel = kernel

    def __call__(self, x: T.Tensor, valid: np.ndarray | None) -> T.Tensor:
        h = T.glu(self.pointwise_in(self.norm(x)), axis=-1)
        if valid is not None:
            h = h * valid[:, :, None].astype(np.float64)
        h = T.depthwise_conv1d(h, self.depthwise_weight, self.depthwise_bias, padding=self.kernel // 2)
        h = T.swish(self.depthwise_norm(h))
        return self.pointwise_out(h)


class ConformerBlock(Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, LayerNorm."""

    def __init__(self, rng, cfg: ConformerConfig):
        d = cfg.d_model
        self.ff1 = FeedForward(rng, d, cfg.ffn_dim)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, cfg.heads)
        self.conv = ConvModule(rng, d, cfg.conv_kernel)
        self.ff2 = FeedForward(rng, d, cfg.ffn_dim)
        self.final_norm = LayerNorm(d)
        self.d_model = d

    def __call__(self, x: T.Tensor, valid: np.ndarray | None = None) -> T.Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"block expects width {self.d_model}, got shape {x.shape}")
        blocked = None if valid is None else ~valid[:, None, None, :]
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, blocked)
        x = x + self.conv(x, valid)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class InterCtcResidual(Module):
    def __init__(self, rng, d: int, vocab_size: int):
        self.to_vocab = Linear(rng, d, vocab_size)
        self.from_vocab = Linear(rng, vocab_size, d)

    def __call__(self, x_out: T.Tensor):
        """Return (z, log z, next block input)."""
        logp = T.log_softmax(self.to_vocab(x_out), axis=-1)
        z = T.exp(logp)
        return z, logp, x_out + self.from_vocab(z)


class ConformerEncoder(Module):
    def __init__(self, rng, cfg: ConformerConfig, vocab_size: int):
        self.cfg = cfg
        self.position = uniform_init(rng, (cfg.max_len, cfg.d_model), cfg.d_model)
        self.blocks = [ConformerBlock(rng, cfg) for _ in range(cfg.num_blocks)]
        self.interctc = [InterCtcResidual(rng, cfg.d_model, vocab_size) for _ in range(cfg.num_interctc)]

    def __call__(self, features: T.Tensor, lengths=None) -> EncoderOutput:
        B, Tn, d = features.shape
        if d != self.cfg.d_model:
            raise ShapeError(f"encoder expects width {self.cfg.d_model}, got {features.shape}")
        if Tn > self.cfg.max_len:
            raise ShapeError(f"sequence of {Tn} frames exceeds max_len {self.cfg.max_len}")
        valid = None if lengths is None else padding_mask(lengths, Tn)
        x = features + self.position[:Tn]
        after = {b: k for k, b in enumerate(self.cfg.interctc_blocks)}
        inter = []
        for i, block in enumerate(self.blocks, 1):
            x = block(x, valid)
            if i in after:
                k = after[i]
                z, logp, x = self.interctc[k](x)
                inter.append(IntermediatePrediction(z, logp, k + 1, i))
        return EncoderOutput(x, inter, None if lengths is None else np.asarray(lengths))


def encoder_forward(features: T.Tensor, encoder: ConformerEncoder, lengths=None) -> EncoderOutput:
    return encoder(features, lengths)
