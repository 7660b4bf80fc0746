"""Visual front-end: 3D convolution stem, per-frame 2D trunk, spatial average
pooling, linear projection to the encoder width."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Linear, Module, Parameter, uniform_init


@dataclass
class FrontendConfig:
    stem_kernel: tuple = (5, 7, 7)
    stem_channels: int = 8
    stem_stride: int = 2  # spatial only; temporal stride is always 1
    trunk: tuple = ((8, 2), (16, 2), (32, 2))  # (channels, stride) per 3x3 stage
    d_model: int = 32
    input_size: int = 16

    def validate(self) -> None:
        kt, kh, kw = self.stem_kernel
        if kt % 2 == 0:
            raise ConfigError(f"stem temporal kernel must be odd, got {kt}")
        if self.input_size < 1 or self.spatial_out() < 1:
            raise ConfigError("trunk reduces the frame below 1x1")

    def spatial_out(self) -> int:
        kh = self.stem_kernel[1]
        size = (self.input_size + 2 * (kh // 2) - kh) // self.stem_stride + 1
        for _, s in self.trunk:
            size = (size + 2 - 3) // s + 1
        return size


class VisualFrontend(Module):
    def __init__(self, rng, cfg: FrontendConfig):
        cfg.validate()
        self.cfg = cfg
        kt, kh, kw = cfg.stem_kernel
        self.stem_weight = uniform_init(rng, (kt, kh, kw, 1, cfg.stem_channels), kt * kh * kw)
        self.stem_bias = Parameter(np.zeros(cfg.stem_channels))
        self.trunk_weights = []
        self.trunk_biases = []
        c_in = cfg.stem_channels
        for i, (c_out, _) in enumerate(cfg.trunk):
            w = uniform_init(rng, (3, 3, c_in, c_out), 9 * c_in)
            b = Parameter(np.zeros(c_out))
            setattr(self, f"trunk{i}_weight", w)
            setattr(self, f"trunk{i}_bias", b)
            self.trunk_weights.append(w)
            self.trunk_biases.append(b)
            c_in = c_out
        self.proj = Linear(rng, c_in, cfg.d_model)

    def __call__(self, video) -> T.Tensor:
        """video: (B, T, H, W) array or tensor -> features (B, T, d_model)."""
        x = T.as_tensor(video)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        B, Tn, H, W = x.shape
        kt, kh, kw = self.cfg.stem_kernel
        if H < kh // 2 + 1 or W < kw // 2 + 1 or H != self.cfg.input_size or W != self.cfg.input_size:
            raise ShapeError(f"frontend expects {self.cfg.input_size}x{self.cfg.input_size} frames, got {H}x{W}")
        s = self.cfg.stem_stride
        h = T.conv(x.reshape(B, Tn, H, W, 1), self.stem_weight, self.stem_bias,
                   stride=(1, s, s), padding=(kt // 2, kh // 2, kw // 2))
        h = T.relu(h)
        _, _, h2, w2, c = h.shape
        h = h.reshape(B * Tn, h2, w2, c)
        for (_, stride), w, b in zip(self.cfg.trunk, self.trunk_weights, self.trunk_biases):
            h = T.relu(T.conv(h, w, b, stride=stride, padding=1))
        h = h.mean(axis=(1, 2))
        return self.proj(h.reshape(B, Tn, h.shape[-1]))


def frontend_forward(video, frontend: VisualFrontend) -> T.Tensor:
    return frontend(video)
