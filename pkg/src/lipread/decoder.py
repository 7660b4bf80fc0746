"""Left-to-right and right-to-left transformer decoders.

Both directions share the framing ``<sos> y1 .. yL -> y1 .. yL <eos>``; the
right decoder simply sees the reversed target. Layers are pre-norm: masked
self-attention, cross-attention over the encoder output, feed-forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, uniform_init
from .vocab import SOS_EOS


@dataclass
class DecoderConfig:
    left_layers: int = 2
    right_layers: int = 1
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 128
    max_len: int = 64
    label_smoothing: float = 0.0


class DecoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, ffn_dim: int):
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.src_norm = LayerNorm(d)
        self.src_attn = MultiHeadAttention(rng, d, heads)
        self.ff = FeedForward(rng, d, ffn_dim, activation=T.relu)

    def __call__(self, x, memory, self_blocked, src_blocked):
        h = self.self_norm(x)
        x = x + self.self_attn(h, h, self_blocked)
        x = x + self.src_attn(self.src_norm(x), memory, src_blocked)
        return x + self.ff(x)


@dataclass
class DecoderState:
    """Incremental state after consuming ``<sos> + prefix``.

    keys/values: per layer, cached self-attention projections (N, h, t, d_head).
    """

    prefix: tuple
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)


class TransformerDecoder(Module):
    def __init__(self, rng, cfg: DecoderConfig, vocab_size: int, num_layers: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = Embedding(rng, vocab_size, cfg.d_model)
        self.position = uniform_init(rng, (cfg.max_len, cfg.d_model), cfg.d_model)
        self.layers = [DecoderLayer(rng, cfg.d_model, cfg.heads, cfg.ffn_dim) for _ in range(num_layers)]
        self.final_norm = LayerNorm(cfg.d_model)
        self.output = Linear(rng, cfg.d_model, vocab_size)

    def embed_inputs(self, ids: np.ndarray) -> T.Tensor:
        L = ids.shape[1]
        if L > self.cfg.max_len:
            raise ShapeError(f"decoder input of length {L} exceeds max_len {self.cfg.max_len}")
        return self.embed(ids) + self.position[:L]

    def forward_embedded(self, x: T.Tensor, memory: T.Tensor, in_lengths, mem_lengths=None) -> T.Tensor:
        """Teacher-forced log-probs (B, L, V) from already-embedded inputs."""
        B, L, _ = x.shape
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        pad = ~(np.arange(L)[None, :] < np.asarray(in_lengths)[:, None])
        self_blocked = causal[None, None] | pad[:, None, None, :]
        src_blocked = None
        if mem_lengths is not None:
            Tm = memory.shape[1]
            src_blocked = ~(np.arange(Tm)[None, :] < np.asarray(mem_lengths)[:, None])[:, None, None, :]
        for layer in self.layers:
            x = layer(x, memory, self_blocked, src_blocked)
        return T.log_softmax(self.output(self.final_norm(x)), axis=-1)

    def teacher_forced(self, memory: T.Tensor, targets, mem_lengths=None):
        """Return (log-probs (B, L+1, V), next-token ids (B, L+1), step mask)."""
        B = len(targets)
        lens = np.array([len(y) for y in targets])
        if (lens < 1).any():
            raise ContractError("decoder targets must be non-empty")
        Lp = int(lens.max()) + 1
        inp = np.full((B, Lp), SOS_EOS, dtype=np.int64)
        out = np.full((B, Lp), SOS_EOS, dtype=np.int64)
        for i, y in enumerate(targets):
            inp[i, 1 : len(y) + 1] = y
            out[i, : len(y)] = y
        mask = np.arange(Lp)[None, :] < (lens + 1)[:, None]
        logp = self.forward_embedded(self.embed_inputs(inp), memory, lens + 1, mem_lengths)
        return logp, out, mask

    def loss(self, memory: T.Tensor, targets, mem_lengths=None) -> T.Tensor:
        """Per-utterance -sum log p over the L+1 steps (eos included), shape (B,)."""
        return self.sequence_nll(*self.teacher_forced(memory, targets, mem_lengths))

    def sequence_nll(self, logp: T.Tensor, out: np.ndarray, mask: np.ndarray) -> T.Tensor:
        nll = -T.pick(logp, out)
        eps = self.cfg.label_smoothing
        if eps > 0:
            nll = (1.0 - eps) * nll - eps * logp.mean(axis=-1)
        return (nll * mask.astype(np.float64)).sum(axis=1)

    # ---------------------------------------------------------------- inference

    def precompute_memory(self, memory: T.Tensor) -> list:
        """Cross-attention keys/values for every layer."""
        return [layer.src_attn.project_kv(memory) for layer in self.layers]

    def step(self, tokens: np.ndarray, position: int, keys: list, values: list, mem_kv: list):
        """Advance N hypotheses by one input token each.

        tokens: (N,) input ids at ``position``; keys/values: per-layer caches
        (N, h, position, d_head) or None when position == 0. Returns
        (log-probs (N, V), new keys, new values).
        """
        with T.no_grad():
            N = tokens.shape[0]
            if position >= self.cfg.max_len:
                raise ShapeError(f"decoder position {position} exceeds max_len {self.cfg.max_len}")
            x = self.embed(tokens[:, None]) + self.position[position : position + 1]
            new_k, new_v = [], []
            for i, layer in enumerate(self.layers):
                h = layer.self_norm(x)
                k_new, v_new = layer.self_attn.project_kv(h)
                if keys and keys[i] is not None:
                    k_all = np.concatenate([keys[i], k_new.data], axis=2)
                    v_all = np.concatenate([values[i], v_new.data], axis=2)
                else:
                    k_all, v_all = k_new.data, v_new.data
                new_k.append(k_all)
                new_v.append(v_all)
                x = x + layer.self_attn.attend(h, T.Tensor(k_all), T.Tensor(v_all))
                mk, mv = mem_kv[i]
                if mk.shape[0] != N:
                    mk = T.Tensor(np.broadcast_to(mk.data, (N,) + mk.shape[1:]))
                    mv = T.Tensor(np.broadcast_to(mv.data, (N,) + mv.shape[1:]))
                x = x + layer.src_attn.attend(layer.src_norm(x), mk, mv)
                x = x + layer.ff(x)
            logp = T.log_softmax(self.output(self.final_norm(x)), axis=-1)
        return logp.data[:, 0], new_k, new_v


def decoder_step(decoder: TransformerDecoder, x_e, prefix, state: DecoderState | None = None, mem_kv=None):
    """Next-token log-probs after ``<sos> + prefix`` for one hypothesis.

    ``state`` must hold ``prefix[:-1]`` (None for the empty prefix). Returns
    (log-probs (V,), state for ``prefix``).
    """
    prefix = tuple(int(t) for t in prefix)
    if state is None:
        if prefix:
            raise ContractError("a non-empty prefix needs the state of its parent")
        state = DecoderState(())
        token = SOS_EOS
    else:
        if state.prefix != prefix[:-1] or not prefix:
            raise ContractError(f"decoder state is for {state.prefix}, cannot extend to {prefix}")
        token = prefix[-1]
    if mem_kv is None:
        memory = x_e if isinstance(x_e, T.Tensor) else T.Tensor(np.asarray(x_e)[None] if np.ndim(x_e) == 2 else x_e)
        with T.no_grad():
            mem_kv = decoder.precompute_memory(memory)
    logp, keys, values = decoder.step(np.array([token]), len(prefix), state.keys, state.values, mem_kv)
    return logp[0], DecoderState(prefix, keys, values)


def left_decoder_forward(decoder: TransformerDecoder, x_e: T.Tensor, y, mem_lengths=None):
    """(L_left per utterance, step log-probs) for targets ``y`` (list of lists)."""
    logp, out, mask = decoder.teacher_forced(x_e, y, mem_lengths)
    return decoder.sequence_nll(logp, out, mask), logp


def right_decoder_forward(decoder: TransformerDecoder, x_e: T.Tensor, y, mem_lengths=None):
    rev = [list(reversed(list(t))) for t in y]
    return left_decoder_forward(decoder, x_e, rev, mem_lengths)


def attn_loss(l_left, l_right, alpha: float):
    """(1 - alpha) * L_left + alpha * L_right."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * l_left + alpha * l_right
