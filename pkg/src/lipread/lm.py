"""Character LSTM language model for shallow fusion.

Cell equations (per layer, input x, previous h and c)::

    i = sigmoid(x W_i + h U_i + b_i)     input gate
    f = sigmoid(x W_f + h U_f + b_f)     forget gate
    g = tanh(x W_g + h U_g + b_g)        candidate
    o = sigmoid(x W_o + h U_o + b_o)     output gate
    c' = f * c + i * g
    h' = o * tanh(c')

The four gates are computed with one fused matrix of width 4*hidden in the
order (i, f, g, o). Sequences are framed as ``<sos> y1 .. yL <eos>`` with the
shared boundary id. The blank logit is replaced by a large negative constant
before normalization, so blank gets no probability mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import Embedding, Linear, Module, Parameter, uniform_init
from .rng import make_rng
from .vocab import BLANK, SOS_EOS


@dataclass
class RnnLmConfig:
    vocab_size: int = 15
    layers: int = 2
    hidden: int = 64
    embed_dim: int = 32


@dataclass(frozen=True)
class LmState:
    """Per-layer (h, c) after consuming ``prefix``; arrays have shape (hidden,)."""

    prefix: tuple
    h: tuple
    c: tuple


class LstmLayer(Module):
    def __init__(self, rng, d_in: int, hidden: int):
        self.input_weight = uniform_init(rng, (d_in, 4 * hidden), hidden)
        self.recurrent_weight = uniform_init(rng, (hidden, 4 * hidden), hidden)
        self.bias = Parameter(np.zeros(4 * hidden))
        self.hidden = hidden

    def cell(self, x, h, c):
        n = self.hidden
        gates = x @ self.input_weight + h @ self.recurrent_weight + self.bias
        i = T.sigmoid(gates[:, :n])
        f = T.sigmoid(gates[:, n : 2 * n])
        g = T.tanh(gates[:, 2 * n : 3 * n])
        o = T.sigmoid(gates[:, 3 * n :])
        c = f * c + i * g
        h = o * T.tanh(c)
        return h, c


class RnnLM(Module):
    def __init__(self, cfg: RnnLmConfig, seed: int = 0):
        if cfg.vocab_size < 3 or cfg.layers < 1:
            raise ConfigError("LM needs a vocabulary with the special tokens and >= 1 layer")
        rng = make_rng(seed, "lm-init")
        self.cfg = cfg
        self.embed = Embedding(rng, cfg.vocab_size, cfg.embed_dim)
        dims = [cfg.embed_dim] + [cfg.hidden] * cfg.layers
        self.layers = [LstmLayer(rng, dims[i], cfg.hidden) for i in range(cfg.layers)]
        self.output = Linear(rng, cfg.hidden, cfg.vocab_size)
        self._blank_mask = np.zeros(cfg.vocab_size, dtype=bool)
        self._blank_mask[BLANK] = True

    def _logprobs(self, h_top) -> T.Tensor:
        logits = T.where(self._blank_mask, self.output(h_top), T.MASK_VALUE)
        return T.log_softmax(logits, axis=-1)

    def forward(self, inputs: np.ndarray) -> T.Tensor:
        """Teacher-forced log-probs (B, L, V) for input ids (B, L)."""
        B, L = inputs.shape
        emb = self.embed(inputs)
        n = self.cfg.hidden
        hs = [T.Tensor(np.zeros((B, n))) for _ in self.layers]
        cs = [T.Tensor(np.zeros((B, n))) for _ in self.layers]
        outs = []
        for t in range(L):
            x = emb[:, t]
            for k, layer in enumerate(self.layers):
                hs[k], cs[k] = layer.cell(x, hs[k], cs[k])
                x = hs[k]
            outs.append(x)
        top = T.stack(outs, axis=1)
        return self._logprobs(top)

    def sequence_nll(self, seqs) -> tuple:
        """(summed NLL tensor, number of predicted tokens) over ``<sos> y <eos>``."""
        B = len(seqs)
        lens = np.array([len(s) for s in seqs])
        Lp = int(lens.max()) + 1
        inp = np.full((B, Lp), SOS_EOS, dtype=np.int64)
        out = np.full((B, Lp), SOS_EOS, dtype=np.int64)
        for i, s in enumerate(seqs):
            inp[i, 1 : len(s) + 1] = s
            out[i, : len(s)] = s
        mask = (np.arange(Lp)[None, :] < (lens + 1)[:, None]).astype(np.float64)
        logp = self.forward(inp)
        nll = -(T.pick(logp, out) * mask).sum()
        return nll, int(mask.sum())

    # ------------------------------------------------------------- inference

    def initial_state(self) -> LmState:
        z = tuple(np.zeros(self.cfg.hidden) for _ in self.layers)
        return LmState((), z, z)

    def step_batch(self, h: list, c: list, tokens: np.ndarray):
        """h, c: per-layer (N, hidden) arrays. Returns (log-probs (N, V), h', c')."""
        if (np.asarray(tokens) == BLANK).any():
            raise ContractError("the LM cannot consume blank")
        with T.no_grad():
            x = self.embed(np.asarray(tokens, dtype=np.int64))
            new_h, new_c = [], []
            for k, layer in enumerate(self.layers):
                hk, ck = layer.cell(x, T.Tensor(h[k]), T.Tensor(c[k]))
                new_h.append(hk.data)
                new_c.append(ck.data)
                x = hk
            logp = self._logprobs(x).data.copy()
        logp[:, BLANK] = -np.inf
        return logp, new_h, new_c


def lm_score_step(lm: RnnLM, state: LmState, token: int):
    """Consume ``token``; return (next-token log-probs (V,), new state).

    Feed ``SOS_EOS`` to the initial state to get the first-token distribution.
    """
    token = int(token)
    if token == BLANK:
        raise ContractError("the LM cannot consume blank")
    h = [x[None] for x in state.h]
    c = [x[None] for x in state.c]
    logp, h, c = lm.step_batch(h, c, np.array([token]))
    prefix = state.prefix + (token,)
    return logp[0], LmState(prefix, tuple(x[0] for x in h), tuple(x[0] for x in c))


def perplexity(lm: RnnLM, seqs) -> float:
    with T.no_grad():
        nll, n = lm.sequence_nll(seqs)
    return math.exp(float(nll.data) / n)


def lm_train(lm: RnnLM, seqs, epochs: int, lr: float = 3e-3, batch_size: int = 64, seed: int = 0, clip: float = 5.0):
    """Adam on next-token cross-entropy. Returns per-epoch training perplexity
    (measured after each epoch; entry 0 is before training)."""
    from .train import Adam  # local import: train depends on the model modules

    seqs = [list(s) for s in seqs]
    if not seqs:
        raise ContractError("cannot train a language model on an empty corpus")
    params = lm.parameters()
    opt = Adam(params, lr=lr, betas=(0.9, 0.98), eps=1e-9, clip_norm=clip)
    history = [perplexity(lm, seqs)]
    for epoch in range(epochs):
        order = make_rng(seed, "lm-epoch", epoch).permutation(len(seqs))
        for start in range(0, len(seqs), batch_size):
            batch = [seqs[i] for i in order[start : start + batch_size]]
            lm.zero_grad()
            nll, n = lm.sequence_nll(batch)
            (nll * (1.0 / len(batch))).backward()
            opt.step(lr)
        history.append(perplexity(lm, seqs))
    return history
