"""One-pass joint CTC/attention beam search with LM shallow fusion.

A hypothesis with prefix g is ranked by

    (1 - ctc_weight) * attn(g) + ctc_weight * ctc(g) + lm_weight * lm(g)

where attn and lm are summed step log-probs and ctc(g) is the CTC prefix log
probability (replaced by the full-sequence log probability once ``<eos>`` is
appended). Extending a prefix can only lower each component, so the search
stops as soon as the best finished hypothesis outscores every live one.

Each step pre-selects ``ceil(beam * preselect_factor)`` candidate tokens per
hypothesis by attention score, scores them fully, and keeps the ``beam`` best
extensions overall; extensions ending in ``<eos>`` leave the beam as finished
hypotheses. Ties are broken by the lexicographically smaller prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctc import CtcPrefixScorer, CtcPrefixState
from .decoder import TransformerDecoder
from .errors import ConfigError, ContractError
from .lm import RnnLM
from .vocab import BLANK, SOS_EOS, UNK


@dataclass
class DecodeConfig:
    ctc_weight: float = 0.3
    lm_weight: float = 0.1
    beam_size: int = 40
    max_len: int | None = None  # None: number of encoder frames
    preselect_factor: float = 1.5
    length_bonus: float = 0.0
    lm_eos: bool = False  # add the LM's <eos> log-prob when finishing

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if self.lm_weight < 0:
            raise ConfigError(f"lm_weight must be >= 0, got {self.lm_weight}")


def combine(attn: float, ctc: float, lm: float, cfg: DecodeConfig, length: int = 0) -> float:
    """Weighted score; zero-weight terms are skipped so -inf stays harmless."""
    s = 0.0
    if cfg.ctc_weight < 1.0:
        s += (1.0 - cfg.ctc_weight) * attn
    if cfg.ctc_weight > 0.0:
        s += cfg.ctc_weight * ctc
    if cfg.lm_weight > 0.0:
        s += cfg.lm_weight * lm
    return s + cfg.length_bonus * length


@dataclass
class BeamHypothesis:
    prefix: tuple
    attn: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    score: float = 0.0
    finished: bool = False
    ctc_state: CtcPrefixState | None = field(default=None, repr=False)
    dec_keys: list = field(default=None, repr=False)
    dec_values: list = field(default=None, repr=False)
    attn_next: np.ndarray = field(default=None, repr=False)
    lm_h: list = field(default=None, repr=False)
    lm_c: list = field(default=None, repr=False)
    lm_next: np.ndarray = field(default=None, repr=False)


@dataclass
class DecodeResult:
    tokens: tuple
    nbest: list


def score_breakdown(hyp: BeamHypothesis, cfg: DecodeConfig) -> tuple:
    """(attn, ctc, lm, combined) of a finished hypothesis."""
    if not hyp.finished:
        raise ContractError("score breakdown needs a finished hypothesis")
    return hyp.attn, hyp.ctc, hyp.lm, combine(hyp.attn, hyp.ctc, hyp.lm, cfg, len(hyp.prefix))


def output_tokens(vocab_size: int) -> np.ndarray:
    """Ids a hypothesis may emit besides <eos>: everything but the specials."""
    return np.array([i for i in range(vocab_size) if i not in (BLANK, UNK, SOS_EOS)], dtype=np.int64)


def joint_decode(x_e, ctc_logprobs, decoder: TransformerDecoder, lm: RnnLM | None, cfg: DecodeConfig) -> DecodeResult:
    """Beam search over one utterance.

    x_e: encoder output (T, d); ctc_logprobs: (T, V) from the output CTC layer.
    """
    cfg.validate()
    x_e = np.asarray(getattr(x_e, "data", x_e), dtype=np.float64)
    if x_e.ndim == 3:
        x_e = x_e[0]
    ctc_logprobs = np.asarray(ctc_logprobs, dtype=np.float64)
    if not np.isfinite(x_e).all():
        raise ContractError("encoder output must be finite")
    V = decoder.vocab_size
    Tn = x_e.shape[0]
    max_len = Tn if cfg.max_len is None else cfg.max_len
    max_len = min(max_len, decoder.cfg.max_len - 1)
    use_lm = lm is not None and cfg.lm_weight > 0.0
    allowed = np.sort(np.concatenate([output_tokens(V), [SOS_EOS]]))
    k_pre = min(len(allowed), math.ceil(cfg.beam_size * cfg.preselect_factor))

    scorer = CtcPrefixScorer(ctc_logprobs, eos=SOS_EOS)
    with T.no_grad():
        mem_kv = decoder.precompute_memory(T.Tensor(x_e[None]))
    att0, k0, v0 = decoder.step(np.array([SOS_EOS]), 0, None, None, mem_kv)
    root = BeamHypothesis((), ctc_state=scorer.initial_state(), attn_next=att0[0],
                          dec_keys=[k[0] for k in k0], dec_values=[v[0] for v in v0])
    if use_lm:
        st = lm.initial_state()
        lm0, h0, c0 = lm.step_batch([h[None] for h in st.h], [c[None] for c in st.c], np.array([SOS_EOS]))
        root.lm_next, root.lm_h, root.lm_c = lm0[0], [h[0] for h in h0], [c[0] for c in c0]
    root.score = combine(0.0, 0.0, 0.0, cfg)

    live = [root]
    ended = []
    for length in range(max_len + 1):
        if not live:
            break
        N = len(live)
        att = np.stack([h.attn_next for h in live])
        if length == max_len:
            cand = np.full((N, 1), SOS_EOS, dtype=np.int64)
        else:
            sub = att[:, allowed]
            order = np.argsort(-sub, axis=1, kind="stable")[:, :k_pre]
            cand = allowed[order]
        psi, rn, rb = scorer.extend([h.ctc_state for h in live], cand)

        entries = []
        for n, h in enumerate(live):
            for j, c in enumerate(cand[n]):
                c = int(c)
                a = h.attn + att[n, c]
                l = h.lm
                if use_lm and (c != SOS_EOS or cfg.lm_eos):
                    l = l + h.lm_next[c]
                ctc = float(psi[n, j])
                new_len = length if c == SOS_EOS else length + 1
                s = combine(a, ctc, l, cfg, new_len)
                if math.isnan(s):
                    s = -math.inf
                key = h.prefix + (c,)
                entries.append((-s, key, n, j, c, a, ctc, l, s))
        entries.sort(key=lambda e: (e[0], e[1]))
        chosen = entries[: cfg.beam_size]

        grow = []
        for _, key, n, j, c, a, ctc, l, s in chosen:
            if s == -math.inf:
                continue
            parent = live[n]
            if c == SOS_EOS:
                ended.append(BeamHypothesis(parent.prefix, a, ctc, l, s, finished=True))
            else:
                grow.append((parent, n, j, c, a, ctc, l, s))

        if not grow:
            live = []
            break
        tokens = np.array([g[3] for g in grow], dtype=np.int64)
        keys = [np.stack([g[0].dec_keys[i] for g in grow]) for i in range(len(decoder.layers))]
        vals = [np.stack([g[0].dec_values[i] for g in grow]) for i in range(len(decoder.layers))]
        att_new, keys, vals = decoder.step(tokens, length + 1, keys, vals, mem_kv)
        if use_lm:
            hs = [np.stack([g[0].lm_h[i] for g in grow]) for i in range(len(lm.layers))]
            cs = [np.stack([g[0].lm_c[i] for g in grow]) for i in range(len(lm.layers))]
            lm_new, hs, cs = lm.step_batch(hs, cs, tokens)
        live = []
        for m, (parent, n, j, c, a, ctc, l, s) in enumerate(grow):
            prefix = parent.prefix + (c,)
            hyp = BeamHypothesis(
                prefix, a, ctc, l, s,
                ctc_state=CtcPrefixState(prefix, rn[n, j], rb[n, j], ctc),
                dec_keys=[k[m] for k in keys], dec_values=[v[m] for v in vals],
                attn_next=att_new[m],
            )
            if use_lm:
                hyp.lm_next, hyp.lm_h, hyp.lm_c = lm_new[m], [h[m] for h in hs], [c_[m] for c_ in cs]
            live.append(hyp)
        if ended and cfg.length_bonus <= 0.0:
            best_end = max(e.score for e in ended)
            if best_end >= max(h.score for h in live):
                break

    ended.sort(key=lambda e: (-e.score, e.prefix))
    nbest = ended[: cfg.beam_size]
    best = nbest[0].prefix if nbest else ()
    return DecodeResult(best, nbest)


def greedy_attention_decode(x_e, decoder: TransformerDecoder, max_len: int | None = None) -> tuple:
    """Left-decoder argmax decoding over the same output set as the beam search."""
    x_e = np.asarray(getattr(x_e, "data", x_e), dtype=np.float64)
    if x_e.ndim == 3:
        x_e = x_e[0]
    max_len = x_e.shape[0] if max_len is None else max_len
    max_len = min(max_len, decoder.cfg.max_len - 1)
    allowed = np.sort(np.concatenate([output_tokens(decoder.vocab_size), [SOS_EOS]]))
    with T.no_grad():
        mem_kv = decoder.precompute_memory(T.Tensor(x_e[None]))
    att, keys, vals = decoder.step(np.array([SOS_EOS]), 0, None, None, mem_kv)
    out = []
    while len(out) < max_len:
        c = int(allowed[np.argmax(att[0, allowed])])
        if c == SOS_EOS:
            break
        out.append(c)
        att, keys, vals = decoder.step(np.array([c]), len(out), keys, vals, mem_kv)
    return tuple(out)
