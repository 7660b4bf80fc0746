"""CTC loss, collapse map, best-path decoding, and incremental prefix scoring.

All recursions run in log space over the blank-interleaved label lattice
``(blank, y1, blank, y2, ..., yL, blank)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .vocab import BLANK

NEG_INF = -np.inf


def collapse(path: Sequence[int], blank: int = BLANK) -> list:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def is_feasible(num_frames: int, y: Sequence[int]) -> bool:
    repeats = sum(1 for a, b in zip(y, y[1:]) if a == b)
    return num_frames >= len(y) + repeats


@dataclass
class CtcLossResult:
    loss: float
    grad: np.ndarray  # d loss / d logprobs, shape (T, V)
    feasible: bool = True


def _lattice(targets: np.ndarray, lengths: np.ndarray, blank: int):
    """Extended labels (B, S) and the skip-transition mask."""
    B, L = targets.shape
    S = 2 * L + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    ext[:, 1::2] = targets
    skip = np.zeros((B, S), dtype=bool)
    if L > 1:
        skip[:, 3::2] = targets[:, 1:] != targets[:, :-1]
    valid = np.arange(S)[None, :] < (2 * lengths[:, None] + 1)
    skip &= valid
    return ext, skip, valid


def ctc_forward_backward(logprobs: np.ndarray, targets: np.ndarray, input_lengths, target_lengths, blank: int = BLANK):
    """Batched CTC.

    logprobs: (B, T, V); targets: (B, L) padded. Returns (log p(y|x) per item,
    gradient of -log p w.r.t. logprobs). Infeasible items get -inf and a zero
    gradient.
    """
    logprobs = np.asarray(logprobs, dtype=np.float64)
    B, Tm, V = logprobs.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(B, -1)
    in_len = np.asarray(input_lengths, dtype=np.int64)
    tg_len = np.asarray(target_lengths, dtype=np.int64)
    ext, skip, valid = _lattice(targets, tg_len, blank)
    S = ext.shape[1]
    bidx = np.arange(B)[:, None]
    emit = logprobs[bidx[:, :, None], np.arange(Tm)[None, :, None], ext[:, None, :]]  # (B, T, S)

    alpha = np.full((Tm, B, S), NEG_INF)
    a = np.full((B, S), NEG_INF)
    a[:, 0] = emit[:, 0, 0]
    if S > 1:
        a[:, 1] = np.where(tg_len > 0, emit[:, 0, 1], NEG_INF)
    a[~valid] = NEG_INF
    alpha[0] = a
    with np.errstate(invalid="ignore"):
        for t in range(1, Tm):
            prev = alpha[t - 1]
            s1 = np.full_like(prev, NEG_INF)
            s1[:, 1:] = prev[:, :-1]
            s2 = np.full_like(prev, NEG_INF)
            s2[:, 2:] = prev[:, :-2]
            s2[~skip] = NEG_INF
            cur = np.logaddexp(np.logaddexp(prev, s1), s2) + emit[:, t]
            cur[~valid] = NEG_INF
            alpha[t] = cur

    last = in_len - 1
    a_last = alpha[last, np.arange(B)]
    end1 = a_last[np.arange(B), 2 * tg_len]
    end2 = np.where(tg_len > 0, a_last[np.arange(B), np.maximum(2 * tg_len - 1, 0)], NEG_INF)
    logp = np.logaddexp(end1, end2)

    beta = np.full((Tm, B, S), NEG_INF)
    b = np.full((B, S), NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(Tm - 1, -1, -1):
            init = np.full((B, S), NEG_INF)
            init[np.arange(B), 2 * tg_len] = 0.0
            has = tg_len > 0
            init[np.arange(B)[has], 2 * tg_len[has] - 1] = 0.0
            if t < Tm - 1:
                nxt = b + emit[:, t + 1]
                r1 = np.full_like(nxt, NEG_INF)
                r1[:, :-1] = nxt[:, 1:]
                r2 = np.full_like(nxt, NEG_INF)
                r2[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], NEG_INF)
                rec = np.logaddexp(np.logaddexp(nxt, r1), r2)
            else:
                rec = np.full((B, S), NEG_INF)
            b = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, NEG_INF))
            b[~valid] = NEG_INF
            beta[t] = b

    feasible = np.isfinite(logp)
    grad = np.zeros((B, Tm, V))
    if feasible.any():
        with np.errstate(invalid="ignore", over="ignore"):
            occ = np.exp(alpha.transpose(1, 0, 2) + beta.transpose(1, 0, 2) - logp[:, None, None])
        occ[~feasible] = 0.0
        occ = np.nan_to_num(occ, nan=0.0)
        onehot = np.zeros((B, S, V))
        onehot[bidx, np.arange(S)[None, :], ext] = 1.0
        onehot[~valid] = 0.0
        grad = -np.einsum("bts,bsv->btv", occ, onehot)
    return logp, grad


def ctc_loss(logprobs, y: Sequence[int], blank: int = BLANK) -> CtcLossResult:
    """-log p(y | logprobs) for a single (T, V) log-probability matrix."""
    logprobs = np.asarray(logprobs, dtype=np.float64)
    if logprobs.ndim != 2:
        raise ShapeError(f"logprobs must be T x V, got {logprobs.shape}")
    y = [int(v) for v in y]
    if blank in y:
        raise ContractError("target must not contain blank")
    Tn = logprobs.shape[0]
    if not is_feasible(Tn, y):
        return CtcLossResult(float("inf"), np.zeros_like(logprobs), False)
    tg = np.asarray([y if y else [blank]], dtype=np.int64)
    logp, grad = ctc_forward_backward(logprobs[None], tg, [Tn], [len(y)], blank)
    return CtcLossResult(float(-logp[0]), grad[0], bool(np.isfinite(logp[0])))


def ctc_loss_batch(logprobs: T.Tensor, targets: Sequence[Sequence[int]], input_lengths, blank: int = BLANK):
    """Differentiable per-utterance CTC losses, shape (B,).

    Infeasible items contribute zero loss and zero gradient; their indices are
    returned as the second element.
    """
    B = logprobs.shape[0]
    lengths = np.asarray([len(y) for y in targets], dtype=np.int64)
    L = max(1, int(lengths.max()) if B else 1)
    tg = np.full((B, L), blank, dtype=np.int64)
    for i, y in enumerate(targets):
        tg[i, : len(y)] = y
    logp, grad = ctc_forward_backward(logprobs.data, tg, input_lengths, lengths, blank)
    bad = ~np.isfinite(logp)
    loss = np.where(bad, 0.0, -logp)

    def back(g):
        return (grad * g[:, None, None],)

    return T.custom_op(loss, (logprobs,), back, "ctc_loss"), np.flatnonzero(bad)


def ctc_greedy_decode(logprobs, blank: int = BLANK) -> list:
    """Collapse of the per-frame argmax (ties go to the lowest id)."""
    return collapse(np.argmax(np.asarray(logprobs), axis=-1), blank)


# ------------------------------------------------------------------ prefix scoring


@dataclass
class CtcPrefixState:
    """Forward variables of one prefix g.

    r_nonblank[t] / r_blank[t]: log prob that frames 0..t emit g and the last
    frame is a non-blank / blank. ``score`` is log psi(g), the log probability
    that the full frame sequence starts with g.
    """

    prefix: tuple
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    score: float


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities over one utterance's log-probs."""

    def __init__(self, logprobs, blank: int = BLANK, eos: int | None = None):
        self.x = np.asarray(logprobs, dtype=np.float64)
        if self.x.ndim != 2:
            raise ShapeError(f"logprobs must be T x V, got {self.x.shape}")
        self.blank = blank
        self.eos = eos
        self.T = self.x.shape[0]

    def initial_state(self) -> CtcPrefixState:
        rb = np.cumsum(self.x[:, self.blank])
        return CtcPrefixState((), np.full(self.T, NEG_INF), rb, 0.0)

    def final_score(self, state: CtcPrefixState) -> float:
        """log p(g) for the complete label sequence g."""
        return float(np.logaddexp(state.r_nonblank[-1], state.r_blank[-1]))

    def extend(self, states: Sequence[CtcPrefixState], candidates: np.ndarray):
        """Score extensions of each state by each candidate token.

        Returns (scores (N, C), r_nonblank (N, C, T), r_blank (N, C, T)).
        ``eos`` candidates get the terminal mass of the parent prefix.
        """
        N = len(states)
        cand = np.asarray(candidates, dtype=np.int64)
        if cand.ndim == 1:
            cand = np.broadcast_to(cand, (N, cand.size))
        C = cand.shape[1]
        Tn = self.T
        rn_g = np.stack([s.r_nonblank for s in states])  # (N, T)
        rb_g = np.stack([s.r_blank for s in states])
        last = np.array([s.prefix[-1] if s.prefix else -1 for s in states])
        empty = np.array([not s.prefix for s in states])
        same = cand == last[:, None]  # (N, C)
        xc = self.x[:, cand].transpose(1, 2, 0)  # (N, C, T)
        xb = self.x[:, self.blank]
        total = np.logaddexp(rn_g, rb_g)
        # phi[t]: mass available to start emitting c at t+1
        phi = np.where(same[:, :, None], rb_g[:, None, :], total[:, None, :])
        rn = np.full((N, C, Tn), NEG_INF)
        rb = np.full((N, C, Tn), NEG_INF)
        rn[:, :, 0] = np.where(empty[:, None], xc[:, :, 0], NEG_INF)
        psi = rn[:, :, 0].copy()
        for t in range(1, Tn):
            rn[:, :, t] = np.logaddexp(rn[:, :, t - 1], phi[:, :, t - 1]) + xc[:, :, t]
            rb[:, :, t] = np.logaddexp(rb[:, :, t - 1], rn[:, :, t - 1]) + xb[t]
            psi = np.logaddexp(psi, phi[:, :, t - 1] + xc[:, :, t])
        if self.eos is not None:
            is_eos = cand == self.eos
            if is_eos.any():
                psi = np.where(is_eos, total[:, -1][:, None], psi)
        if self.blank in np.unique(cand):
            psi = np.where(cand == self.blank, NEG_INF, psi)
        return psi, rn, rb

    def step(self, state: CtcPrefixState, prefix: Sequence[int], c: int):
        """Return (score increment, new state) for extending ``prefix`` by ``c``.

        ``state`` must belong to ``prefix``.
        """
        if tuple(state.prefix) != tuple(prefix):
            raise ContractError(f"stale CTC state: state is for {state.prefix}, asked for {tuple(prefix)}")
        psi, rn, rb = self.extend([state], np.array([c]))
        score = float(psi[0, 0])
        new = CtcPrefixState(tuple(prefix) + (int(c),), rn[0, 0], rb[0, 0], score)
        if score == NEG_INF:
            return NEG_INF, new  # also avoids -inf - -inf once the parent is impossible
        return score - state.score, new


def ctc_prefix_score(logprobs, prefix: Sequence[int], c: int, state: CtcPrefixState | None = None, eos: int | None = None):
    """Functional form of :meth:`CtcPrefixScorer.step`; ``state=None`` means
    the initial state of the empty prefix."""
    scorer = CtcPrefixScorer(logprobs, eos=eos)
    if state is None:
        if prefix:
            raise ContractError("a non-empty prefix needs its cached state")
        state = scorer.initial_state()
    return scorer.step(state, prefix, c)
