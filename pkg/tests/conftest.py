import itertools
import math
import os
import sys

# single-threaded BLAS so repeated runs are bit-identical
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from lipread.ctc import collapse


def random_logprobs(rng, T, V):
    """Log of a random row-stochastic T x V matrix."""
    p = rng.dirichlet(np.ones(V), size=T)
    return np.log(p)


def brute_force_ctc(logprobs, y):
    """-log of the summed probability of every path collapsing to ``y``."""
    T, V = logprobs.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == list(y):
            total += math.exp(sum(logprobs[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def full_sequence_scores(x_e, ctc_lp, decoder, lm, y):
    """(attn, ctc, lm) of a complete hypothesis ``y`` from full, non-incremental passes."""
    from lipread import tensor as T
    from lipread.ctc import ctc_loss
    from lipread.vocab import SOS_EOS

    y = list(y)
    inp = np.array([[SOS_EOS] + y])
    with T.no_grad():
        logp = decoder.forward_embedded(decoder.embed_inputs(inp), T.Tensor(x_e[None]), [len(y) + 1]).data[0]
    attn = float(logp[np.arange(len(y) + 1), y + [SOS_EOS]].sum())
    ctc = -ctc_loss(ctc_lp, y).loss
    lm_score = 0.0
    if lm is not None and y:
        with T.no_grad():
            lp = lm.forward(inp[:, :-1]).data[0]
        lm_score = float(lp[np.arange(len(y)), y].sum())
    return attn, ctc, lm_score


def exhaustive_best(x_e, ctc_lp, decoder, lm, cfg, tokens, max_len):
    """Best (score, y) over every sequence of ``tokens`` up to ``max_len``; ties go to the smaller y."""
    from lipread.decode import combine

    best = None
    for L in range(max_len + 1):
        for y in itertools.product(tokens, repeat=L):
            a, c, l = full_sequence_scores(x_e, ctc_lp, decoder, lm, y)
            s = combine(a, c, l, cfg, L)
            if best is None or s > best[0] or (s == best[0] and y < best[1]):
                best = (s, y)
    return best


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
