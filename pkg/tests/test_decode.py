import math

import numpy as np
import pytest

from conftest import exhaustive_best, full_sequence_scores, random_logprobs
from lipread.ctc import ctc_greedy_decode
from lipread.decode import DecodeConfig, combine, greedy_attention_decode, joint_decode, output_tokens, score_breakdown
from lipread.decoder import DecoderConfig, TransformerDecoder
from lipread.errors import ConfigError, ContractError
from lipread.lm import RnnLM, RnnLmConfig
from lipread.rng import make_rng

V = 7  # blank, unk, sos/eos + 4 output tokens


def tiny_models(seed, sharpen=4.0):
    rng = make_rng(seed, "decode-test")
    dec = TransformerDecoder(rng, DecoderConfig(d_model=8, heads=2, ffn_dim=16, max_len=8), V, 2)
    dec.output.weight.data = dec.output.weight.data * sharpen
    lm = RnnLM(RnnLmConfig(vocab_size=V, layers=1, hidden=8, embed_dim=8), seed)
    lm.output.weight.data = lm.output.weight.data * sharpen
    x_e = rng.normal(size=(6, 8))
    ctc_lp = random_logprobs(rng, 6, V)
    return dec, lm, x_e, ctc_lp


def test_output_tokens_skip_specials():
    assert output_tokens(V).tolist() == [3, 4, 5, 6]


def test_combine_skips_zero_weights():
    cfg = DecodeConfig(ctc_weight=0.0, lm_weight=0.0)
    assert combine(-1.5, -math.inf, -math.inf, cfg) == -1.5
    cfg = DecodeConfig(ctc_weight=1.0, lm_weight=0.0)
    assert combine(-math.inf, -2.0, 0.0, cfg) == -2.0
    cfg = DecodeConfig(ctc_weight=0.25, lm_weight=0.5)
    assert combine(-1.0, -2.0, -4.0, cfg) == pytest.approx(0.75 * -1.0 + 0.25 * -2.0 + 0.5 * -4.0)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("weights", [(0.3, 0.1), (0.0, 0.0), (0.7, 0.5)])
def test_beam_matches_exhaustive_search(seed, weights):
    dec, lm, x_e, ctc_lp = tiny_models(seed)
    cfg = DecodeConfig(ctc_weight=weights[0], lm_weight=weights[1], beam_size=128, max_len=3)
    res = joint_decode(x_e, ctc_lp, dec, lm, cfg)
    score, y = exhaustive_best(x_e, ctc_lp, dec, lm, cfg, range(3, V), 3)
    assert res.tokens == y
    assert res.nbest[0].score == pytest.approx(score, abs=1e-9)


def test_greedy_equivalence_with_attention_only_beam_one():
    for seed in range(10):
        dec, lm, x_e, ctc_lp = tiny_models(seed, sharpen=2.0)
        cfg = DecodeConfig(ctc_weight=0.0, lm_weight=0.0, beam_size=1, max_len=5)
        res = joint_decode(x_e, ctc_lp, dec, lm, cfg)
        assert res.tokens == greedy_attention_decode(x_e, dec, max_len=5)


def test_lm_ignored_when_weight_zero():
    dec, lm, x_e, ctc_lp = tiny_models(3)
    cfg = DecodeConfig(ctc_weight=0.3, lm_weight=0.0, beam_size=8, max_len=4)
    a = joint_decode(x_e, ctc_lp, dec, lm, cfg)
    other = RnnLM(RnnLmConfig(vocab_size=V, layers=1, hidden=8, embed_dim=8), 99)
    b = joint_decode(x_e, ctc_lp, dec, other, cfg)
    c = joint_decode(x_e, ctc_lp, dec, None, cfg)
    assert a.tokens == b.tokens == c.tokens
    assert [h.score for h in a.nbest] == [h.score for h in b.nbest] == [h.score for h in c.nbest]


def test_nbest_sorted_unique_and_deterministic():
    dec, lm, x_e, ctc_lp = tiny_models(5)
    cfg = DecodeConfig(ctc_weight=0.3, lm_weight=0.1, beam_size=10, max_len=4)
    a = joint_decode(x_e, ctc_lp, dec, lm, cfg)
    b = joint_decode(x_e, ctc_lp, dec, lm, cfg)
    scores = [h.score for h in a.nbest]
    assert scores == sorted(scores, reverse=True)
    prefixes = [h.prefix for h in a.nbest]
    assert len(set(prefixes)) == len(prefixes)
    assert prefixes == [h.prefix for h in b.nbest] and scores == [h.score for h in b.nbest]
    for h in a.nbest:
        assert not set(h.prefix) & {0, 1, 2}


def test_score_breakdown_recomputes_from_full_passes():
    dec, lm, x_e, ctc_lp = tiny_models(7)
    cfg = DecodeConfig(ctc_weight=0.4, lm_weight=0.2, beam_size=6, max_len=4)
    res = joint_decode(x_e, ctc_lp, dec, lm, cfg)
    for h in res.nbest:
        attn, ctc, lm_score, combined = score_breakdown(h, cfg)
        ref = full_sequence_scores(x_e, ctc_lp, dec, lm, h.prefix)
        assert (attn, ctc, lm_score) == pytest.approx(ref, abs=1e-9)
        assert combined == pytest.approx(combine(*ref, cfg, len(h.prefix)), abs=1e-9)


def test_ctc_only_beam_matches_greedy_on_peaked_posteriors():
    # one dominant path: the best labelling is its collapse
    dec, lm, _, _ = tiny_models(0)
    path = [3, 3, 0, 4, 0, 4]
    lp = np.full((6, V), math.log(0.01))
    lp[np.arange(6), path] = math.log(1 - 0.01 * (V - 1))
    cfg = DecodeConfig(ctc_weight=1.0, lm_weight=0.0, beam_size=4, max_len=5)
    res = joint_decode(np.zeros((6, 8)), lp, dec, None, cfg)
    assert list(res.tokens) == ctc_greedy_decode(lp) == [3, 4, 4]


def test_invalid_configs_rejected():
    dec, lm, x_e, ctc_lp = tiny_models(0)
    for bad in (DecodeConfig(beam_size=0), DecodeConfig(ctc_weight=1.5), DecodeConfig(lm_weight=-0.1)):
        with pytest.raises(ConfigError):
            joint_decode(x_e, ctc_lp, dec, lm, bad)
    with pytest.raises(ContractError):
        joint_decode(np.full((6, 8), np.nan), ctc_lp, dec, lm, DecodeConfig())
