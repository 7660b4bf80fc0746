"""
Joint decoding weights and checkpoint averaging
===============================================

Two small mechanics that matter at inference time: how the CTC and LM weights
move the beam search, and how a window of checkpoints is averaged.
"""

from collections import OrderedDict

import numpy as np

from lipread.decode import DecodeConfig, joint_decode, score_breakdown
from lipread.decoder import DecoderConfig, TransformerDecoder
from lipread.lm import RnnLM, RnnLmConfig
from lipread.rng import make_rng
from lipread.train import Checkpoint, average_checkpoints

V = 7  # blank, unk, sos/eos and the labels 3..6
rng = make_rng(0, "notebook")
decoder = TransformerDecoder(rng, DecoderConfig(d_model=8, heads=2, ffn_dim=16, max_len=8), V, 2)
lm = RnnLM(RnnLmConfig(vocab_size=V, layers=1, hidden=8, embed_dim=8), seed=0)
x_e = rng.normal(size=(6, 8))

# CTC posteriors that clearly say "3 4"
path = [3, 3, 0, 4, 4, 0]
ctc_lp = np.log(np.full((6, V), 0.02))
ctc_lp[np.arange(6), path] = np.log(1 - 0.02 * (V - 1))

# untrained attention and LM scores are close to uniform, so the CTC weight
# decides how much the peaked posteriors count
for ctc_w, lm_w in [(0.0, 0.0), (0.3, 0.0), (0.3, 0.1), (1.0, 0.0)]:
    cfg = DecodeConfig(ctc_weight=ctc_w, lm_weight=lm_w, beam_size=8, max_len=4)
    res = joint_decode(x_e, ctc_lp, decoder, lm, cfg)
    attn, ctc, lm_score, total = score_breakdown(res.nbest[0], cfg)
    print(f"ctc={ctc_w:.1f} lm={lm_w:.1f}  best={list(res.tokens)}  "
          f"attn={attn:.2f} ctc={ctc:.2f} lm={lm_score:.2f} combined={total:.2f}")

# %%
# Averaging is element-wise. Shifting by the minimum before summing sorted
# differences makes the result independent of the input order and exact
# when every input is the same.
ckpts = [Checkpoint(OrderedDict(w=np.array([v])), {"source": f"epoch{v:.0f}"}) for v in (1.0, 3.0)]
avg = average_checkpoints(ckpts)
print(avg.params["w"], avg.metadata["averaged_from"])

x = np.array([0.1, 0.2, 0.7])
print("ten copies of", x, "->", average_checkpoints([Checkpoint(OrderedDict(w=x))] * 10).params["w"])
