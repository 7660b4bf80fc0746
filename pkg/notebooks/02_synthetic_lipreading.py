"""
Lipreading a synthetic alphabet
===============================

Each character is a fixed random glyph shown for a few frames with pixel
noise on top. A small hybrid model learns to read these clips in well under a
minute on one CPU core.
"""

import tempfile

import numpy as np

from lipread.data import SynthConfig, generate_dataset
from lipread.decode import DecodeConfig
from lipread.decoder import DecoderConfig
from lipread.encoder import ConformerConfig
from lipread.frontend import FrontendConfig
from lipread.lm import RnnLmConfig
from lipread.model import ModelConfig
from lipread.objective import HyperParams
from lipread.train import CurriculumStage, TrainConfig, evaluate, run_curriculum, train_lm
from lipread.vocab import Vocab

data_cfg = SynthConfig(alphabet="abcdef", num_utterances=440, min_len=2, max_len=5, frames_per_token=3,
                       frame_size=10, noise=0.3)
samples = generate_dataset(data_cfg, seed=0)
train, test = samples[:400], samples[400:]
vocab = Vocab.build_from_corpus(s.transcript for s in train)
print("vocabulary:", vocab.tokens)

# one frame of the first utterance, '#' for bright pixels
first = train[0]
print(f"{first.utterance_id}: {first.transcript!r}, {first.video.num_frames} frames")
for row in first.video.frames[0]:
    print("".join("#" if v > 0.3 else "." for v in row))

# %%
# A model small enough to train here: 8x8 center crops, d=16, two conformer
# blocks with one intermediate CTC module.
model_cfg = ModelConfig(
    vocab_size=vocab.size,
    frontend=FrontendConfig(stem_kernel=(3, 3, 3), stem_channels=4, trunk=((8, 2),), d_model=16, input_size=8),
    encoder=ConformerConfig(num_blocks=2, d_model=16, heads=2, conv_kernel=3, ffn_dim=32, interctc_interval=1,
                            max_len=64),
    decoder=DecoderConfig(left_layers=1, right_layers=1, d_model=16, heads=2, ffn_dim=32, max_len=16),
)
train_cfg = TrainConfig(peak_lr=1e-2, warmup_steps=30, max_frames=120, crop_size=8)

# short clips first, then everything, each stage starting from the average
# of the previous stage's last checkpoints
stages = [
    CurriculumStage(1, max_duration=0.4, epochs=4, avg_from=3, avg_to=4),
    CurriculumStage(2, init="previous", epochs=30, avg_from=28, avg_to=30),
]
with tempfile.TemporaryDirectory() as out:
    model, results = run_curriculum(stages, {"train": train}, vocab, model_cfg, HyperParams(), train_cfg, out)
for r in results:
    print(f"stage {r.stage_id}: loss per epoch", np.round(r.epoch_losses, 2))

# %%
# Decode the held-out clips three ways.
lm, ppl = train_lm([vocab.encode(s.transcript) for s in train], RnnLmConfig(vocab.size, 1, 16, 8), epochs=30)
print("LM perplexity per epoch:", np.round(ppl, 2))
for mode, cfg in [("greedy", DecodeConfig()), ("joint", DecodeConfig(beam_size=8, lm_weight=0.0)),
                  ("joint+lm", DecodeConfig(beam_size=8, lm_weight=0.1))]:
    res = evaluate(model, lm, test, cfg, vocab, train_cfg, mode="greedy" if mode == "greedy" else "joint")
    print(f"{mode:9} CER = {res.cer:.3f}")
for u in res.utterances[:5]:
    print(f"  {u.reference:8} -> {u.hypothesis}")
