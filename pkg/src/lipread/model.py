"""The full recognizer: front-end, encoder, CTC head, and the two decoders."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .ctc import ctc_loss_batch
from .decoder import DecoderConfig, TransformerDecoder
from .encoder import ConformerConfig, ConformerEncoder, EncoderOutput
from .errors import ConfigError
from .frontend import FrontendConfig, VisualFrontend
from .nn import Linear, Module
from .objective import HyperParams, LossBreakdown, total_loss
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    vocab_size: int = 15
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        d = self.frontend.d_model
        if self.encoder.d_model != d or self.decoder.d_model != d:
            raise ConfigError("frontend, encoder and decoder widths must agree")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fe = dict(d["frontend"])
        fe["stem_kernel"] = tuple(fe["stem_kernel"])
        fe["trunk"] = tuple(tuple(s) for s in fe["trunk"])
        return cls(d["vocab_size"], FrontendConfig(**fe), ConformerConfig(**d["encoder"]), DecoderConfig(**d["decoder"]))

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class Batch:
    videos: np.ndarray  # (B, T, H, W), zero padded
    lengths: np.ndarray  # frames per item
    targets: list  # token id lists
    ids: list = field(default_factory=list)


def collate(videos, targets, ids=None) -> Batch:
    lengths = np.array([v.shape[0] for v in videos])
    B, Tm = len(videos), int(lengths.max())
    H, W = videos[0].shape[1:]
    arr = np.zeros((B, Tm, H, W))
    for i, v in enumerate(videos):
        arr[i, : v.shape[0]] = v
    return Batch(arr, lengths, [list(t) for t in targets], list(ids or []))


class VSRModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, "model-init")
        V = cfg.vocab_size
        self.frontend = VisualFrontend(rng, cfg.frontend)
        self.encoder = ConformerEncoder(rng, cfg.encoder, V)
        self.ctc_head = Linear(rng, cfg.encoder.d_model, V)
        self.left_decoder = TransformerDecoder(rng, cfg.decoder, V, cfg.decoder.left_layers)
        self.right_decoder = TransformerDecoder(rng, cfg.decoder, V, cfg.decoder.right_layers)

    def encode(self, videos, lengths=None) -> EncoderOutput:
        return self.encoder(self.frontend(videos), lengths)

    def ctc_logprobs(self, enc: EncoderOutput) -> T.Tensor:
        return T.log_softmax(self.ctc_head(enc.x_e), axis=-1)

    def loss(self, batch: Batch, hp: HyperParams) -> LossBreakdown:
        """Batch-mean of every per-utterance loss term, combined by ``total_loss``."""
        B = len(batch.targets)
        enc = self.encode(batch.videos, batch.lengths)
        scale = 1.0 / B
        ctc, bad = ctc_loss_batch(self.ctc_logprobs(enc), batch.targets, batch.lengths)
        if len(bad):
            ids = [batch.ids[i] for i in bad] if batch.ids else list(bad)
            log.warning("CTC-infeasible utterances contribute no CTC loss: %s", ids)
        inter_k = []
        for p in enc.intermediates:
            lk, _ = ctc_loss_batch(p.logprobs, batch.targets, batch.lengths)
            inter_k.append(lk.sum() * scale)
        left = self.left_decoder.loss(enc.x_e, batch.targets, batch.lengths).sum() * scale
        rev = [list(reversed(y)) for y in batch.targets]
        right = self.right_decoder.loss(enc.x_e, rev, batch.lengths).sum() * scale
        b = LossBreakdown(ctc.sum() * scale, inter_k, left, right)
        total_loss(b, hp)
        return b

    def encode_one(self, video: np.ndarray):
        """Encoder output (T, d) and CTC log-probs (T, V) for one utterance."""
        with T.no_grad():
            enc = self.encode(np.asarray(video)[None])
            logp = self.ctc_logprobs(enc)
        return enc, logp.data[0]


def micro_config(vocab_size: int = 6) -> ModelConfig:
    """Smallest model exercising every loss term: d=8, two conformer blocks
    with one residual CTC module, one left and one right decoder layer."""
    return ModelConfig(
        vocab_size=vocab_size,
        frontend=FrontendConfig(stem_kernel=(3, 3, 3), stem_channels=2, trunk=((2, 2),), d_model=8, input_size=4),
        encoder=ConformerConfig(num_blocks=2, d_model=8, heads=2, conv_kernel=3, ffn_dim=8, interctc_interval=1,
                                max_len=8),
        decoder=DecoderConfig(left_layers=1, right_layers=1, d_model=8, heads=2, ffn_dim=8, max_len=8),
    )


def gradcheck_model(seed: int = 0, eps: float = 1e-6, hp: HyperParams | None = None) -> float:
    """Finite-difference check of the full objective over every parameter of
    the micro model on a two-utterance batch (T=5 and T=4)."""
    from .gradcheck import finite_difference_check

    cfg = micro_config()
    model = VSRModel(cfg, seed)
    rng = make_rng(seed, "gradcheck-batch")
    size = cfg.frontend.input_size
    videos = [rng.uniform(-1, 1, (5, size, size)), rng.uniform(-1, 1, (4, size, size))]
    batch = collate(videos, [[3, 4], [5]])
    hp = hp or HyperParams()
    return finite_difference_check(lambda: model.loss(batch, hp).total, model.parameters(), eps=eps)
