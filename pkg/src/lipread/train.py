"""Curriculum training, checkpoint files, weight averaging, and evaluation."""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import SyntheticSample, augment_random_crop, augment_time_mask, corpus_cer, edit_distance
from .decode import DecodeConfig, joint_decode, score_breakdown
from .errors import ConfigError, ContractError, ShapeError, TrainingError
from .lm import RnnLM, RnnLmConfig
from .model import ModelConfig, VSRModel, collate
from .objective import HyperParams
from .rng import make_rng
from .vocab import Vocab

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LCKP"
CKPT_VERSION = 1


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adam with global-norm gradient clipping; the learning rate is passed per step."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9, clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None))

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def noam_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` over ``warmup`` steps, then ``peak*sqrt(warmup/step)``."""
    step = max(step, 1)
    if warmup <= 0:
        return peak
    return peak * min(step / warmup, math.sqrt(warmup / step))


# ------------------------------------------------------------------ configs


@dataclass
class TrainConfig:
    seed: int = 0
    peak_lr: float = 1e-2
    warmup_steps: int = 100
    max_frames: int = 384  # padded frames per batch
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    crop_size: int = 16
    masks_per_24: int = 1
    max_mask_span: int = 1
    frame_rate: float = 25.0


@dataclass
class CurriculumStage:
    stage_id: int
    data: str = "train"  # "train" or "finetune"
    max_duration: float | None = None  # seconds; None keeps everything
    init: str = "scratch"  # "scratch" or "previous"
    epochs: int = 5
    avg_from: int = 3
    avg_to: int = 5
    peak_lr: float | None = None

    def validate(self) -> None:
        if self.init not in ("scratch", "previous"):
            raise ConfigError(f"stage {self.stage_id}: init must be 'scratch' or 'previous'")
        if not 1 <= self.avg_from <= self.avg_to <= self.epochs:
            raise ConfigError(
                f"stage {self.stage_id}: averaging window [{self.avg_from}, {self.avg_to}] outside 1..{self.epochs}"
            )


# schedule used for full-scale training; the toy defaults live in config.TOY_STAGES
FULL_SCALE_STAGES = (
    CurriculumStage(1, "train", 4.0, "scratch", 23, 14, 23),
    CurriculumStage(2, "train", None, "previous", 74, 65, 74),
    CurriculumStage(3, "finetune", None, "previous", 80, 71, 80),  # stage 3 length is a placeholder
)


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)
    digest: bytes = b"\0" * 32


def model_checkpoint(model, metadata: dict | None = None) -> Checkpoint:
    meta = dict(metadata or {})
    if isinstance(model, VSRModel):
        meta.setdefault("kind", "vsr")
        meta["model_config"] = model.cfg.to_dict()
        digest = model.cfg.digest()
    else:
        meta.setdefault("kind", "lm")
        meta["model_config"] = asdict(model.cfg)
        digest = _digest(meta["model_config"])
    # store the JSON form so a saved and reloaded checkpoint compares equal
    return Checkpoint(model.state_dict(), json.loads(json.dumps(meta)), digest)


def _digest(obj) -> bytes:
    import hashlib

    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian: magic, u32 version, 32-byte config digest, u32 metadata
    length + UTF-8 JSON, u32 parameter count, then per parameter u32 name
    length, name, u32 rank, u32 extents, float64 values."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), ckpt.digest]
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[8:40]
    pos = 40
    (n_meta,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos : pos + n_meta].decode("utf-8"))
    pos += n_meta
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return Checkpoint(params, meta, digest)


def model_from_checkpoint(ckpt: Checkpoint):
    kind = ckpt.metadata.get("kind", "vsr")
    if kind == "vsr":
        cfg = ModelConfig.from_dict(ckpt.metadata["model_config"])
        if cfg.digest() != ckpt.digest:
            raise ContractError("checkpoint digest does not match its model config")
        model = VSRModel(cfg)
    else:
        model = RnnLM(RnnLmConfig(**ckpt.metadata["model_config"]))
    model.load_state_dict(ckpt.params)
    return model


def load_into(model, ckpt: Checkpoint) -> None:
    """Load parameters, refusing checkpoints built for another architecture."""
    expected = model.cfg.digest() if isinstance(model, VSRModel) else _digest(asdict(model.cfg))
    if expected != ckpt.digest:
        raise ShapeError("checkpoint was written for a different model configuration")
    model.load_state_dict(ckpt.params)


def average_checkpoints(ckpts: Sequence) -> Checkpoint:
    """Element-wise mean of every parameter.

    Computed as ``m + sum(sorted(x_i - m)) / n`` with ``m`` the element-wise
    minimum, which is exact for identical inputs and independent of input order.
    """
    ckpts = [load_checkpoint(c) if isinstance(c, (str, Path)) else c for c in ckpts]
    if not ckpts:
        raise ContractError("need at least one checkpoint to average")
    first = ckpts[0]
    names = list(first.params)
    for c in ckpts[1:]:
        if list(c.params) != names:
            diff = sorted(set(c.params) ^ set(names))
            raise ShapeError(f"checkpoint parameter names differ: {diff[:3]}")
        for k in names:
            if c.params[k].shape != first.params[k].shape:
                raise ShapeError(f"parameter {k}: shape {c.params[k].shape} vs {first.params[k].shape}")
    n = len(ckpts)
    out = OrderedDict()
    for k in names:
        stack = np.stack([c.params[k] for c in ckpts])
        low = stack.min(axis=0)
        out[k] = low + np.sort(stack - low, axis=0).sum(axis=0) / n
    meta = {key: v for key, v in first.metadata.items() if key not in ("epoch",)}
    sources = sorted(str(c.metadata.get("source", c.metadata.get("epoch", ""))) for c in ckpts)
    meta["averaged_from"] = sources
    return Checkpoint(out, meta, first.digest)


# ------------------------------------------------------------------ batching


def make_batches(lengths: Sequence[int], max_frames: int) -> list:
    """Sort by length (stable) and cut into batches whose padded size
    ``count * max_length`` stays within ``max_frames``."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches, cur, cur_max = [], [], 0
    for i in order:
        new_max = max(cur_max, lengths[i])
        if cur and new_max * (len(cur) + 1) > max_frames:
            batches.append(cur)
            cur, new_max = [], lengths[i]
        cur.append(i)
        cur_max = new_max
    if cur:
        batches.append(cur)
    return batches


def filter_by_duration(samples, max_duration: float | None, frame_rate: float = 25.0) -> list:
    if max_duration is None:
        return list(samples)
    limit = max_duration * frame_rate + 1e-9
    return [s for s in samples if s.video.num_frames <= limit]


def prepare_video(sample: SyntheticSample, cfg: TrainConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Crop to the model's input size (random when ``rng`` is given, else
    centered) and apply time masking during training."""
    video = augment_random_crop(sample.video, (cfg.crop_size, cfg.crop_size), rng)
    if rng is not None:
        video = augment_time_mask(video, rng, cfg.masks_per_24, cfg.max_mask_span)
    return video.frames


# ------------------------------------------------------------------ training


@dataclass
class StageResult:
    stage_id: int
    checkpoints: list
    epoch_losses: list
    averaged: Path | None = None


def train_stage(
    stage: CurriculumStage,
    samples: Sequence[SyntheticSample],
    model: VSRModel,
    vocab: Vocab,
    hp: HyperParams,
    cfg: TrainConfig,
    out_dir,
    log_file=None,
    on_epoch=None,
) -> StageResult:
    """Train ``model`` in place for ``stage.epochs`` epochs, writing one
    checkpoint per epoch to ``out_dir``. ``on_epoch(epoch, model, mean_loss)``
    is called after each checkpoint is written."""
    stage.validate()
    data = filter_by_duration(samples, stage.max_duration, cfg.frame_rate)
    if not data:
        raise ConfigError(f"stage {stage.stage_id}: no utterances left after the duration filter")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [vocab.encode(s.transcript) for s in data]
    lengths = [s.video.num_frames for s in data]
    batches = make_batches(lengths, cfg.max_frames)
    params = model.parameters()
    opt = Adam(params, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, clip_norm=cfg.clip_norm)
    peak = stage.peak_lr if stage.peak_lr is not None else cfg.peak_lr
    result = StageResult(stage.stage_id, [], [])
    step = 0
    for epoch in range(1, stage.epochs + 1):
        rng = make_rng(cfg.seed, "epoch", stage.stage_id, epoch)
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            idx = batches[bi]
            videos = [prepare_video(data[i], cfg, rng) for i in idx]
            batch = collate(videos, [targets[i] for i in idx], [data[i].utterance_id for i in idx])
            step += 1
            lr = noam_lr(step, peak, cfg.warmup_steps)
            model.zero_grad()
            try:
                breakdown = model.loss(batch, hp)
            except TrainingError as exc:
                raise TrainingError(f"stage {stage.stage_id} epoch {epoch} step {step}: {exc}") from exc
            breakdown.total.backward()
            opt.step(lr)
            total += float(breakdown.total.data) * len(idx)
            count += len(idx)
            if log_file is not None:
                log_file.write(breakdown.log_line(step=step, stage=stage.stage_id, epoch=epoch, lr=lr) + "\n")
        result.epoch_losses.append(total / count)
        path = out_dir / f"stage{stage.stage_id}_epoch{epoch:03d}.ckpt"
        save_checkpoint(path, model_checkpoint(model, {"stage": stage.stage_id, "epoch": epoch, "seed": cfg.seed,
                                                       "source": path.name}))
        result.checkpoints.append(path)
        log.info("stage %d epoch %d: mean loss %.4f", stage.stage_id, epoch, total / count)
        if on_epoch is not None:
            on_epoch(epoch, model, total / count)
    return result


def run_curriculum(
    stages: Sequence[CurriculumStage],
    splits: dict,
    vocab: Vocab,
    model_cfg: ModelConfig,
    hp: HyperParams,
    cfg: TrainConfig,
    out_dir,
    log_file=None,
) -> tuple:
    """Train every stage in order; each stage after the first starts from the
    previous stage's averaged checkpoint. Returns (final model, stage results)."""
    if not stages:
        raise ConfigError("a curriculum needs at least one stage")
    for i, s in enumerate(stages):
        s.validate()
        if i == 0 and s.init != "scratch":
            raise ConfigError("the first stage has no previous checkpoint to start from")
    out_dir = Path(out_dir)
    results = []
    model = None
    prev_avg = None
    for s in stages:
        if s.init == "scratch" or model is None:
            model = VSRModel(model_cfg, seed=cfg.seed)
        else:
            load_into(model, prev_avg)
        samples = splits.get(s.data) or splits["train"]
        res = train_stage(s, samples, model, vocab, hp, cfg, out_dir, log_file)
        window = res.checkpoints[s.avg_from - 1 : s.avg_to]
        prev_avg = average_checkpoints(window)
        prev_avg.metadata["stage"] = s.stage_id
        res.averaged = out_dir / f"stage{s.stage_id}_avg.ckpt"
        save_checkpoint(res.averaged, prev_avg)
        load_into(model, prev_avg)
        results.append(res)
    return model, results


def train_lm(seqs, cfg: RnnLmConfig, epochs: int, seed: int = 0, lr: float = 3e-3, batch_size: int = 64):
    from .lm import lm_train

    lm = RnnLM(cfg, seed)
    history = lm_train(lm, seqs, epochs, lr=lr, batch_size=batch_size, seed=seed)
    return lm, history


# ------------------------------------------------------------------ evaluation


@dataclass
class UtteranceResult:
    utterance_id: str
    reference: str
    hypothesis: str
    attn: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    combined: float = 0.0

    @property
    def errors(self) -> int:
        return edit_distance(self.reference, self.hypothesis)


@dataclass
class EvalResult:
    cer: float
    utterances: list


def decode_sample(model: VSRModel, lm, vocab: Vocab, sample: SyntheticSample, decode_cfg: DecodeConfig,
                  train_cfg: TrainConfig, mode: str = "joint") -> UtteranceResult:
    from .ctc import ctc_greedy_decode

    video = prepare_video(sample, train_cfg, None)
    enc, ctc_lp = model.encode_one(video)
    if mode == "greedy":
        hyp = vocab.decode(ctc_greedy_decode(ctc_lp))
        return UtteranceResult(sample.utterance_id, sample.transcript, hyp)
    res = joint_decode(enc.x_e.data[0], ctc_lp, model.left_decoder, lm, decode_cfg)
    if res.nbest:
        a, c, l, s = score_breakdown(res.nbest[0], decode_cfg)
    else:
        a = c = l = s = -math.inf
    return UtteranceResult(sample.utterance_id, sample.transcript, vocab.decode(res.tokens), a, c, l, s)


_worker = {}


def _decode_worker(i):
    w = _worker
    return decode_sample(w["model"], w["lm"], w["vocab"], w["samples"][i], w["decode_cfg"], w["train_cfg"], w["mode"])


def decode_samples(model, lm, vocab, samples, decode_cfg, train_cfg=None, mode="joint", jobs: int = 1) -> list:
    """Decode every sample; ``jobs > 1`` spreads utterances over processes
    (results keep the input order)."""
    train_cfg = train_cfg or TrainConfig()
    if jobs <= 1:
        return [decode_sample(model, lm, vocab, s, decode_cfg, train_cfg, mode) for s in samples]
    import multiprocessing as mp

    _worker.update(model=model, lm=lm, vocab=vocab, samples=list(samples), decode_cfg=decode_cfg,
                   train_cfg=train_cfg, mode=mode)
    with mp.get_context("fork").Pool(jobs) as pool:
        return pool.map(_decode_worker, range(len(samples)))


def evaluate(model, lm, samples, decode_cfg: DecodeConfig, vocab: Vocab, train_cfg=None, mode="joint", jobs=1) -> EvalResult:
    """Decode ``samples`` and aggregate CER as summed edits over summed reference length."""
    utts = decode_samples(model, lm, vocab, samples, decode_cfg, train_cfg, mode, jobs)
    return EvalResult(corpus_cer((u.reference, u.hypothesis) for u in utts), utts)
