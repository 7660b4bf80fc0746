"""Synthetic lip-video corpus, augmentation, file formats, and CER.

Each character of the alphabet owns a fixed binary glyph (25% of pixels on,
values +1/-1). An utterance renders every character of its transcript as that
glyph held for ``frames_per_token`` frames, plus clamped Gaussian pixel noise.
Characters listed as an ambiguous pair share a glyph up to a handful of flipped
pixels, so they are told apart mostly by context.

Transcripts come from a sparse first-order Markov grammar over the alphabet.
No character may follow itself, ambiguous partners never share a predecessor,
and utterances never start with an ambiguous character; that makes the left
context sufficient to resolve every ambiguous position.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .rng import make_rng

FRAME_RATE = 25.0
VIDEO_MAGIC = b"LVID"
VIDEO_VERSION = 1


@dataclass
class SynthConfig:
    alphabet: str = "abcdefghijkl"
    num_utterances: int = 100
    min_len: int = 2
    max_len: int = 8
    frames_per_token: int = 4
    noise: float = 0.3
    ambiguous_pairs: tuple = ()
    frame_size: int = 18
    successors: int = 3
    fill: float = 0.25
    ambiguous_flip: float = 0.05


@dataclass
class VideoTensor:
    frames: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"video must be T x H x W with T >= 1, got {self.frames.shape}")
        if self.frames.min() < -1.0 or self.frames.max() > 1.0:
            raise ContractError("video values must lie in [-1, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticSample:
    video: VideoTensor
    transcript: str
    utterance_id: str

    @property
    def duration_s(self) -> float:
        return self.video.num_frames / self.video.frame_rate


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    path: str
    duration_s: float
    transcript: str


@dataclass
class World:
    """Glyph bank and grammar shared by every split generated from one seed."""

    alphabet: str
    glyphs: dict
    successors: dict
    starts: tuple
    pairs: tuple = field(default=())


def _check_config(cfg: SynthConfig) -> None:
    if len(set(cfg.alphabet)) != len(cfg.alphabet) or not cfg.alphabet:
        raise ConfigError(f"alphabet must be non-empty without repeats: {cfg.alphabet!r}")
    for c in cfg.alphabet:
        if not c.isprintable() or c.isspace() or c in "<>":
            raise ConfigError(f"no glyph for character {c!r}")
    if cfg.frames_per_token < 2:
        raise ConfigError("frames_per_token must be >= 2")
    if not 1 <= cfg.min_len <= cfg.max_len:
        raise ConfigError(f"bad length range [{cfg.min_len}, {cfg.max_len}]")
    seen = set()
    for pair in cfg.ambiguous_pairs:
        if len(pair) != 2 or pair[0] == pair[1]:
            raise ConfigError(f"ambiguous pair must be two distinct characters: {pair!r}")
        for c in pair:
            if c not in cfg.alphabet:
                raise ConfigError(f"ambiguous character {c!r} not in alphabet")
            if c in seen:
                raise ConfigError(f"character {c!r} appears in two ambiguous pairs")
            seen.add(c)
    if cfg.successors < 1 or cfg.successors > len(cfg.alphabet) - 1:
        raise ConfigError("successors must lie in [1, len(alphabet) - 1]")


def build_world(cfg: SynthConfig, seed: int) -> World:
    _check_config(cfg)
    size = cfg.frame_size
    n_pix = size * size
    n_on = int(round(cfg.fill * n_pix))
    n_flip = math.ceil(cfg.ambiguous_flip * n_pix)
    g_rng = make_rng(seed, "glyphs")
    glyphs = {}
    for c in cfg.alphabet:
        flat = -np.ones(n_pix)
        flat[g_rng.choice(n_pix, size=n_on, replace=False)] = 1.0
        glyphs[c] = flat.reshape(size, size)
    partner = {}
    for a, b in cfg.ambiguous_pairs:
        flat = glyphs[a].reshape(-1).copy()
        flips = g_rng.choice(n_pix, size=n_flip, replace=False)
        flat[flips] = -flat[flips]
        glyphs[b] = flat.reshape(size, size)
        partner[a], partner[b] = b, a

    s_rng = make_rng(seed, "grammar")
    succ = {}
    for c in cfg.alphabet:
        pool = [x for x in cfg.alphabet if x != c]
        order = s_rng.permutation(len(pool))
        chosen = []
        for i in order:
            x = pool[i]
            if partner.get(x) in chosen:
                continue
            chosen.append(x)
            if len(chosen) == cfg.successors:
                break
        succ[c] = tuple(sorted(chosen))
    # ambiguous partners must not share a predecessor
    for a, b in cfg.ambiguous_pairs:
        preds_a = {c for c, s in succ.items() if a in s}
        preds_b = {c for c, s in succ.items() if b in s}
        for c in preds_a & preds_b:
            succ[c] = tuple(x for x in succ[c] if x != b)
    starts = tuple(c for c in cfg.alphabet if c not in partner)
    return World(cfg.alphabet, glyphs, succ, starts, tuple(cfg.ambiguous_pairs))


def sample_transcript(world: World, cfg: SynthConfig, rng: np.random.Generator) -> str:
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    text = [world.starts[int(rng.integers(len(world.starts)))]]
    while len(text) < n:
        options = world.successors[text[-1]]
        if not options:
            break
        text.append(options[int(rng.integers(len(options)))])
    return "".join(text)


def render(world: World, text: str, frames_per_token: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    clean = np.repeat(np.stack([world.glyphs[c] for c in text]), frames_per_token, axis=0)
    if noise > 0:
        clean = clean + rng.normal(0.0, noise, size=clean.shape)
    return np.clip(clean, -1.0, 1.0)


def generate_sample(world: World, cfg: SynthConfig, seed: int, index: int) -> SyntheticSample:
    rng = make_rng(seed, "utterance", index)
    text = sample_transcript(world, cfg, rng)
    frames = render(world, text, cfg.frames_per_token, cfg.noise, rng)
    return SyntheticSample(VideoTensor(frames), text, f"utt{index:06d}")


def generate_dataset(cfg: SynthConfig, seed: int, start_index: int = 0) -> list:
    """Generate ``cfg.num_utterances`` samples with ids ``utt{start_index + i}``.

    Utterance ``i`` depends only on ``(seed, start_index + i)`` so any subset can
    be regenerated independently.
    """
    world = build_world(cfg, seed)
    return [generate_sample(world, cfg, seed, start_index + i) for i in range(cfg.num_utterances)]


# ---------------------------------------------------------------- augmentation


def augment_time_mask(
    video: VideoTensor, rng: np.random.Generator, masks_per_24: int = 1, max_span: int = 1
) -> VideoTensor:
    """Replace random spans with the utterance's mean frame.

    The number of spans is ``masks_per_24 * ceil(T / 24)``; each span length is
    uniform in ``[0, max_span]`` (clipped to T).
    """
    frames = video.frames
    T = frames.shape[0]
    n = masks_per_24 * math.ceil(T / 24)
    if n == 0 or max_span <= 0:
        return VideoTensor(frames.copy(), video.frame_rate)
    out = frames.copy()
    mean_frame = frames.mean(axis=0)
    for _ in range(n):
        span = min(int(rng.integers(0, max_span + 1)), T)
        if span == 0:
            continue
        start = int(rng.integers(0, T - span + 1))
        out[start : start + span] = mean_frame
    return VideoTensor(out, video.frame_rate)


def crop_offset(src: tuple, size: tuple, rng: np.random.Generator | None) -> tuple:
    H, W = src
    h, w = size
    if h > H or w > W:
        raise ShapeError(f"crop {size} larger than frame {src}")
    if rng is None:
        return (H - h) // 2, (W - w) // 2
    return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))


def augment_random_crop(video: VideoTensor, size: tuple, rng: np.random.Generator | None = None) -> VideoTensor:
    """Crop every frame with the same window; ``rng=None`` gives the center crop."""
    top, left = crop_offset(video.frames.shape[1:], size, rng)
    h, w = size
    return VideoTensor(video.frames[:, top : top + h, left : left + w].copy(), video.frame_rate)


# ------------------------------------------------------------------ metrics


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ContractError("CER is undefined for an empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_cer(pairs: Iterable[tuple]) -> float:
    """Summed edit distance over summed reference length."""
    errors = total = 0
    for ref, hyp in pairs:
        if not ref:
            raise ContractError("CER is undefined for an empty reference")
        errors += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ContractError("CER needs at least one reference")
    return errors / total


# ------------------------------------------------------------------ file formats


def write_video(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ShapeError(f"video must be T x H x W, got {frames.shape}")
    T, H, W = frames.shape
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", VIDEO_VERSION, T, H, W))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_video(path) -> VideoTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != VIDEO_MAGIC:
        raise ContractError(f"{path}: not a video file")
    version, T, H, W = struct.unpack_from("<4I", raw, 4)
    if version != VIDEO_VERSION:
        raise ContractError(f"{path}: unsupported video version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    if body.size != T * H * W:
        raise ContractError(f"{path}: truncated video payload")
    return VideoTensor(body.astype(np.float64).reshape(T, H, W))


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    lines = []
    ids = set()
    for e in entries:
        if e.utterance_id in ids:
            raise ContractError(f"duplicate utterance id {e.utterance_id}")
        ids.add(e.utterance_id)
        lines.append(f"{e.utterance_id}\t{e.path}\t{e.duration_s:.4f}\t{e.transcript}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list:
    entries = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ContractError(f"{path}:{n}: expected 4 tab-separated fields")
        entries.append(ManifestEntry(parts[0], parts[1], float(parts[2]), parts[3]))
    return entries


def save_samples(samples: Sequence[SyntheticSample], out_dir, manifest_name: str) -> Path:
    """Write videos under ``out_dir/videos`` and a manifest next to them."""
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"videos/{s.utterance_id}.lvid"
        write_video(out_dir / rel, s.video.frames)
        entries.append(ManifestEntry(s.utterance_id, rel, s.duration_s, s.transcript))
    path = out_dir / manifest_name
    write_manifest(path, entries)
    return path


def load_samples(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    return [
        SyntheticSample(read_video(base / e.path), e.transcript, e.utterance_id)
        for e in read_manifest(manifest_path)
    ]
