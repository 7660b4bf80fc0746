"""Run configuration: bracketed sections of ``key = value`` lines.

Precedence, lowest first: built-in defaults, the ``--config`` file, ``-o
section.key=value`` overrides, then the dedicated ``--seed``/``--jobs`` flags.
Unknown sections and keys are rejected.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .data import SynthConfig
from .decode import DecodeConfig
from .decoder import DecoderConfig
from .encoder import ConformerConfig
from .errors import ConfigError
from .frontend import FrontendConfig
from .lm import RnnLmConfig
from .model import ModelConfig
from .objective import HyperParams
from .train import CurriculumStage, TrainConfig

TOY_STAGES = {
    1: CurriculumStage(1, "train", 0.8, "scratch", 8, 6, 8),
    2: CurriculumStage(2, "train", None, "previous", 15, 13, 15),
    3: CurriculumStage(3, "finetune", None, "previous", 5, 3, 5, peak_lr=3e-3),
}


@dataclass
class DataSection(SynthConfig):
    num_utterances: int = 2200
    split: tuple = (2000, 100, 100)  # counts, or fractions summing to 1


@dataclass
class LmSection(RnnLmConfig):
    epochs: int = 20
    lr: float = 3e-3
    batch_size: int = 64


@dataclass
class RunSection:
    seed: int = 0
    jobs: int = 1


@dataclass
class CurriculumSection:
    stages: tuple = (1, 2, 3)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: ConformerConfig = field(default_factory=ConformerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    objective: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    stages: dict = field(default_factory=lambda: {k: dataclasses.replace(v) for k, v in TOY_STAGES.items()})
    lm: LmSection = field(default_factory=LmSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.frontend, self.encoder, self.decoder)

    def curriculum_stages(self) -> list:
        out = []
        for sid in self.curriculum.stages:
            if sid not in self.stages:
                raise ConfigError(f"curriculum lists stage {sid} but there is no [stage{sid}] section")
            out.append(self.stages[sid])
        return out

    def lm_config(self, vocab_size: int) -> RnnLmConfig:
        return RnnLmConfig(vocab_size, self.lm.layers, self.lm.hidden, self.lm.embed_dim)

    def split_sizes(self) -> tuple:
        n = self.data.num_utterances
        parts = [float(x) for x in self.data.split]
        if len(parts) != 3 or min(parts) < 0:
            raise ConfigError(f"data.split needs three non-negative numbers, got {self.data.split}")
        if abs(sum(parts) - 1.0) < 1e-9:
            valid, test = round(n * parts[1]), round(n * parts[2])
            return n - valid - test, valid, test
        counts = tuple(int(x) for x in parts)
        if any(c != x for c, x in zip(counts, parts)) or sum(counts) != n:
            raise ConfigError(f"data.split counts {counts} must sum to num_utterances={n}")
        return counts

    # ------------------------------------------------------------ text form

    def sections(self):
        yield "run", self.run
        yield "data", self.data
        yield "frontend", self.frontend
        yield "encoder", self.encoder
        yield "decoder", self.decoder
        yield "objective", self.objective
        yield "train", self.train
        yield "curriculum", self.curriculum
        for sid in sorted(self.stages):
            yield f"stage{sid}", self.stages[sid]
        yield "lm", self.lm
        yield "decode", self.decode

    def to_text(self) -> str:
        out = io.StringIO()
        for name, obj in self.sections():
            out.write(f"[{name}]\n")
            for f in fields(obj):
                if name.startswith("stage") and f.name == "stage_id":
                    continue
                out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
            out.write("\n")
        return out.getvalue()


def _format(v) -> str:
    if isinstance(v, str):
        return v
    return repr(v)


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    if value is None:
        return None
    if isinstance(current, bool):
        if isinstance(value, str):
            value = value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (int, float)):
            value = (value,)
        elif isinstance(value, str):
            value = tuple(v.strip() for v in value.split(",") if v.strip())
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a comma-separated list, got {raw!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _set(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section.startswith("stage") and section[5:].isdigit():
        sid = int(section[5:])
        target = cfg.stages.setdefault(sid, CurriculumStage(sid))
    else:
        target = getattr(cfg, section, None) if section in dict(cfg.sections()) else None
    if target is None:
        raise ConfigError(f"unknown config section [{section}]")
    names = {f.name for f in fields(target)} - {"stage_id"}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    setattr(target, key, _parse(raw, getattr(target, key), f"{section}.{key}"))


def load_config(path=None, overrides=(), seed: int | None = None, jobs: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().rsplit(".", 1)
        _set(cfg, section, key, raw)
    if seed is not None:
        cfg.run.seed = seed
    if jobs is not None:
        cfg.run.jobs = jobs
    cfg.train.seed = cfg.run.seed
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        HyperParams(**dataclasses.asdict(cfg.objective))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.decode.validate()
    cfg.frontend.validate()
    cfg.split_sizes()
    for s in cfg.curriculum_stages():
        s.validate()
    if cfg.run.jobs < 1:
        raise ConfigError("jobs must be >= 1")
