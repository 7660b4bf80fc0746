"""Command-line entry point: ``synth``, ``train``, ``decode``, ``eval``, ``gradcheck``.

Every command prints one machine-readable ``KEY=value`` summary line on
standard output and exits non-zero with a message on failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import corpus_cer, edit_distance, generate_dataset, load_samples, read_manifest, save_samples
from .errors import CheckError, ConfigError, ContractError, NumericalError, ShapeError, TrainingError
from .vocab import Vocab

log = logging.getLogger("lipread")

SPLITS = ("train", "valid", "test")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} already exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _record_config(cfg: RunConfig, out: Path | None) -> None:
    text = cfg.to_text()
    log.info("resolved config:\n%s", text)
    if out is not None:
        (out / "config.ini").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    """Generate the corpus and write one manifest per split plus ``vocab.txt``."""
    _prepare_out(out, force)
    _record_config(cfg, out)
    sizes = cfg.split_sizes()
    samples = generate_dataset(cfg.data, cfg.run.seed)
    start = 0
    counts = {}
    for name, n in zip(SPLITS, sizes):
        part = samples[start : start + n]
        save_samples(part, out, f"{name}.tsv")
        counts[name] = len(part)
        start += n
    Vocab.build_from_corpus([s.transcript for s in samples[: sizes[0]]]).save(out / "vocab.txt")
    return counts


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path, force: bool = False) -> Path:
    """Run the curriculum, train the LM, and write ``final.ckpt`` and ``lm.ckpt``."""
    from .train import model_checkpoint, run_curriculum, save_checkpoint, train_lm

    _prepare_out(out, force)
    _record_config(cfg, out)
    vocab = Vocab.load(data_dir / "vocab.txt")
    splits = {"train": load_samples(data_dir / "train.tsv")}
    if (data_dir / "finetune.tsv").exists():
        splits["finetune"] = load_samples(data_dir / "finetune.tsv")
    model_cfg = cfg.model_config(vocab.size)
    with open(out / "train_log.txt", "w", encoding="utf-8") as fh:
        model, _ = run_curriculum(cfg.curriculum_stages(), splits, vocab, model_cfg, cfg.objective, cfg.train, out, fh)
    final = out / "final.ckpt"
    save_checkpoint(final, model_checkpoint(model, {"seed": cfg.run.seed, "vocab": list(vocab.tokens)}))
    if cfg.lm.epochs > 0:
        seqs = [vocab.encode(s.transcript) for s in splits["train"]]
        lm, history = train_lm(seqs, cfg.lm_config(vocab.size), cfg.lm.epochs, cfg.run.seed, cfg.lm.lr,
                               cfg.lm.batch_size)
        (out / "lm_log.txt").write_text("".join(f"epoch={i} ppl={p!r}\n" for i, p in enumerate(history)))
        save_checkpoint(out / "lm.ckpt", model_checkpoint(lm, {"seed": cfg.run.seed, "vocab": list(vocab.tokens)}))
    return final


def cmd_decode(cfg: RunConfig, checkpoint: Path, manifest: Path, out: Path, lm_path: Path | None = None,
               mode: str = "joint") -> list:
    """Decode a manifest; writes ``id hyp attn ctc lm combined`` per line."""
    from .train import decode_samples, load_checkpoint, model_from_checkpoint

    _record_config(cfg, None)
    ckpt = load_checkpoint(checkpoint)
    if "vocab" not in ckpt.metadata:
        raise ContractError(f"{checkpoint} carries no vocabulary")
    vocab = Vocab(tuple(ckpt.metadata["vocab"]))
    model = model_from_checkpoint(ckpt)
    lm = model_from_checkpoint(load_checkpoint(lm_path)) if lm_path is not None else None
    if lm is None and cfg.decode.lm_weight > 0:
        log.warning("no LM given; decoding with lm_weight=%s has no LM term", cfg.decode.lm_weight)
    samples = load_samples(manifest)
    utts = decode_samples(model, lm, vocab, samples, cfg.decode, cfg.train, mode, cfg.run.jobs)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(f"{u.utterance_id}\t{u.hypothesis}\t{float(u.attn)!r}\t{float(u.ctc)!r}\t{float(u.lm)!r}\t{float(u.combined)!r}\n")
    return utts


def read_hypotheses(path) -> dict:
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise ContractError(f"{path}:{n}: expected 6 tab-separated fields, got {len(parts)}")
            hyps[parts[0]] = parts[1]
    return hyps


def cmd_eval(ref_manifest: Path, hyp_file: Path) -> tuple:
    """(CER, errors, reference characters, utterances)."""
    refs = read_manifest(ref_manifest)
    hyps = read_hypotheses(hyp_file)
    missing = [e.utterance_id for e in refs if e.utterance_id not in hyps]
    if missing:
        raise ContractError(f"{len(missing)} reference utterances have no hypothesis, e.g. {missing[0]}")
    pairs = [(e.transcript, hyps[e.utterance_id]) for e in refs]
    errors = sum(edit_distance(r, h) for r, h in pairs)
    chars = sum(len(r) for r, _ in pairs)
    return corpus_cer(pairs), errors, chars, len(pairs)


def cmd_gradcheck(cfg: RunConfig, eps: float = 1e-6) -> float:
    from .model import gradcheck_model

    _record_config(cfg, None)
    return gradcheck_model(cfg.run.seed, eps, cfg.objective)


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file with [section] headers")
    common.add_argument("-o", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel decoding processes (utterance level)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")

    p = argparse.ArgumentParser(prog="lipread", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=[common], help="curriculum training plus LM")
    t.add_argument("--data", type=Path, required=True, help="directory written by synth")
    t.add_argument("--out", type=Path, required=True)

    d = sub.add_parser("decode", parents=[common], help="decode a manifest")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--lm", type=Path)
    d.add_argument("--manifest", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True, help="hypothesis file to write")
    d.add_argument("--mode", choices=("joint", "greedy"), default="joint")

    e = sub.add_parser("eval", parents=[common], help="score a hypothesis file")
    e.add_argument("--ref", type=Path, required=True, help="reference manifest")
    e.add_argument("--hyp", type=Path, required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full objective")
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.jobs)
        if args.command == "synth":
            counts = cmd_synth(cfg, args.out, args.force)
            print(" ".join(f"{k.upper()}={v}" for k, v in counts.items()))
        elif args.command == "train":
            final = cmd_train(cfg, args.data, args.out, args.force)
            print(f"FINAL_CHECKPOINT={final}")
        elif args.command == "decode":
            utts = cmd_decode(cfg, args.checkpoint, args.manifest, args.out, args.lm, args.mode)
            print(f"DECODED={len(utts)}")
        elif args.command == "eval":
            value, errors, chars, n = cmd_eval(args.ref, args.hyp)
            print(f"CER={value:.4f} ERRORS={errors} REF_CHARS={chars} UTTERANCES={n}")
        elif args.command == "gradcheck":
            err = cmd_gradcheck(cfg, args.eps)
            print(f"GRADCHECK_MAX_REL_ERR={err:.3e}")
            if err > args.tol:
                print(f"error: relative error {err:.3e} exceeds tolerance {args.tol:.1e}", file=sys.stderr)
                return 1
    except (ConfigError, ContractError, ShapeError, NumericalError, TrainingError, CheckError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
