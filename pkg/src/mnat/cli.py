"""Command-line driver: ``mnat {train,translate,evaluate,probe,synth}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigFileError, RunConfig, load_config_file, merge
from .decoding import translate_corpus
from .eecr import TrainingError, average_checkpoints, parse_log_line, train
from .metrics import bleu, repetition_rate, similarity_probe
from .model import ConfigError, NATModel

log = logging.getLogger("mnat")

EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("MNAT_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def emit_block(values: dict, out=None) -> None:
    """Print a ``key=value`` block between ``[report]`` and ``[end]`` markers."""
    out = out or sys.stdout
    print("[report]", file=out)
    for k, v in values.items():
        print(f"{k}={format(v, '.6f') if isinstance(v, float) else v}", file=out)
    print("[end]", file=out)


def parse_report(text: str) -> dict[str, str]:
    """Inverse of :func:`emit_block` for the first block found in ``text``."""
    out: dict[str, str] = {}
    inside = False
    for line in text.splitlines():
        if line == "[report]":
            inside = True
        elif line == "[end]" and inside:
            break
        elif inside and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _require(cfg: RunConfig, name: str, flag: str) -> Path:
    p = cfg.path(name)
    if p is None:
        raise CliError(f"missing required path {flag} (paths.{name})", EXIT_CONFIG)
    return p


def _existing(cfg: RunConfig, name: str, flag: str) -> Path:
    p = _require(cfg, name, flag)
    if not p.exists():
        raise CliError(f"no such file: {p}", EXIT_DATA)
    return p


def _load_model(cfg: RunConfig) -> tuple[NATModel, data.Vocabulary]:
    ckpt_path = _existing(cfg, "checkpoint", "--checkpoint")
    try:
        ckpt = load_checkpoint(ckpt_path)
    except CheckpointError as exc:
        raise CliError(f"{ckpt_path}: {exc}", EXIT_DATA) from exc
    vocab_path = cfg.path("vocab") or ckpt_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise CliError(f"no such file: {vocab_path}", EXIT_DATA)
    vocab = data.Vocabulary.load(vocab_path)
    if len(vocab) != ckpt.config.vocab_size:
        raise CliError(f"vocabulary size {len(vocab)} does not match checkpoint ({ckpt.config.vocab_size})", EXIT_DATA)
    return NATModel(ckpt.config, ckpt.tensors()), vocab


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig) -> int:
    train_path = _existing(cfg, "train", "--train")
    valid_path = cfg.path("valid")
    if valid_path is not None and not valid_path.exists():
        raise CliError(f"no such file: {valid_path}", EXIT_DATA)
    out_dir = cfg.path("checkpoint_dir") or Path("checkpoints")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        vocab_path = cfg.path("vocab")
        if vocab_path is not None and vocab_path.exists():
            vocab = data.Vocabulary.load(vocab_path)
        else:
            vocab = data.build_vocab([train_path])
        vocab.save(out_dir / "vocab.txt")
        model_cfg = cfg.model_config(len(vocab))
        model_cfg.validate()
        tc = cfg.train_config()
        tc.validate()
        pairs = data.load_parallel_corpus(train_path, vocab, model_cfg.max_positions)
    except (ConfigError, ValueError) as exc:
        code = EXIT_DATA if isinstance(exc, data.DataError) else EXIT_CONFIG
        raise CliError(str(exc), code) from exc
    if not pairs:
        raise CliError(f"{train_path}: no usable sentence pairs", EXIT_DATA)
    longest = max(len(p.target) for p in pairs)
    if longest >= model_cfg.max_length_bins:
        raise CliError(f"model.max_length_bins={model_cfg.max_length_bins} must exceed longest target {longest}",
                       EXIT_CONFIG)
    log.info("training on %d pairs, vocab %d, objective %s (beta=%g gamma=%g K=%d)",
             len(pairs), len(vocab), tc.objective, tc.beta, tc.gamma, tc.K)
    model = NATModel(model_cfg)
    log_path = cfg.path("log") or out_dir / "train.log"
    try:
        result = train(pairs, model, tc, out_dir=out_dir, log_path=log_path)
        recent = result.checkpoints[-tc.average_last:]
        averaged = average_checkpoints(recent)
        avg_path = save_checkpoint(out_dir / "average.mnat", model_cfg, averaged, None, result.updates)
    except (TrainingError, OSError) as exc:
        raise CliError(f"training failed: {exc}", EXIT_TRAIN) from exc
    final = result.history[-1]
    summary = {
        "updates": result.updates, "epochs": result.epochs, "averaged_checkpoints": len(recent),
        "checkpoint": str(avg_path),
        "nll1": final.nll1, "nll2": final.nll2, "nll3": final.nll3, "kld1": final.kld1, "kld2": final.kld2,
        "len": final.len_loss, "total": final.total, "k_used": final.k_used,
    }
    if valid_path is not None:
        valid = data.load_parallel_corpus(valid_path, vocab, model_cfg.max_positions)
        avg_model = NATModel(model_cfg, averaged)
        hyps = translate_corpus(avg_model, [p.source for p in valid], cfg.decode("iterations"),
                                cfg.decode("candidates"), cfg.decode("batch_size"))
        summary["valid_bleu"] = bleu([h.tokens for h in hyps], [p.target for p in valid]).bleu
    figure = cfg.path("figure")
    if figure is not None:
        from .plotting import training_curves

        rows = [parse_log_line(line) for line in Path(log_path).read_text().splitlines() if line]
        training_curves(rows, figure)
        summary["figure"] = str(figure)
    emit_block(summary)
    return 0


def cmd_translate(cfg: RunConfig) -> int:
    model, vocab = _load_model(cfg)
    src_path = _existing(cfg, "input", "--input")
    try:
        sources = data.load_source_file(src_path, vocab)
    except data.DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    too_long = [i + 1 for i, s in enumerate(sources) if len(s) + 1 > model.config.max_positions]
    if too_long:
        raise CliError(f"{src_path}: line {too_long[0]} exceeds max_positions", EXIT_DATA)
    hyps = translate_corpus(model, sources, cfg.decode("iterations"), cfg.decode("candidates"),
                            cfg.decode("batch_size")) if sources else []
    text = "".join(vocab.detokenize(h.tokens) + "\n" for h in hyps)
    out = cfg.path("output")
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")
        log.info("wrote %d hypotheses to %s", len(hyps), out)
    return 0


def _read_tokenized(path: Path, target_column: bool) -> list[list[str]]:
    rows = []
    for line in data.read_lines(path):
        if target_column and "\t" in line:
            line = line.split("\t", 1)[1]
        rows.append(line.split())
    return rows


def cmd_evaluate(cfg: RunConfig) -> int:
    hyp_path = _existing(cfg, "hyp", "--hyp")
    ref_path = _existing(cfg, "ref", "--ref")
    hyps = _read_tokenized(hyp_path, target_column=False)
    refs = _read_tokenized(ref_path, target_column=True)
    if len(hyps) != len(refs):
        raise CliError(f"line count mismatch: {hyp_path} has {len(hyps)}, {ref_path} has {len(refs)}", EXIT_DATA)
    if not hyps:
        raise CliError("empty hypothesis file", EXIT_DATA)
    report = bleu(hyps, refs)
    values = report.as_dict()
    values["repetition_rate"] = repetition_rate(hyps)
    values["sentences"] = len(hyps)
    print("metric\tvalue")
    for k, v in values.items():
        print(f"{k}\t{v}")
    figure = cfg.path("figure")
    if figure is not None:
        from .plotting import ngram_precisions

        ngram_precisions(report.precisions, report.bleu, figure)
        values["figure"] = str(figure)
    emit_block(values)
    return 0


def cmd_probe(cfg: RunConfig) -> int:
    model, vocab = _load_model(cfg)
    corpus = _existing(cfg, "corpus", "--corpus")
    try:
        pairs = data.load_parallel_corpus(corpus, vocab, model.config.max_positions)
    except data.DataError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if not pairs:
        raise CliError(f"{corpus}: no usable sentence pairs", EXIT_DATA)
    size = int(cfg.probe("sample_size"))
    if size > len(pairs):
        log.warning("sample_size %d exceeds corpus size %d; clamped", size, len(pairs))
        size = len(pairs)
    rng = np.random.default_rng(int(cfg.probe("seed")))
    try:
        report = similarity_probe(model, pairs, float(cfg.probe("beta")), int(cfg.probe("K")), rng, size)
    except ValueError as exc:
        raise CliError(f"probe failed: {exc}", EXIT_DATA) from exc
    lines = ["bin_lo\tbin_hi\tcount"]
    for lo, hi, c in zip(report.bin_edges[:-1], report.bin_edges[1:], report.counts):
        lines.append(f"{lo:.1f}\t{hi:.1f}\t{c}")
    table = "\n".join(lines) + "\n"
    out = cfg.path("output")
    if out is not None:
        out.write_text(table, encoding="utf-8")
    print(table, end="")
    values = {"mean_similarity": report.mean, "tokens": int(sum(report.counts)), "sentences": size,
              "beta": float(cfg.probe("beta")), "K": int(cfg.probe("K"))}
    figure = cfg.path("figure")
    if figure is not None:
        from .plotting import similarity_histogram

        similarity_histogram(report.bin_edges, {Path(cfg.path("checkpoint")).stem: report.counts}, figure)
        values["figure"] = str(figure)
    emit_block(values)
    return 0


def cmd_synth(cfg: RunConfig) -> int:
    out = _require(cfg, "output", "--output")
    try:
        pairs = data.generate_synthetic_task(
            cfg.synth("kind"), cfg.synth("vocab_size"), cfg.synth("count"), cfg.synth("max_len"),
            cfg.synth("seed"), cfg.synth("min_len"), cfg.synth("table_seed"))
    except data.DataError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    data.save_parallel_corpus(out, pairs, data.synthetic_vocab(cfg.synth("vocab_size")))
    emit_block({"pairs": len(pairs), "output": str(out)})
    return 0


COMMANDS = {"train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate, "probe": cmd_probe,
            "synth": cmd_synth}

# flag -> config key
FLAG_KEYS = {
    "train": {
        "train": "paths.train", "valid": "paths.valid", "vocab": "paths.vocab",
        "checkpoint_dir": "paths.checkpoint_dir", "log": "paths.log", "figure": "paths.figure",
        "beta": "train.beta", "gamma": "train.gamma", "K": "train.K", "objective": "train.objective",
        "cr_sign": "train.cr_sign", "label_smoothing": "train.label_smoothing", "lr": "train.base_lr",
        "warmup": "train.warmup", "token_budget": "train.token_budget", "max_updates": "train.max_updates",
        "max_epochs": "train.max_epochs", "checkpoint_every": "train.checkpoint_every",
        "average_last": "train.average_last", "weight_decay": "train.weight_decay",
        "model_dim": "model.model_dim", "hidden_dim": "model.hidden_dim", "layers_enc": "model.layers_enc",
        "layers_dec": "model.layers_dec", "heads": "model.heads", "max_positions": "model.max_positions",
        "max_length_bins": "model.max_length_bins", "dropout": "model.dropout_rate",
        "iterations": "decode.iterations", "candidates": "decode.candidates",
    },
    "translate": {
        "checkpoint": "paths.checkpoint", "vocab": "paths.vocab", "input": "paths.input",
        "output": "paths.output", "iterations": "decode.iterations", "candidates": "decode.candidates",
        "batch_size": "decode.batch_size",
    },
    "evaluate": {"hyp": "paths.hyp", "ref": "paths.ref", "figure": "paths.figure"},
    "probe": {
        "checkpoint": "paths.checkpoint", "vocab": "paths.vocab", "corpus": "paths.corpus",
        "output": "paths.output", "figure": "paths.figure", "beta": "probe.beta", "K": "probe.K",
        "sample_size": "probe.sample_size",
    },
    "synth": {
        "output": "paths.output", "kind": "synth.kind", "vocab_size": "synth.vocab_size", "count": "synth.count",
        "max_len": "synth.max_len", "min_len": "synth.min_len", "table_seed": "synth.table_seed",
    },
}

FLAG_TYPES = {
    "beta": float, "gamma": float, "cr_sign": float, "label_smoothing": float, "lr": float, "weight_decay": float,
    "dropout": float, "K": int, "warmup": int, "token_budget": int, "max_updates": int, "max_epochs": int,
    "checkpoint_every": int, "average_last": int, "model_dim": int, "hidden_dim": int, "layers_enc": int,
    "layers_dec": int, "heads": int, "max_positions": int, "max_length_bins": int, "iterations": int,
    "candidates": int, "batch_size": int, "sample_size": int, "vocab_size": int, "count": int, "max_len": int,
    "min_len": int, "table_seed": int,
}

SEED_KEYS = {"train": ("train.seed", "model.seed"), "probe": ("probe.seed",), "synth": ("synth.seed",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnat", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="seed for every random stream of the command")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in FLAG_KEYS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        # global flags are also accepted after the command name
        p.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        for flag in flags:
            opt = "--" + flag.replace("_", "-")
            kwargs = {"dest": flag, "default": None, "type": FLAG_TYPES.get(flag, str)}
            if flag == "objective":
                kwargs["choices"] = ("eecr", "cmlm")
            if flag == "K":
                opt = "--K"
            p.add_argument(opt, **kwargs)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, flag) for flag, key in FLAG_KEYS[args.command].items()}
    if args.seed is not None:
        for key in SEED_KEYS.get(args.command, ()):
            flags[key] = args.seed
    return merge(file_values, flags)


def main(argv: Sequence[str] | None = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; here 2 means a data error
        return 0 if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigFileError as exc:
        print(f"mnat: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"mnat: {exc}", file=sys.stderr)
        return exc.code
    except data.DataError as exc:
        print(f"mnat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
