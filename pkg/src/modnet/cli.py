"""Command-line entry point.

Subcommands: make-synthetic, split-data, build-vocab, train, translate,
evaluate, zero-shot, increment, probe, report, plus ``run`` which chains the
whole pipeline.  Exit codes: 0 success, 2 configuration error, 3 runtime or
numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as dk
from .config import ExperimentConfig
from .data import Direction, _hash_seed, pair_key
from .errors import CheckpointError, ConfigurationError, ModnetError, NumericFailure
from .evaluation import translate_sentence, zero_shot_matrix
from .experiment import (RunManifest, build_model, prepare_data, run_experiment,
                         run_increment)
from .probe import mono_direction_eval, similarity_report
from .training import append_metrics, load_checkpoint, train


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", metavar="PATH", required=config_required,
                        help="experiment config file (flat key = value lines)")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--seed", metavar="N", type=int, help="override the config seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="suppress wall-clock fields so reruns are byte-identical")
    parser.add_argument("--preset", choices=["desk", "base", "large"],
                        help="override the transformer preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modnet",
                                     description="multilingual translation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in [
        ("run", "run the full pipeline: data, vocab, train, evaluate, probe"),
        ("make-synthetic", "generate synthetic multi-parallel corpora"),
        ("split-data", "divide the corpus into per-pair bitext files"),
        ("build-vocab", "build and write vocabularies"),
        ("train", "prepare data and train a model"),
        ("evaluate", "score the trained directions on the test set"),
        ("zero-shot", "score every ordered language pair, trained or not"),
        ("increment", "add a language to a frozen modular checkpoint"),
        ("probe", "encoder-space similarity and mono-direction scores"),
    ]:
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name in ("evaluate", "zero-shot", "probe", "translate"):
            p.add_argument("--checkpoint", metavar="PATH",
                           help="checkpoint to load (default <out>/checkpoint_best.bin)")

    p = sub.add_parser("translate", help="translate stdin or a file, one sentence per line")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--direction", metavar="SRC-TGT", required=True)
    p.add_argument("--input", metavar="PATH", help="source file (default stdin)")

    p = sub.add_parser("report", help="comparison tables and figures across runs")
    _add_common(p, config_required=False)
    p.add_argument("runs", nargs="+", metavar="RUN_DIR",
                   help="run directories containing manifest.json")
    return parser


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.from_file(
        Path(args.config), seed=args.seed, out=args.out,
        preset_name=args.preset, deterministic=args.deterministic)


def _checkpoint_path(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    base = Path(args.out or cfg.out or ".")
    return base / "checkpoint_best.bin"


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.out or ".")


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    if cfg.increment is not None:
        run_increment(cfg, _out_dir(args, cfg))
    else:
        run_experiment(cfg, _out_dir(args, cfg))
    return 0


def _cmd_make_synthetic(args) -> int:
    cfg = _load_config(args)
    prepare_data(cfg, persist_dir=_out_dir(args, cfg))
    return 0


def _cmd_split_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = prepare_data(cfg, persist_dir=out)
    pair_dir = out / "data" / "pairs"
    for pair, bitext in sorted(data.train_pairs.items()):
        dk.write_pair_files(pair_dir, data.plan.part_of(*pair), bitext)
    data.plan.save(out / "data" / "split_plan.txt")
    return 0


def _cmd_build_vocab(args) -> int:
    cfg = _load_config(args)
    prepare_data(cfg, persist_dir=_out_dir(args, cfg))
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = prepare_data(cfg, persist_dir=out)
    model = build_model(cfg, data)
    train(model, data.train_pairs, data.valid_pairs, data.directions, cfg.train,
          cfg.seed, out_dir=out, metrics_path=out / "metrics.jsonl",
          deterministic=cfg.deterministic, config_digest=cfg.digest())
    return 0


def _cmd_translate(args) -> int:
    cfg = _load_config(args)
    model, _, _, _ = load_checkpoint(_checkpoint_path(args, cfg))
    direction = Direction.parse(args.direction)
    source = (Path(args.input).read_text(encoding="utf-8").splitlines()
              if args.input else sys.stdin.read().splitlines())
    for line in source:
        if line.strip():
            print(" ".join(translate_sentence(model, direction, line.strip(), cfg.decode)))
        else:
            print()
    return 0


def _cmd_evaluate(args, all_pairs: bool = False) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = load_checkpoint(_checkpoint_path(args, cfg))
    data = prepare_data(cfg)
    supervised = data.directions
    directions = supervised
    if all_pairs or cfg.eval_zero_shot:
        directions = [Direction(a, b) for a in model.languages
                      for b in model.languages if a != b]
    matrix = zero_shot_matrix(model, directions, data.test_pairs, cfg.decode,
                              supervised=supervised, limit=cfg.eval_limit)
    matrix.save_tsv(out / "matrix.tsv")
    (out / "matrix.txt").write_text(matrix.render_text() + "\n", encoding="utf-8")
    for record in matrix.records(cfg.seed):
        append_metrics(out / "metrics.jsonl", record)
    print(matrix.render_text())
    return 0


def _cmd_probe(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = load_checkpoint(_checkpoint_path(args, cfg))
    data = prepare_data(cfg)
    report = similarity_report(model, data.test_corpus, cfg.probe_pairs,
                               _hash_seed(cfg.seed, "probe"))
    for record in report.records(cfg.seed):
        append_metrics(out / "metrics.jsonl", record)
        print(record)
    for lang in cfg.probe_mono:
        entry = mono_direction_eval(model, lang, data.test_corpus.column(lang),
                                    cfg.decode, limit=cfg.eval_limit)
        rec = {"type": "probe_mono", "language": lang, "bleu": entry.bleu,
               "accuracy": entry.accuracy, "seed": cfg.seed}
        append_metrics(out / "metrics.jsonl", rec)
        print(rec)
    return 0


def _cmd_increment(args) -> int:
    cfg = _load_config(args)
    run_increment(cfg, _out_dir(args, cfg))
    return 0


def _cmd_report(args) -> int:
    from .reporting import write_report

    tiers = None
    if args.config:
        cfg = _load_config(args)
        if cfg.size_plan is not None:
            tiers = cfg.size_plan.tiers
    out = Path(args.out or "report")
    written = write_report([Path(p) for p in args.runs], out, tiers)
    for path in written:
        print(path)
    return 0


COMMANDS = {
    "run": _cmd_run,
    "make-synthetic": _cmd_make_synthetic,
    "split-data": _cmd_split_data,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": lambda a: _cmd_evaluate(a, all_pairs=False),
    "zero-shot": lambda a: _cmd_evaluate(a, all_pairs=True),
    "increment": _cmd_increment,
    "probe": _cmd_probe,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except (NumericFailure, ModnetError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
