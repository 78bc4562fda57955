"""End-to-end experiment orchestration.

``run_experiment`` chains generate -> split -> vocab -> assemble -> train ->
evaluate -> probe and leaves every artifact plus a manifest under the output
directory.  ``run_increment`` implements language extension: load a modular
checkpoint, freeze everything, add the new language's modules, train them on
the anchor (and auxiliary) directions, then evaluate supervised, zero-shot
and pivot-baseline performance.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import data as dk
from .config import ExperimentConfig
from .data import (Bitext, Direction, MultiParallelCorpus, SplitPlan,
                   SyntheticLanguageSpec, Vocabulary, _hash_seed, pair_key)
from .errors import CheckpointError, ConfigurationError, PivotError
from .evaluation import (TranslationMatrix, corpus_bleu, pivot_translate,
                         zero_shot_matrix)
from .models import ModelKind, MultiModel, add_language, assemble, freeze
from .probe import mono_direction_eval, similarity_report
from .training import append_metrics, load_checkpoint, train


@dataclass
class PreparedData:
    languages: list[str]
    specs: dict[str, SyntheticLanguageSpec]
    plan: SplitPlan
    vocabs: dict[str, Vocabulary]
    train_pairs: dict[tuple[str, str], Bitext]
    valid_pairs: dict[tuple[str, str], Bitext]
    test_pairs: dict[tuple[str, str], Bitext]
    test_corpus: MultiParallelCorpus
    directions: list[Direction]


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    kind: str
    started: str = ""
    finished: str = ""
    status: str = "pending"
    stages: list[str] = field(default_factory=list)
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    rerun: bool = False

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def prepare_data(cfg: ExperimentConfig, persist_dir: Path | None = None) -> PreparedData:
    """Generate the synthetic multi-parallel corpora and divide them."""
    specs = dk.make_language_specs(cfg.languages, cfg.concept_vocab,
                                   _hash_seed(cfg.seed, "data"), cfg.reorders)
    lengths = (cfg.min_len, cfg.max_len)
    gen_seed = _hash_seed(cfg.seed, "data")
    corpora = {
        "train": dk.synth_generate(specs, cfg.rows, lengths, cfg.concept_vocab,
                                   _hash_seed(gen_seed, "train")),
        "valid": dk.synth_generate(specs, cfg.valid_rows, lengths, cfg.concept_vocab,
                                   _hash_seed(gen_seed, "valid")),
        "test": dk.synth_generate(specs, cfg.test_rows, lengths, cfg.concept_vocab,
                                  _hash_seed(gen_seed, "test")),
    }
    parts = cfg.num_parts()
    split = dk.split_sharing if cfg.sharing else dk.split_nonsharing
    plan, train_pairs = split(corpora["train"], parts, _hash_seed(gen_seed, "split", "train"))
    # validation/test division never depends on the sharing mode
    _, valid_pairs = dk.split_nonsharing(corpora["valid"], parts,
                                         _hash_seed(gen_seed, "split", "valid"))
    _, test_pairs = dk.split_nonsharing(corpora["test"], parts,
                                        _hash_seed(gen_seed, "split", "test"))

    if cfg.size_plan is not None:
        plan_obj = dk.SizePlan(cfg.size_plan.tiers, cfg.size_plan.ratio,
                               cfg.size_plan.high_amount)
        train_pairs = dk.apply_size_plan(train_pairs, plan_obj, _hash_seed(gen_seed, "size"))

    if cfg.kind is ModelKind.ONE_TO_ONE:
        vocabs = dk.build_vocab({lang: corpora["train"].column(lang) for lang in cfg.languages},
                                "joint", cfg.joint_size(), cfg.languages)
    else:
        vocabs = dk.build_vocab({lang: corpora["train"].column(lang) for lang in cfg.languages},
                                "per_language", cfg.per_language_vocab_size())

    if persist_dir is not None:
        data_dir = Path(persist_dir) / "data"
        for split_name, corpus in corpora.items():
            corpus.save(data_dir, split_name)
        plan.save(data_dir / "split_plan.txt")
        vocab_dir = Path(persist_dir) / "vocab"
        vocab_dir.mkdir(parents=True, exist_ok=True)
        for key, vocab in vocabs.items():
            vocab.save(vocab_dir / f"{key}.vocab")

    return PreparedData(cfg.languages, specs, plan, vocabs, train_pairs,
                        valid_pairs, test_pairs, corpora["test"], cfg.directions())


def build_model(cfg: ExperimentConfig, data: PreparedData) -> MultiModel:
    return assemble(cfg.kind, cfg.languages, cfg.transformer, dict(data.vocabs),
                    data.directions, seed=_hash_seed(cfg.seed, "init"))


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _evaluate_stage(cfg: ExperimentConfig, model: MultiModel, data: PreparedData,
                    out: Path, metrics_path: Path, supervised: list[Direction],
                    directions: list[Direction]) -> TranslationMatrix:
    matrix = zero_shot_matrix(model, directions, data.test_pairs, cfg.decode,
                              supervised=supervised, limit=cfg.eval_limit)
    matrix.save_tsv(out / "matrix.tsv")
    (out / "matrix.txt").write_text(matrix.render_text() + "\n", encoding="utf-8")
    for record in matrix.records(cfg.seed):
        append_metrics(metrics_path, record)
    return matrix


def _probe_stage(cfg: ExperimentConfig, model: MultiModel, data: PreparedData,
                 out: Path, metrics_path: Path) -> None:
    report = similarity_report(model, data.test_corpus, cfg.probe_pairs,
                               _hash_seed(cfg.seed, "probe"))
    lines = ["pair\tcosine"]
    for (a, b), v in sorted(report.per_pair.items()):
        lines.append(f"{a}-{b}\t{v:.6f}")
    lines.append(f"control\t{report.control_mean:.6f}")
    for record in report.records(cfg.seed):
        append_metrics(metrics_path, record)
    for lang in cfg.probe_mono:
        entry = mono_direction_eval(model, lang, data.test_corpus.column(lang),
                                    cfg.decode, limit=cfg.eval_limit)
        lines.append(f"mono-{lang}\t{entry.bleu:.4f}")
        append_metrics(metrics_path, {"type": "probe_mono", "language": lang,
                                      "bleu": entry.bleu, "accuracy": entry.accuracy,
                                      "seed": cfg.seed})
    (out / "probe.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> RunManifest:
    """Execute the full pipeline; artifacts and manifest land under ``out``."""
    out = Path(out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    manifest = RunManifest(cfg.digest(), cfg.seed, cfg.kind.value, started=_now(),
                           status="running")
    if manifest_path.exists():
        try:
            previous = RunManifest.load(manifest_path)
            manifest.rerun = previous.config_digest == manifest.config_digest
        except (ValueError, TypeError):
            pass
    manifest.inputs["config"] = _hash_text(json.dumps(cfg.raw, sort_keys=True))
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()

    stage = "generate"
    try:
        data = prepare_data(cfg, persist_dir=out)
        manifest.stages.append("generate")
        manifest.stages.append("split")
        manifest.stages.append("vocab")

        stage = "assemble"
        model = build_model(cfg, data)
        manifest.stages.append("assemble")

        stage = "train"
        train(model, data.train_pairs, data.valid_pairs, data.directions, cfg.train,
              cfg.seed, out_dir=out, metrics_path=metrics_path,
              deterministic=cfg.deterministic, config_digest=cfg.digest())
        manifest.stages.append("train")

        stage = "evaluate"
        best = out / "checkpoint_best.bin"
        if best.exists():
            model, _, _, _ = load_checkpoint(best)
        directions = data.directions
        if cfg.eval_zero_shot:
            directions = [Direction(a, b) for a in cfg.languages for b in cfg.languages
                          if a != b]
        _evaluate_stage(cfg, model, data, out, metrics_path, data.directions, directions)
        manifest.stages.append("evaluate")

        if cfg.kind is not ModelKind.SINGLE:
            stage = "probe"
            _probe_stage(cfg, model, data, out, metrics_path)
            manifest.stages.append("probe")

        manifest.status = "success"
    except Exception:
        manifest.status = f"failed:{stage}"
        manifest.finished = _now()
        manifest.save(manifest_path)
        raise
    manifest.finished = _now()
    manifest.artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                                if p.is_file() and p.name != "manifest.json")
    manifest.save(manifest_path)
    return manifest


def run_increment(cfg: ExperimentConfig, out: Path | None = None) -> RunManifest:
    """Freeze a trained modular checkpoint, add one language, train and score it."""
    if cfg.increment is None:
        raise ConfigurationError("increment.* keys are required for an increment run")
    if cfg.kind is not ModelKind.M2:
        raise ConfigurationError("incremental training requires model.kind = m2")
    inc = cfg.increment
    out = Path(out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.digest(), cfg.seed, "m2-increment", started=_now(),
                           status="running")
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()

    stage = "load-base"
    try:
        base_model, _, _, base_meta = load_checkpoint(inc.base_checkpoint)
        if base_model.kind is not ModelKind.M2:
            raise CheckpointError("the base checkpoint is not a modular model")
        if inc.language in base_model.languages:
            raise ConfigurationError(
                f"language '{inc.language}' is already part of the base model")
        manifest.inputs["base_checkpoint"] = _hash_text(str(inc.base_checkpoint))
        manifest.stages.append("load-base")

        stage = "generate"
        data = prepare_data(cfg, persist_dir=out)
        manifest.stages.append("generate")

        stage = "extend"
        existing = list(base_model.languages)
        freeze(base_model, existing)
        add_language(base_model, inc.language, data.vocabs[inc.language],
                     init=inc.init, donor=inc.donor)
        # keep the base languages' vocabularies exactly as trained
        for lang in existing:
            data.vocabs[lang] = base_model.vocabs[lang]
        base_model.directions = [Direction(a, b) for a in base_model.languages
                                 for b in base_model.languages if a != b]
        manifest.stages.append("extend")

        stage = "train"
        train_dirs = sorted(
            {Direction(a, inc.language) for a in inc.anchors + inc.aux}
            | {Direction(inc.language, a) for a in inc.anchors + inc.aux}, key=str)
        train(base_model, data.train_pairs, data.valid_pairs, train_dirs, cfg.train,
              cfg.seed, out_dir=out, metrics_path=metrics_path,
              deterministic=cfg.deterministic, config_digest=cfg.digest())
        manifest.stages.append("train")

        stage = "evaluate"
        best = out / "checkpoint_best.bin"
        if best.exists():
            base_model, _, _, _ = load_checkpoint(best)
        eval_dirs = sorted(
            {Direction(a, inc.language) for a in existing}
            | {Direction(inc.language, a) for a in existing}, key=str)
        matrix = _evaluate_stage(cfg, base_model, data, out, metrics_path,
                                 train_dirs, eval_dirs)
        manifest.stages.append("evaluate")

        stage = "pivot"
        pivot_lang = inc.anchors[0]
        pivot_rows = ["direction\tpivot_bleu\tzero_shot_bleu"]
        for d in eval_dirs:
            if d in train_dirs or pivot_lang in (d.src, d.tgt):
                continue
            bitext = data.test_pairs[pair_key(d.src, d.tgt)]
            rows = bitext.oriented(d)[:cfg.eval_limit]
            hyps, refs = [], []
            failures = 0
            for src_sent, tgt_sent in rows:
                try:
                    hyps.append(pivot_translate(base_model, Direction(d.src, pivot_lang),
                                                base_model, Direction(pivot_lang, d.tgt),
                                                src_sent, cfg.decode))
                except PivotError:
                    hyps.append([])
                    failures += 1
                refs.append(tgt_sent.split())
            pivot_bleu = corpus_bleu(hyps, refs)
            zs = matrix.entries[d].bleu
            pivot_rows.append(f"{d}\t{pivot_bleu:.4f}\t{zs:.4f}")
            append_metrics(metrics_path, {"type": "pivot", "direction": str(d),
                                          "pivot_bleu": pivot_bleu, "zero_shot_bleu": zs,
                                          "pivot": pivot_lang, "pivot_failures": failures,
                                          "seed": cfg.seed})
        (out / "pivot.tsv").write_text("\n".join(pivot_rows) + "\n", encoding="utf-8")
        manifest.stages.append("pivot")

        if base_model.kind is ModelKind.M2:
            stage = "probe"
            _probe_stage(cfg, base_model, data, out, metrics_path)
            manifest.stages.append("probe")

        manifest.status = "success"
    except Exception:
        manifest.status = f"failed:{stage}"
        manifest.finished = _now()
        manifest.save(out / "manifest.json")
        raise
    manifest.finished = _now()
    manifest.artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                                if p.is_file() and p.name != "manifest.json")
    manifest.save(out / "manifest.json")
    return manifest
