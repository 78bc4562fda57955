"""Comparison reports across runs: aligned text tables, delimited records and
matplotlib figures rendered to files.

The comparison table mirrors the per-direction layout used throughout this
project: one row per direction, one column per model family, with the
difference from the dedicated single models in parentheses when those are
available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import Direction, pair_key
from .errors import ConfigurationError
from .evaluation import TranslationMatrix
from .experiment import RunManifest

KIND_LABELS = {"single": "Single", "one_to_one": "1-1", "m2": "M2",
               "m2-increment": "M2+inc"}
KIND_ORDER = ["single", "one_to_one", "m2", "m2-increment"]


@dataclass
class RunData:
    path: Path
    manifest: RunManifest
    matrix: TranslationMatrix
    metrics: list[dict]
    config: dict[str, str]

    @property
    def kind(self) -> str:
        return self.manifest.kind

    def label(self) -> str:
        return KIND_LABELS.get(self.kind, self.kind)


def load_run(run_dir: Path) -> RunData:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no manifest.json under {run_dir}")
    manifest = RunManifest.load(manifest_path)
    matrix_path = run_dir / "matrix.tsv"
    matrix = TranslationMatrix.load_tsv(matrix_path) if matrix_path.exists() else TranslationMatrix()
    metrics = []
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        for line in metrics_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                metrics.append(json.loads(line))
    config = {}
    return RunData(run_dir, manifest, matrix, metrics, config)


def _ordered(runs: list[RunData]) -> list[RunData]:
    return sorted(runs, key=lambda r: (KIND_ORDER.index(r.kind)
                                       if r.kind in KIND_ORDER else 99, str(r.path)))


def _fmt_cell(value: float | None, baseline: float | None) -> str:
    if value is None:
        return "-"
    if baseline is None:
        return f"{value:.2f}"
    return f"{value:.2f} ({value - baseline:+.2f})"


def comparison_table(runs: list[RunData]) -> str:
    """Per-direction BLEU of every run side by side, deltas against the
    single-model run when one is present; missing values render as '-'."""
    runs = _ordered(runs)
    baseline = next((r for r in runs if r.kind == "single"), None)
    directions = sorted({d for r in runs for d in r.matrix.entries}, key=str)
    width = 17
    header = f"{'Pairs':<10}" + "".join(f"{r.label():>{width}}" for r in runs)
    lines = [header, "-" * len(header)]
    for d in directions:
        row = f"{str(d):<10}"
        base = baseline.matrix.entries[d].bleu if baseline and d in baseline.matrix.entries else None
        for r in runs:
            e = r.matrix.entries.get(d)
            cell = _fmt_cell(e.bleu if e else None,
                             None if r is baseline else base)
            row += f"{cell:>{width}}"
        lines.append(row)
    lines.append("-" * len(header))
    row = f"{'Avg':<10}"
    base_avg = baseline.matrix.average_bleu() if baseline else None
    for r in runs:
        avg = r.matrix.average_bleu() if r.matrix.entries else None
        row += f"{_fmt_cell(avg, None if r is baseline else base_avg):>{width}}"
    lines.append(row)
    return "\n".join(lines)


def _tiers_of(run: RunData) -> dict[str, str]:
    tiers = {}
    raw = run.config.get("size.tiers", "")
    for item in raw.split():
        pair_text, _, tier = item.partition(":")
        tiers[pair_text] = tier
    return tiers


def tier_table(runs: list[RunData], tiers: dict[tuple[str, str], str]) -> str:
    """Resource-tier grouping (High/Medium/Low plus averages) of a comparison."""
    runs = _ordered(runs)
    baseline = next((r for r in runs if r.kind == "single"), None)
    width = 17
    header = f"{'Resource':<10}{'Pairs':<10}" + "".join(f"{r.label():>{width}}" for r in runs)
    lines = [header, "-" * len(header)]
    for tier in ("high", "medium", "low"):
        pairs = sorted(p for p, t in tiers.items() if t == tier)
        dirs = []
        for a, b in pairs:
            dirs.extend([Direction(a, b), Direction(b, a)])
        group_vals: dict[int, list[float]] = {}
        first = True
        for d in sorted(dirs, key=str):
            row = f"{tier.capitalize() if first else '':<10}{str(d):<10}"
            first = False
            base = (baseline.matrix.entries[d].bleu
                    if baseline and d in baseline.matrix.entries else None)
            for i, r in enumerate(runs):
                e = r.matrix.entries.get(d)
                if e:
                    group_vals.setdefault(i, []).append(e.bleu)
                row += f"{_fmt_cell(e.bleu if e else None, None if r is baseline else base):>{width}}"
            lines.append(row)
        row = f"{'':<10}{'Avg':<10}"
        base_vals = group_vals.get(runs.index(baseline)) if baseline in runs else None
        base_avg = float(np.mean(base_vals)) if base_vals else None
        for i, r in enumerate(runs):
            vals = group_vals.get(i)
            avg = float(np.mean(vals)) if vals else None
            row += f"{_fmt_cell(avg, None if r is baseline else base_avg):>{width}}"
        lines.append(row)
        lines.append("-" * len(header))
    return "\n".join(lines)


def zero_shot_table(run: RunData) -> str:
    """Zero-shot vs pivot BLEU for an increment run."""
    pivots = {rec["direction"]: rec for rec in run.metrics if rec.get("type") == "pivot"}
    header = f"{'direction':<12}{'zero-shot':>10}{'pivot':>10}{'delta':>8}"
    lines = [header, "-" * len(header)]
    for d in sorted(pivots):
        rec = pivots[d]
        delta = rec["zero_shot_bleu"] - rec["pivot_bleu"]
        lines.append(f"{d:<12}{rec['zero_shot_bleu']:>10.2f}{rec['pivot_bleu']:>10.2f}"
                     f"{delta:>+8.2f}")
    return "\n".join(lines)


def similarity_table(run: RunData) -> str:
    sims = [r for r in run.metrics if r.get("type") == "probe_similarity"]
    monos = [r for r in run.metrics if r.get("type") == "probe_mono"]
    header = f"{'pair':<12}{'cosine':>10}"
    lines = [header, "-" * len(header)]
    for rec in sims:
        lines.append(f"{rec['pair']:<12}{rec['cosine']:>10.4f}")
    for rec in monos:
        lines.append(f"{'mono-' + rec['language']:<12}{rec['bleu']:>10.2f}")
    return "\n".join(lines)


def merged_records_tsv(runs: list[RunData]) -> str:
    lines = ["run\tkind\tseed\tdirection\tbleu\taccuracy\tn_sentences\tsupervised"]
    for r in _ordered(runs):
        for d in sorted(r.matrix.entries, key=str):
            e = r.matrix.entries[d]
            lines.append(f"{r.path.name}\t{r.kind}\t{r.manifest.seed}\t{d}"
                         f"\t{e.bleu:.4f}\t{e.accuracy:.6f}\t{e.n_sentences}"
                         f"\t{int(e.supervised)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def fig_bleu_by_direction(runs: list[RunData], path: Path) -> None:
    runs = _ordered(runs)
    directions = sorted({d for r in runs for d in r.matrix.entries}, key=str)
    if not directions:
        return
    x = np.arange(len(directions))
    width = 0.8 / max(len(runs), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(directions) * 0.7), 4))
    for i, r in enumerate(runs):
        vals = [r.matrix.entries[d].bleu if d in r.matrix.entries else 0.0
                for d in directions]
        ax.bar(x + i * width, vals, width, label=r.label())
    ax.set_xticks(x + width * (len(runs) - 1) / 2)
    ax.set_xticklabels([str(d) for d in directions], rotation=45, ha="right")
    ax.set_ylabel("BLEU")
    ax.set_title("Test BLEU by direction")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_training_curves(runs: list[RunData], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for r in _ordered(runs):
        epochs = [m["epoch"] for m in r.metrics if m.get("type") == "train_epoch"]
        losses = [m["valid_avg"] for m in r.metrics if m.get("type") == "train_epoch"]
        if epochs:
            ax.plot(epochs, losses, marker="o", markersize=2.5, label=r.label())
            plotted = True
    if not plotted:
        plt.close(fig)
        return
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss (avg)")
    ax.set_title("Validation loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_similarity(run: RunData, path: Path) -> None:
    sims = [r for r in run.metrics if r.get("type") == "probe_similarity"]
    if not sims:
        return
    labels = [r["pair"] for r in sims]
    values = [r["cosine"] for r in sims]
    colors = ["tab:gray" if lab == "control" else "tab:blue" for lab in labels]
    fig, ax = plt.subplots(figsize=(max(4, len(labels) * 0.8), 4))
    ax.bar(labels, values, color=colors)
    ax.set_ylabel("mean cosine similarity")
    ax.set_title("Encoder-output similarity (aligned vs control)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_zero_shot(run: RunData, path: Path) -> None:
    pivots = {r["direction"]: r for r in run.metrics if r.get("type") == "pivot"}
    if not pivots:
        return
    dirs = sorted(pivots)
    x = np.arange(len(dirs))
    fig, ax = plt.subplots(figsize=(max(4, len(dirs) * 0.9), 4))
    ax.bar(x - 0.2, [pivots[d]["zero_shot_bleu"] for d in dirs], 0.4, label="zero-shot")
    ax.bar(x + 0.2, [pivots[d]["pivot_bleu"] for d in dirs], 0.4, label="pivot")
    ax.set_xticks(x)
    ax.set_xticklabels(dirs, rotation=45, ha="right")
    ax.set_ylabel("BLEU")
    ax.set_title("Zero-shot vs pivot translation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_dirs: list[Path], out: Path,
                 tiers: dict[tuple[str, str], str] | None = None) -> list[Path]:
    """Render all applicable tables, the merged TSV and the figures."""
    runs = [load_run(p) for p in run_dirs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)

    sections = ["== Test BLEU by direction ==", comparison_table(runs)]
    if tiers:
        sections += ["", "== Resource tiers ==", tier_table(runs, tiers)]
    for r in runs:
        if any(m.get("type") == "pivot" for m in r.metrics):
            sections += ["", f"== Zero-shot vs pivot ({r.path.name}) ==",
                         zero_shot_table(r)]
        if any(m.get("type", "").startswith("probe") for m in r.metrics):
            sections += ["", f"== Encoder-space probes ({r.path.name}) ==",
                         similarity_table(r)]
    report_txt = out / "report.txt"
    report_txt.write_text("\n".join(sections) + "\n", encoding="utf-8")
    report_tsv = out / "report.tsv"
    report_tsv.write_text(merged_records_tsv(runs), encoding="utf-8")

    written = [report_txt, report_tsv]
    fig_bleu_by_direction(runs, fig_dir / "bleu_by_direction.png")
    fig_training_curves(runs, fig_dir / "training_curves.png")
    for r in runs:
        fig_similarity(r, fig_dir / f"similarity_{r.path.name}.png")
        fig_zero_shot(r, fig_dir / f"zero_shot_{r.path.name}.png")
    written.extend(sorted(fig_dir.glob("*.png")))
    return written
