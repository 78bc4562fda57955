"""Config parsing/digests, pipeline runs, manifests, reports, CLI exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from modnet.cli import main
from modnet.config import ExperimentConfig, canonical_text, digest_of, parse_flat
from modnet.errors import ConfigurationError
from modnet.experiment import RunManifest, prepare_data, run_experiment
from modnet.models import ModelKind

BASE_CFG = """
model.kind = m2
model.preset = desk
languages = la lb lc
scheme = m2m
data.rows = 240
data.valid_rows = 45
data.test_rows = 45
data.concept_vocab = 24
data.min_len = 4
data.max_len = 7
train.module_budget = 600
train.max_epochs = 2
train.warmup_steps = 60
train.peak_lr = 2e-3
decode.beam = 2
eval.limit = 6
probe.pairs = 12
probe.mono = la
seed = 5
"""


def _write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- config ------------------------------------------------------------------------

def test_parse_flat_basics():
    m = parse_flat("a.b = 1\n# comment\n\nc = x y z\n")
    assert m == {"a.b": "1", "c": "x y z"}
    with pytest.raises(ConfigurationError):
        parse_flat("novalue\n")
    with pytest.raises(ConfigurationError):
        parse_flat("k = 1\nk = 2\n")


def test_digest_stable_under_key_reordering():
    a = parse_flat("x = 1\ny = 2\n")
    b = parse_flat("y = 2\nx = 1\n")
    assert digest_of(a) == digest_of(b)
    assert canonical_text(a) == canonical_text(b)
    c = parse_flat("x = 1\ny = 3\n")
    assert digest_of(a) != digest_of(c)


def test_config_parses_and_derives(tmp_path):
    cfg = ExperimentConfig.from_file(_write(tmp_path, BASE_CFG))
    assert cfg.kind is ModelKind.M2
    assert cfg.languages == ["la", "lb", "lc"]
    assert len(cfg.directions()) == 6
    assert cfg.num_parts() == 3
    assert cfg.train.module_budget == 600
    assert cfg.decode.beam_size == 2
    assert cfg.seed == 5


def test_config_overrides(tmp_path):
    cfg = ExperimentConfig.from_file(_write(tmp_path, BASE_CFG), seed=9,
                                     preset_name="base", out="/tmp/somewhere")
    assert cfg.seed == 9
    assert cfg.transformer.d_model == 256
    assert str(cfg.out) == "/tmp/somewhere"
    # overrides participate in the digest
    plain = ExperimentConfig.from_file(_write(tmp_path, BASE_CFG, "p.cfg"))
    assert cfg.digest() != plain.digest()


def test_invalid_configs_rejected_before_any_work(tmp_path):
    bad = BASE_CFG.replace("scheme = m2m", "scheme = jm2m")
    with pytest.raises(ConfigurationError, match="center"):
        ExperimentConfig.from_file(_write(tmp_path, bad))
    bad = BASE_CFG + "scheme.center = zz\n"
    bad = bad.replace("scheme = m2m", "scheme = jm2m")
    with pytest.raises(ConfigurationError, match="zz"):
        ExperimentConfig.from_file(_write(tmp_path, bad))
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(_write(tmp_path, BASE_CFG.replace(
            "model.kind = m2", "model.kind = hydra")))
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_file(_write(tmp_path, BASE_CFG + "data.parts = 2\n"))


def test_jm2m_directions(tmp_path):
    text = BASE_CFG.replace("scheme = m2m", "scheme = jm2m") + "scheme.center = la\n"
    cfg = ExperimentConfig.from_file(_write(tmp_path, text))
    dirs = cfg.directions()
    assert len(dirs) == 4
    assert all("la" in (d.src, d.tgt) for d in dirs)


# -- prepared data -----------------------------------------------------------------

def test_prepare_data_persists_artifacts(tmp_path):
    cfg = ExperimentConfig.from_file(_write(tmp_path, BASE_CFG))
    data = prepare_data(cfg, persist_dir=tmp_path / "out")
    assert (tmp_path / "out/data/train.la").exists()
    assert (tmp_path / "out/data/split_plan.txt").exists()
    assert (tmp_path / "out/vocab/la.vocab").exists()
    assert set(data.train_pairs) == {("la", "lb"), ("la", "lc"), ("lb", "lc")}
    # every pair's rows are disjoint from every overlapping pair's
    for pa in data.train_pairs:
        for pb in data.train_pairs:
            if pa != pb and set(pa) & set(pb):
                assert not (set(data.train_pairs[pa].row_ids)
                            & set(data.train_pairs[pb].row_ids))


def test_sharing_mode_changes_training_rows_only(tmp_path):
    cfg_ns = ExperimentConfig.from_file(_write(tmp_path, BASE_CFG))
    cfg_sh = ExperimentConfig.from_file(
        _write(tmp_path, BASE_CFG + "data.sharing = sharing\n", "share.cfg"))
    a = prepare_data(cfg_ns)
    b = prepare_data(cfg_sh)
    pair = ("la", "lb")
    assert a.valid_pairs[pair].row_ids == b.valid_pairs[pair].row_ids
    assert a.test_pairs[pair].row_ids == b.test_pairs[pair].row_ids
    shared_ids = {frozenset(bt.row_ids) for bt in b.train_pairs.values()}
    assert len(shared_ids) == 1


# -- full runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg_path = root / "exp.cfg"
    cfg_path.write_text(BASE_CFG, encoding="utf-8")
    cfg = ExperimentConfig.from_file(cfg_path, deterministic=True)
    out = root / "run_a"
    manifest = run_experiment(cfg, out)
    return root, cfg_path, out, manifest


def test_run_produces_manifest_and_artifacts(tiny_run):
    _, _, out, manifest = tiny_run
    assert manifest.status == "success"
    assert manifest.stages == ["generate", "split", "vocab", "assemble", "train",
                               "evaluate", "probe"]
    for name in ("manifest.json", "metrics.jsonl", "matrix.tsv", "matrix.txt",
                 "checkpoint_best.bin", "checkpoint_last.bin", "probe.tsv"):
        assert (out / name).exists(), name
    loaded = RunManifest.load(out / "manifest.json")
    assert loaded.config_digest == manifest.config_digest
    assert "matrix.tsv" in loaded.artifacts


def test_deterministic_rerun_is_byte_identical(tiny_run):
    root, cfg_path, out, _ = tiny_run
    first = (out / "metrics.jsonl").read_bytes()
    cfg = ExperimentConfig.from_file(cfg_path, deterministic=True)
    out2 = root / "run_b"
    run_experiment(cfg, out2)
    assert (out2 / "metrics.jsonl").read_bytes() == first
    assert ((out2 / "checkpoint_best.bin").read_bytes()
            == (out / "checkpoint_best.bin").read_bytes())


def test_rerun_detection_same_digest(tiny_run):
    root, cfg_path, out, _ = tiny_run
    cfg = ExperimentConfig.from_file(cfg_path, deterministic=True)
    manifest = run_experiment(cfg, out)
    assert manifest.rerun


def test_metrics_records_have_expected_shape(tiny_run):
    _, _, out, _ = tiny_run
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    kinds = {r["type"] for r in records}
    assert {"train_epoch", "eval", "probe_similarity", "probe_mono"} <= kinds
    epoch = next(r for r in records if r["type"] == "train_epoch")
    assert epoch["tokens_per_sec"] == 0.0  # deterministic mode
    assert set(epoch["train_loss"]) == set(epoch["valid_loss"])
    ev = next(r for r in records if r["type"] == "eval")
    assert {"direction", "bleu", "accuracy", "supervised", "seed"} <= set(ev)


def test_report_generation(tiny_run, tmp_path):
    from modnet.reporting import load_run, comparison_table, write_report

    _, _, out, _ = tiny_run
    run = load_run(out)
    table = comparison_table([run])
    assert "Pairs" in table and "la-lb" in table and "Avg" in table
    written = write_report([out], tmp_path / "report")
    names = {p.name for p in written}
    assert "report.txt" in names and "report.tsv" in names
    assert any(p.suffix == ".png" for p in written)
    # single run: no delta parentheses since there is no single baseline
    assert "(" not in table.splitlines()[2]


def test_failed_stage_recorded(tmp_path):
    # a per-direction budget below the longest sentence cannot batch
    text = BASE_CFG.replace("train.module_budget = 600", "train.module_budget = 3")
    cfg = ExperimentConfig.from_file(_write(tmp_path, text))
    out = tmp_path / "broken"
    with pytest.raises(Exception):
        run_experiment(cfg, out)
    manifest = RunManifest.load(out / "manifest.json")
    assert manifest.status == "failed:train"


# -- CLI ---------------------------------------------------------------------------

def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path, "model.kind = nope\nlanguages = a b\n")
    code = main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_io_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, BASE_CFG)
    code = main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(tmp_path / "missing.bin")])
    assert code == 4


def test_cli_make_synthetic_and_split(tmp_path):
    cfg = _write(tmp_path, BASE_CFG)
    out = tmp_path / "data_out"
    assert main(["make-synthetic", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "data/train.la").exists()
    assert main(["split-data", "--config", str(cfg), "--out", str(out)]) == 0
    pair_files = list((out / "data/pairs").glob("*.la-lb.*"))
    assert len(pair_files) == 2


def test_cli_translate_stdin(tiny_run, tmp_path, monkeypatch, capsys):
    root, cfg_path, out, _ = tiny_run
    src = tmp_path / "src.txt"
    src.write_text("la00 la01\n", encoding="utf-8")
    code = main(["translate", "--config", str(cfg_path), "--out", str(out),
                 "--direction", "la-lb", "--input", str(src)])
    assert code == 0
    printed = capsys.readouterr().out.strip()
    assert isinstance(printed, str)


def test_cli_report(tiny_run, tmp_path):
    _, _, out, _ = tiny_run
    dest = tmp_path / "rep"
    assert main(["report", "--out", str(dest), str(out)]) == 0
    assert (dest / "report.txt").exists()
    assert (dest / "figures/bleu_by_direction.png").exists()
