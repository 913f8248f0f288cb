import json
import math

import numpy as np
import pytest
import yaml

from capaudit import pipeline
from capaudit.audit import load_report, precision_at_k
from capaudit.cli import EXIT_DIVERGENCE, EXIT_OK, EXIT_PREREQUISITE, EXIT_VALIDATION, main
from capaudit.datagen import Label, load_bundle
from capaudit.models import Mode, load_checkpoint

SMALL = {
    "dataset": {"kind": "synthetic", "n_per_subset": 60, "n_copyrighted": 30, "n_features": 3, "seq_len": 6, "seed": 0},
    "model": {"target": "desk", "prompter": "desk", "dropout": 0.0},
    "training": {"lr": 1e-3, "target_epochs": 3, "es_patience": 2, "prompter_epochs": 6, "batch_size": 32,
                 "alpha": 1, "omega": 1e6, "min_fit_size": 10},
    "audit": {"ks": [5, 10]},
    "seeds": [0, 1],
}


@pytest.fixture
def cfg_path(tmp_path):
    data = dict(SMALL, output_dir=str(tmp_path / "out"))
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def _cfg(path, *overrides):
    return pipeline.load_config(path, overrides)


def test_synth_data_counts(cfg_path, capsys):
    assert main(["synth-data", "-c", str(cfg_path)]) == EXIT_OK
    path = capsys.readouterr().out.strip()
    b = load_bundle(path)
    assert (len(b.d_tr), len(b.d_v), len(b.d_nc), len(b.d_c)) == (60, 60, 60, 30)
    assert all(s.label == Label.MEMBER_COPYRIGHTED for s in b.d_c)
    assert b.n_features == 3 and b.key_len == b.value_len == 3
    assert "bundles" in path


def test_synth_data_is_idempotent(cfg_path, capsys):
    main(["synth-data", "-c", str(cfg_path)])
    path = capsys.readouterr().out.strip()
    first = open(path, "rb").read()
    main(["synth-data", "-c", str(cfg_path)])
    assert open(path, "rb").read() == first


def test_invalid_config_exit_code(cfg_path, capsys):
    rc = main(["synth-data", "-c", str(cfg_path), "--set", "dataset.n_copyrighted=100"])
    assert rc == EXIT_VALIDATION
    assert "n_copyrighted" in capsys.readouterr().err


def test_unknown_key_rejected(cfg_path):
    assert main(["synth-data", "-c", str(cfg_path), "--set", "training.bogus=1"]) == EXIT_VALIDATION


def test_missing_config_file(tmp_path):
    assert main(["synth-data", "-c", str(tmp_path / "nope.yaml")]) == EXIT_VALIDATION


def test_prompter_without_target(cfg_path, capsys):
    main(["synth-data", "-c", str(cfg_path)])
    capsys.readouterr()
    assert main(["train-prompter", "-c", str(cfg_path)]) == EXIT_PREREQUISITE
    assert "missing prerequisite" in capsys.readouterr().err


def test_train_without_bundle(cfg_path, capsys):
    assert main(["train-target", "-c", str(cfg_path)]) == EXIT_PREREQUISITE
    assert "missing prerequisite" in capsys.readouterr().err


def test_divergence_exit_code(cfg_path, capsys):
    main(["synth-data", "-c", str(cfg_path)])
    assert main(["train-target", "-c", str(cfg_path), "--set", "training.lr=1e30", "--seeds", "0"]) == EXIT_DIVERGENCE
    assert "diverged" in capsys.readouterr().err


def test_overrides_and_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.OUTPUT_ROOT_ENV, str(tmp_path / "envroot"))
    cfg = pipeline.load_config(None, ["training.alpha=inf", "seeds=[3, 4]"])
    assert cfg.output_dir == str(tmp_path / "envroot")
    assert math.isinf(cfg.training.alpha) and cfg.seeds == [3, 4]
    assert pipeline.config_fingerprint(cfg) == pipeline.config_fingerprint(pipeline.load_config(None, ["training.alpha=inf"]))


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """synth-data, train-target, both prompter arms and audits on the overlap dataset."""
    root = tmp_path_factory.mktemp("cli")
    data = dict(SMALL, output_dir=str(root / "out"))
    data["dataset"] = dict(SMALL["dataset"], overlap=True)
    cfg_path = root / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(data))
    c = str(cfg_path)
    for argv in (["synth-data", "-c", c], ["train-target", "-c", c], ["train-prompter", "-c", c],
                 ["train-prompter", "-c", c, "--optimized"], ["audit", "-c", c], ["audit", "-c", c, "--optimized"]):
        assert main(argv) == EXIT_OK, argv
    return pipeline.load_config(cfg_path), cfg_path


def test_checkpoints_load(pipeline_run):
    cfg, _ = pipeline_run
    data = pipeline.load_prepared(cfg)
    tcfg, pcfg = pipeline.model_configs(cfg, data.bundle)
    layout = pipeline.Layout(cfg.output_dir)
    for seed in cfg.seeds:
        assert load_checkpoint(layout.target(cfg, seed), expected=tcfg).mode is Mode.INFERENCE
        for opt in (False, True):
            assert load_checkpoint(layout.prompter(cfg, seed, opt), expected=pcfg) is not None


def test_optimized_arm_prunes_after_patience(pipeline_run):
    cfg, _ = pipeline_run
    layout = pipeline.Layout(cfg.output_dir)
    for seed in cfg.seeds:
        opt = json.loads(layout.prompter(cfg, seed, True).with_suffix(".train.json").read_text())
        noopt = json.loads(layout.prompter(cfg, seed, False).with_suffix(".train.json").read_text())
        assert noopt["pruning_events"] == []
        events = opt["pruning_events"]
        assert len(events) >= 1
        assert events[0]["epoch"] >= cfg.training.alpha
        n = len(pipeline.load_prepared(cfg).d2)
        assert all(3 * e["active_after"] > n for e in events)


def test_audit_reports_parse_and_recompute(pipeline_run):
    cfg, _ = pipeline_run
    layout = pipeline.Layout(cfg.output_dir)
    for seed in cfg.seeds:
        rep = load_report(layout.report(cfg, seed, False))
        assert rep.seed == seed and rep.fingerprint == pipeline.config_fingerprint(cfg)
        labels = [r.label for r in rep.ranked]
        assert len(labels) == 90
        for k, v in rep.precision_at.items():
            assert v == precision_at_k(labels, k)
        rows = layout.report(cfg, seed, False).with_suffix(".csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == [r.sample_id for r in rep.ranked]
    index = json.loads(layout.index(cfg, False).read_text())
    assert [e["seed"] for e in index["reports"]] == cfg.seeds


def test_audit_deterministic(pipeline_run):
    cfg, cfg_path = pipeline_run
    path = pipeline.Layout(cfg.output_dir).report(cfg, 0, False)
    before = path.read_bytes()
    assert main(["audit", "-c", str(cfg_path), "--seeds", "0"]) == EXIT_OK
    assert path.read_bytes() == before


def test_retrain_is_bitwise_identical(pipeline_run):
    cfg, cfg_path = pipeline_run
    layout = pipeline.Layout(cfg.output_dir)
    before = load_report(layout.report(cfg, 1, True)).payload()
    for argv in (["train-target", "--seeds", "1"], ["train-prompter", "--optimized", "--seeds", "1"],
                 ["audit", "--optimized", "--seeds", "1"]):
        assert main(argv + ["-c", str(cfg_path)]) == EXIT_OK
    assert load_report(layout.report(cfg, 1, True)).payload() == before


def test_aggregate_cli(pipeline_run, tmp_path, capsys):
    cfg, _ = pipeline_run
    layout = pipeline.Layout(cfg.output_dir)
    paths = [str(layout.report(cfg, s, False)) for s in cfg.seeds]
    out = tmp_path / "agg.json"
    capsys.readouterr()
    assert main(["aggregate", *paths, "--out", str(out)]) == EXIT_OK
    agg = json.loads(out.read_text())
    assert agg["schema"] == pipeline.AGGREGATE_SCHEMA and agg["n_runs"] == 2
    assert set(agg["metrics"]) == {"precision@5", "precision@10", "auc_gain"}
    assert " ± " in agg["table"]["auc_gain"]
    assert "auc_gain" in capsys.readouterr().out


def test_aggregate_rejects_mixed(pipeline_run, tmp_path):
    cfg, _ = pipeline_run
    layout = pipeline.Layout(cfg.output_dir)
    paths = [str(layout.report(cfg, 0, False)), str(layout.report(cfg, 0, True))]
    # Same config, both arms: fingerprints match, so this aggregates.
    assert main(["aggregate", *paths, "--out", str(tmp_path / "a.json")]) == EXIT_OK
    rep = json.loads(open(paths[1]).read())
    rep["fingerprint"] = "different"
    odd = tmp_path / "odd.json"
    odd.write_text(json.dumps(rep))
    assert main(["aggregate", paths[0], str(odd), "--out", str(tmp_path / "b.json")]) == EXIT_VALIDATION
    assert main(["aggregate", paths[0], "--out", str(tmp_path / "c.json")]) == EXIT_VALIDATION


# --------------------------------------------------------------------------- statistics


def test_mean_ci_hand_computed():
    s = pipeline.mean_ci([90, 110])
    assert s.mean == 100
    assert s.half_width == pytest.approx(12.706 * 10 * math.sqrt(2) / math.sqrt(2), rel=1e-4)
    assert s.format(0) == "100 ± 127"


def test_mean_ci_zero_variance():
    s = pipeline.mean_ci([100.0] * 10)
    assert s.half_width == 0 and s.format(0) == "100 ± 0"


def test_mean_ci_needs_two():
    with pytest.raises(ValueError):
        pipeline.mean_ci([1.0])


def test_mean_ci_shrinks_with_n():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1000)
    assert pipeline.mean_ci(x[:10]).half_width > pipeline.mean_ci(x).half_width >= 0


# --------------------------------------------------------------------------- bench and ingest


def test_bench_without_pruning_has_unit_ratio(tmp_path):
    # Identical workloads still differ by ~15% run to run on a shared CPU, so
    # the ratio is taken over many short paired runs.
    data = dict(SMALL, output_dir=str(tmp_path / "out"), seeds=list(range(12)))
    data["dataset"] = dict(SMALL["dataset"], n_per_subset=200, n_copyrighted=100)
    data["training"] = dict(SMALL["training"], alpha="inf", prompter_epochs=3, target_epochs=1)
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    assert main(["synth-data", "-c", str(p)]) == EXIT_OK
    assert main(["bench", "-c", str(p)]) == EXIT_OK
    cfg = _cfg(p)
    out = json.loads(pipeline.Layout(cfg.output_dir).bench(cfg).read_text())
    for run in out["runs"]:
        assert run["opt"]["pruning_events"] == []
        assert run["opt"]["active_sizes"] == run["noopt"]["active_sizes"]
        assert run["opt"]["epoch_loss"] == run["noopt"]["epoch_loss"]
        assert run["auc_gain_delta"] == 0
    assert out["time_ratio"] == pytest.approx(1.0, abs=0.15)


def test_ingest_csv(tmp_path, capsys):
    rng = np.random.default_rng(0)
    t = np.arange(3000)
    cols = {f"s{i}": np.sin(t / (20 + 7 * i)) + 0.1 * rng.normal(size=t.size) for i in range(3)}
    cols["const"] = np.ones(t.size)
    cols["name"] = ["x"] * t.size
    import pandas as pd

    csv = tmp_path / "sensor.csv"
    pd.DataFrame(cols).to_csv(csv, index=False)
    data = {"dataset": {"kind": "csv", "csv_path": str(csv), "seq_len": 10, "n_clusters": 3, "copyright_fraction": 0.3},
            "seeds": [0], "output_dir": str(tmp_path / "out")}
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(data))
    assert main(["ingest", "-c", str(p)]) == EXIT_OK
    b = load_bundle(capsys.readouterr().out.strip())
    sizes = [len(b.d_tr), len(b.d_v), len(b.d_nc)]
    assert sum(sizes) == 3000 // 10
    assert max(sizes) - min(sizes) <= 3
    tr_ids = {s.sample_id for s in b.d_tr}
    assert {s.sample_id for s in b.d_c} <= tr_ids and len(b.d_c) == round(0.3 * len(b.d_tr))
    assert b.n_features == 3 and b.key_len == b.value_len == 5
    assert main(["synth-data", "-c", str(p)]) == EXIT_VALIDATION


def test_ingest_missing_csv(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"dataset": {"kind": "csv", "csv_path": str(tmp_path / "none.csv")}}))
    assert main(["ingest", "-c", str(p)]) == EXIT_VALIDATION
