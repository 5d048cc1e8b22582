import csv
import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from stdiag import cli as C
from stdiag.cli import cli, main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    result = CliRunner().invoke(cli, [
        "gen-data", "--out", str(out), "--episodes", "36", "--sensors", "3",
        "--segments", "4", "--window", "8", "--anomaly-ratio", "0.5",
        "--seed", "11",
    ], catch_exceptions=False)
    assert result.exit_code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("runs") / "train"
    result = CliRunner().invoke(cli, [
        "train", "--data", str(dataset_dir), "--out", str(out),
        "--seed", "2", "--epochs", "2",
        "--set", "embed_dim=8", "--set", "cnn_blocks=2", "--set", "filters=4",
        "--set", "ffn_dim=16", "--set", "head_hidden=8", "--set", "batch_size=8",
    ], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_row_count(dataset_dir):
    rows = read_csv(dataset_dir / "data.csv")
    assert len(rows) == 36 * 4 * 8 + 1  # episodes * T + header


def test_gen_data_anomaly_count_exact(dataset_dir):
    meta = json.loads((dataset_dir / "dataset.json").read_text())
    assert meta["n_anomalous"] == 18


def test_gen_data_manifest_present(dataset_dir):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 11
    assert set(manifest["outputs"]) == {"data.csv", "dataset.json"}


def test_gen_data_same_seed_byte_identical(tmp_path, runner):
    flags = ["--episodes", "10", "--sensors", "2", "--segments", "3",
             "--window", "5", "--anomaly-ratio", "0.2", "--seed", "7"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(cli, ["gen-data", "--out", str(a)] + flags).exit_code == 0
    assert runner.invoke(cli, ["gen-data", "--out", str(b)] + flags).exit_code == 0
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()
    assert (a / "dataset.json").read_bytes() == (b / "dataset.json").read_bytes()


def test_gen_data_seed_env_fallback(tmp_path, runner, monkeypatch):
    monkeypatch.setenv(C.SEED_ENV_VAR, "7")
    flags = ["--episodes", "10", "--sensors", "2", "--segments", "3",
             "--window", "5", "--anomaly-ratio", "0.2"]
    out = tmp_path / "env"
    assert runner.invoke(cli, ["gen-data", "--out", str(out)] + flags).exit_code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7


# ---------------------------------------------------------------------------
# train / eval / cv
# ---------------------------------------------------------------------------

def test_train_outputs(trained_dir):
    assert (trained_dir / "model.stc").exists()
    metrics = json.loads((trained_dir / "metrics.json").read_text())
    assert {"precision", "recall", "f1", "best_epoch"} <= set(metrics)
    history = read_csv(trained_dir / "history.csv")
    assert history[0] == ["epoch", "train_loss", "val_precision", "val_recall",
                          "val_f1", "threshold"]
    assert len(history) == 3  # header + 2 epochs


def test_train_manifest_has_config_and_hashes(trained_dir, dataset_dir):
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    assert manifest["config"]["embed_dim"] == 8
    assert any(name.endswith("data.csv") for name in manifest["input_hashes"])


def test_encoding_flag_changes_exactly_one_config_field(tmp_path, runner, dataset_dir):
    outs = {}
    for kind in ("faithful", "vanilla"):
        out = tmp_path / kind
        result = runner.invoke(cli, [
            "train", "--data", str(dataset_dir), "--out", str(out),
            "--seed", "2", "--epochs", "1", "--encoding", kind,
            "--set", "embed_dim=8", "--set", "cnn_blocks=2", "--set", "filters=4",
            "--set", "ffn_dim=16", "--set", "head_hidden=8",
        ], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        outs[kind] = json.loads((out / "manifest.json").read_text())["config"]
    diff = {k for k in outs["faithful"] if outs["faithful"][k] != outs["vanilla"][k]}
    assert diff == {"encoding"}


def test_eval_reports_metrics(runner, trained_dir, dataset_dir):
    result = runner.invoke(cli, [
        "eval", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir),
    ], catch_exceptions=False)
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["n_episodes"] == 36
    assert 0.0 <= payload["f1"] <= 1.0


def test_eval_overfit_tiny_run_reaches_perfect_f1(tmp_path, runner):
    # Very separable data, long training, evaluated on its own training set.
    data = tmp_path / "easy"
    r = runner.invoke(cli, [
        "gen-data", "--out", str(data), "--episodes", "20", "--sensors", "2",
        "--segments", "3", "--window", "8", "--anomaly-ratio", "0.5",
        "--anomaly-types", "friction", "--seed", "3",
    ], catch_exceptions=False)
    assert r.exit_code == 0
    run = tmp_path / "run"
    r = runner.invoke(cli, [
        "train", "--data", str(data), "--out", str(run), "--seed", "1",
        "--epochs", "80", "--set", "lr=0.002",
        "--set", "embed_dim=8", "--set", "cnn_blocks=2", "--set", "filters=4",
        "--set", "ffn_dim=16", "--set", "head_hidden=8", "--set", "batch_size=4",
        "--set", "dropout=0.0", "--set", "patience=80",
    ], catch_exceptions=False)
    assert r.exit_code == 0, r.output
    r = runner.invoke(cli, [
        "eval", "--model", str(run / "model.stc"), "--data", str(data),
    ], catch_exceptions=False)
    payload = json.loads(r.output)
    assert payload["f1"] == 1.0


def test_cv_emits_fold_records(tmp_path, runner, dataset_dir):
    out = tmp_path / "cv"
    result = runner.invoke(cli, [
        "cv", "--data", str(dataset_dir), "--out", str(out), "--folds", "3",
        "--seed", "2", "--set", "embed_dim=8", "--set", "cnn_blocks=2",
        "--set", "filters=4", "--set", "ffn_dim=16", "--set", "head_hidden=8",
        "--set", "max_epochs=2",
    ], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    summary = json.loads((out / "cv_results.json").read_text())
    assert len(summary["folds"]) == 3
    assert {"mean", "std"} <= set(summary)
    rows = read_csv(out / "folds.csv")
    assert len(rows) == 4


# ---------------------------------------------------------------------------
# diagnose / at-score
# ---------------------------------------------------------------------------

def anomalous_episode_id(dataset_dir, kind=None):
    meta = json.loads((dataset_dir / "dataset.json").read_text())
    for entry in meta["episodes"]:
        if entry["label"] == 1:
            if kind is None or any(i["kind"] == kind for i in entry["injections"]):
                return entry["episode_id"]
    raise AssertionError("no anomalous episode found")


def normal_episode_id(dataset_dir):
    meta = json.loads((dataset_dir / "dataset.json").read_text())
    for entry in meta["episodes"]:
        if entry["label"] == 0:
            return entry["episode_id"]
    raise AssertionError("no normal episode found")


def test_diagnose_outputs_conserved_scores(tmp_path, runner, trained_dir, dataset_dir):
    out = tmp_path / "diag"
    ep_id = anomalous_episode_id(dataset_dir)
    result = runner.invoke(cli, [
        "diagnose", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir), "--episode-id", ep_id, "--out", str(out),
    ], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    n_w, n_s = 4, 3
    assert abs(sum(report["temporal_global_relevance"]) - n_w) < 1e-8
    assert abs(sum(report["spatial_global_relevance"]) - n_s) < 1e-8
    for row in report["temporal_relevance"]:
        assert abs(sum(row) - n_w) < 1e-8
    for row in report["spatial_global_matrix"]:
        pass
    col = np.array(report["spatial_global_matrix"]).sum(axis=1)
    assert np.abs(col - 1.0).max() < 1e-8
    # serialized matrices agree with the report
    rows = read_csv(out / "temporal_global_relevance.csv")
    values = [float(r[1]) for r in rows[1:]]
    assert np.allclose(values, report["temporal_global_relevance"])
    assert report["localization"] is not None


def test_diagnose_normal_episode_has_no_flags(tmp_path, runner, trained_dir,
                                              dataset_dir):
    out = tmp_path / "diag_norm"
    result = runner.invoke(cli, [
        "diagnose", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir), "--episode-id", normal_episode_id(dataset_dir),
        "--out", str(out),
    ], catch_exceptions=False)
    assert result.exit_code == 0
    report = json.loads((out / "report.json").read_text())
    assert "localization" not in report


def test_diagnose_unknown_episode_exits_with_ingestion_code(trained_dir, dataset_dir):
    code = main([
        "diagnose", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir), "--episode-id", "nope",
        "--out", "/tmp/should_not_matter",
    ])
    assert code == C.EXIT_INGESTION


def test_at_score_zero_k_is_zero(tmp_path, runner, trained_dir, dataset_dir):
    out = tmp_path / "at"
    result = runner.invoke(cli, [
        "at-score", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir), "--k", "0,10,50", "--out", str(out),
    ], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "at_scores.csv")
    by_class = {}
    for cls, k, n, mean, median in rows[1:]:
        by_class.setdefault(cls, {})[float(k)] = float(mean)
        if float(k) == 0.0:
            assert float(mean) == 0.0 and float(median) == 0.0
    deltas = read_csv(out / "at_deltas.csv")
    n_eps = 36
    assert len(deltas) - 1 == n_eps * 3  # every episode contributes one row per k


def test_at_score_delta_counts_per_class(tmp_path, runner, trained_dir, dataset_dir):
    out = tmp_path / "at2"
    runner.invoke(cli, [
        "at-score", "--model", str(trained_dir / "model.stc"),
        "--data", str(dataset_dir), "--k", "5", "--out", str(out),
    ], catch_exceptions=False)
    meta = json.loads((dataset_dir / "dataset.json").read_text())
    kinds = {}
    for e in meta["episodes"]:
        kind = "normal" if not e["injections"] else e["injections"][0]["kind"]
        kinds[kind] = kinds.get(kind, 0) + 1
    rows = read_csv(out / "at_scores.csv")[1:]
    for cls, k, n, mean, median in rows:
        assert int(n) == kinds[cls]


# ---------------------------------------------------------------------------
# encode-analyze
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def analysis_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("enc") / "analysis"
    result = CliRunner().invoke(cli, [
        "encode-analyze", "--d", "256", "--out", str(out),
    ], catch_exceptions=False)
    assert result.exit_code == 0
    return out


def test_encode_analyze_bin_counts(analysis_dir):
    rows = read_csv(analysis_dir / "lowpass_bins.csv")
    counts = {int(r[0]): int(r[2]) for r in rows[1:]}
    assert counts[256] == 103
    assert counts[512] == 245


def test_encode_analyze_faithful_reconstruction_one_hot(analysis_dir):
    rows = read_csv(analysis_dir / "reconstruction.csv")
    header = rows[0]
    col = header.index("faithful_t40")
    values = np.array([float(r[col]) for r in rows[1:]])
    expected = np.zeros(256)
    expected[40] = 1.0
    assert np.abs(values - expected).max() < 1e-9


def test_encode_analyze_vanilla_reconstruction_smears(analysis_dir):
    rows = read_csv(analysis_dir / "reconstruction.csv")
    header = rows[0]
    col = header.index("vanilla_t40")
    values = np.array([float(r[col]) for r in rows[1:]])
    assert (values >= 0.1 * values.max()).sum() >= 10


def test_encode_analyze_distribution_peak_near_zero(analysis_dir):
    rows = read_csv(analysis_dir / "frequency_distributions.csv")
    vanilla = np.array([float(r[2]) for r in rows[1:]])
    assert vanilla.argmax() in (0, 1)
    assert vanilla[0] >= vanilla[2:].max()


def test_encode_analyze_gram_report(analysis_dir):
    rows = read_csv(analysis_dir / "gram_report.csv")
    by_kind = {r[0]: float(r[2]) for r in rows[1:]}
    assert by_kind["faithful"] < 1e-9
    assert by_kind["vanilla"] > 1e-3


def test_encode_analyze_rejects_odd_d():
    assert main(["encode-analyze", "--d", "255", "--out", "/tmp/never"]) == C.EXIT_CONFIG


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_missing_file_maps_to_usage_error():
    assert main(["eval", "--model", "/nonexistent.stc", "--data", "/tmp"]) == 2


def test_malformed_data_maps_to_ingestion_code(tmp_path, trained_dir):
    bad = tmp_path / "bad.csv"
    bad.write_text("episode_id,t,sensor_1,label\nep0,0,oops,1\n")
    assert main(["eval", "--model", str(trained_dir / "model.stc"),
                 "--data", str(bad)]) == C.EXIT_INGESTION


def test_config_violation_rejected_before_training(tmp_path, dataset_dir):
    # embed_dim must exceed the segment count
    code = main([
        "train", "--data", str(dataset_dir), "--out", str(tmp_path / "x"),
        "--set", "embed_dim=4", "--set", "cnn_blocks=2",
    ])
    assert code == C.EXIT_CONFIG
