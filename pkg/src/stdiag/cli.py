"""Command-line entry point for reproducible experiments and data exports.

Every command writes its artifacts plus exactly one ``manifest.json`` into
its output directory. With identical flags and seed, all output files are
byte-identical across runs except the manifest's timing fields.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error,
4 data ingestion error, 5 numeric error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import data as D
from . import diagnostics as diag
from . import encoding as enc
from .errors import (ConfigError, ContractError, DimensionError, IngestionError,
                     NumericError, StdiagError)
from .model import (AnomalyClassifier, ModelConfig, cross_validate, evaluate,
                    load_checkpoint, save_checkpoint, split_train_val, train_model)

SEED_ENV_VAR = "ST_DIAG_SEED"

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INGESTION = 4
EXIT_NUMERIC = 5


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from None
    return 0


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths: list[Path]) -> dict[str, str]:
    hashes = {}
    for path in paths:
        if path.is_dir():
            for child in sorted(path.iterdir()):
                if child.is_file():
                    hashes[str(child)] = _sha256(child)
        elif path.is_file():
            hashes[str(path)] = _sha256(path)
    return hashes


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                    inputs: list[Path], outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_hashes": _hash_inputs(inputs),
        "outputs": sorted(outputs),
        "timing": {
            "duration_seconds": time.time() - started,
            "created_utc": datetime.now(timezone.utc).isoformat(),
        },
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_episodes(data_path: str) -> tuple[list[D.EpisodeRecord], dict]:
    episodes, meta = D.load_dataset(Path(data_path))
    if not episodes:
        raise IngestionError(f"no episodes found in {data_path}")
    return episodes, meta


def _build_config(episodes, meta: dict, config_path: str | None,
                  overrides: dict) -> ModelConfig:
    """Dataset dims -> synthetic defaults -> config file -> flag overrides."""
    gen = meta.get("config", {})
    sensors = int(gen.get("sensors", episodes[0].n_sensors))
    n_samples = episodes[0].n_samples
    segments = gen.get("segments")
    window = gen.get("window")
    if segments is not None and window is not None:
        base = ModelConfig.synthetic_profile(sensors, int(segments), int(window))
    elif config_path is not None:
        base = None  # the config file must supply the [data] section itself
    else:
        raise ConfigError(
            "dataset metadata lacks segment/window sizes; regenerate with gen-data "
            "or provide a config file that defines them"
        )
    config = ModelConfig.from_ini_file(config_path, defaults=base) if config_path else base
    if overrides:
        config = config.with_overrides(overrides)
    config.validate()
    if config.sensors != episodes[0].n_sensors:
        raise ConfigError(
            f"config expects {config.sensors} sensors but data has "
            f"{episodes[0].n_sensors}"
        )
    expected = config.segments * config.window
    if config.pad_policy == "reject" and n_samples != expected:
        raise ConfigError(
            f"episode length {n_samples} does not equal segments*window = {expected}"
        )
    return config


@click.group()
def cli():
    """Spatio-temporal attention diagnostics for multivariate sensor episodes."""


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

@cli.command("gen-data")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--episodes", default=200, show_default=True)
@click.option("--sensors", default=8, show_default=True)
@click.option("--segments", default=10, show_default=True)
@click.option("--window", default=50, show_default=True)
@click.option("--anomaly-ratio", default=0.3, show_default=True)
@click.option("--anomaly-types", default="point,friction", show_default=True,
              help="Comma-separated subset of point,friction.")
@click.option("--seed", type=int, default=None, help=f"Falls back to ${SEED_ENV_VAR}, then 0.")
def gen_data(out, episodes, sensors, segments, window, anomaly_ratio, anomaly_types, seed):
    """Generate a synthetic labeled dataset (CSV + metadata + manifest)."""
    started = time.time()
    seed = _resolve_seed(seed)
    kinds = tuple(k.strip() for k in anomaly_types.split(",") if k.strip())
    records = D.generate_synthetic(episodes, sensors, segments, window,
                                   anomaly_ratio, seed, kinds=kinds)
    out_dir = Path(out)
    config = {
        "episodes": episodes, "sensors": sensors, "segments": segments,
        "window": window, "anomaly_ratio": anomaly_ratio,
        "anomaly_types": list(kinds), "seed": seed,
    }
    D.save_dataset(out_dir, records, config=config)
    _write_manifest(out_dir, "gen-data", config, seed, [],
                    [D.DATASET_CSV_NAME, D.DATASET_META_NAME], started)
    click.echo(f"wrote {len(records)} episodes "
               f"({sum(r.label for r in records)} anomalous) to {out_dir}")


# ---------------------------------------------------------------------------
# train / eval / cv
# ---------------------------------------------------------------------------

def _parse_sets(pairs: tuple[str, ...]) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


@cli.command("train")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="INI config; flags still win.")
@click.option("--out", required=True, type=click.Path())
@click.option("--encoding", type=click.Choice(["faithful", "vanilla"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "set_pairs", multiple=True,
              help="Override any config key, e.g. --set lr=0.01 (repeatable).")
def train_cmd(data_path, config_path, out, encoding, epochs, seed, set_pairs):
    """Train a classifier; writes checkpoint, metrics, history, manifest."""
    started = time.time()
    episodes, meta = _load_episodes(data_path)
    overrides = _parse_sets(set_pairs)
    if encoding is not None:
        overrides["encoding"] = encoding
    if epochs is not None:
        overrides["max_epochs"] = epochs
    if seed is not None or SEED_ENV_VAR in os.environ:
        overrides["seed"] = _resolve_seed(seed)
    config = _build_config(episodes, meta, config_path, overrides)

    train_eps, val_eps = split_train_val(episodes, config.val_fraction, config.seed)
    result = train_model(train_eps, val_eps, config)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out_dir / "model.stc")
    best = result.history[result.best_epoch] if result.history else {}
    _write_json(out_dir / "metrics.json", {
        "split": "validation",
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "precision": best.get("val_precision"),
        "recall": best.get("val_recall"),
        "f1": best.get("val_f1"),
        "threshold": result.model.config.threshold,
    })
    _write_csv(out_dir / "history.csv",
               ["epoch", "train_loss", "val_precision", "val_recall", "val_f1",
                "threshold"],
               [[h["epoch"], h["train_loss"], h["val_precision"], h["val_recall"],
                 h["val_f1"], h["threshold"]] for h in result.history])
    _write_manifest(out_dir, "train", config.to_dict(), config.seed,
                    [Path(data_path)] + ([Path(config_path)] if config_path else []),
                    ["model.stc", "metrics.json", "history.csv"], started)
    click.echo(f"best val F1 {result.best_val_f1:.4f} at epoch {result.best_epoch}; "
               f"checkpoint in {out_dir}")


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def eval_cmd(model_path, data_path, out):
    """Evaluate a checkpoint on a dataset; prints metrics JSON."""
    started = time.time()
    model = load_checkpoint(model_path)
    episodes, _ = _load_episodes(data_path)
    metrics = evaluate(model, episodes)
    payload = {"n_episodes": len(episodes), "threshold": model.config.threshold,
               **metrics.to_dict()}
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "metrics.json", payload)
        _write_manifest(out_dir, "eval", model.config.to_dict(), model.config.seed,
                        [Path(model_path), Path(data_path)], ["metrics.json"], started)


@cli.command("cv")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--folds", default=5, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@click.option("--encoding", type=click.Choice(["faithful", "vanilla"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "set_pairs", multiple=True)
def cv_cmd(data_path, config_path, out, folds, jobs, encoding, seed, set_pairs):
    """k-fold cross-validation (70/15/15 rotating splits)."""
    started = time.time()
    episodes, meta = _load_episodes(data_path)
    overrides = _parse_sets(set_pairs)
    if encoding is not None:
        overrides["encoding"] = encoding
    if seed is not None or SEED_ENV_VAR in os.environ:
        overrides["seed"] = _resolve_seed(seed)
    config = _build_config(episodes, meta, config_path, overrides)
    result = cross_validate(episodes, config, k=folds, jobs=jobs)
    summary = result.summary()

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "cv_results.json", summary)
    _write_csv(out_dir / "folds.csv",
               ["fold", "seed", "precision", "recall", "f1", "best_epoch"],
               [[f["fold"], f["seed"], f["precision"], f["recall"], f["f1"],
                 f["best_epoch"]] for f in summary["folds"]])
    _write_manifest(out_dir, "cv", config.to_dict(), config.seed,
                    [Path(data_path)] + ([Path(config_path)] if config_path else []),
                    ["cv_results.json", "folds.csv"], started)
    mean = summary["mean"]
    click.echo(f"cv mean P {mean['precision']:.4f} R {mean['recall']:.4f} "
               f"F1 {mean['f1']:.4f} over {folds} folds")


# ---------------------------------------------------------------------------
# diagnose / at-score
# ---------------------------------------------------------------------------

@cli.command("diagnose")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--episode-id", required=True)
@click.option("--out", required=True, type=click.Path())
def diagnose_cmd(model_path, data_path, episode_id, out):
    """Export the diagnostic report and attention matrices for one episode."""
    started = time.time()
    model = load_checkpoint(model_path)
    episodes, _ = _load_episodes(data_path)
    matches = [ep for ep in episodes if ep.episode_id == episode_id]
    if not matches:
        raise IngestionError(f"episode id {episode_id!r} not found in {data_path}")
    episode = matches[0]
    report = diag.diagnose_episode(model, episode)
    pred = model.forward(episode.values)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", report.to_dict())
    scores = report.scores
    n_w = scores.temporal_global_relevance.shape[0]
    n_s = scores.spatial_global_relevance.shape[0]
    seg_cols = [f"seg_{t}" for t in range(n_w)]
    sens_cols = [f"sensor_{s + 1}" for s in range(n_s)]
    outputs = ["report.json"]

    def table(name, header, rows):
        _write_csv(out_dir / name, header, rows)
        outputs.append(name)

    table("temporal_relevance_per_sensor.csv", ["sensor"] + seg_cols,
          [[s + 1] + [float(v) for v in scores.temporal_relevance[s]] for s in range(n_s)])
    table("temporal_global_relevance.csv", ["segment", "relevance"],
          [[t, float(scores.temporal_global_relevance[t])] for t in range(n_w)])
    table("temporal_global_matrix.csv", ["from_segment"] + seg_cols,
          [[t] + [float(v) for v in scores.temporal_global_matrix[t]] for t in range(n_w)])
    table("spatial_relevance_per_segment.csv", ["segment"] + sens_cols,
          [[t] + [float(v) for v in scores.spatial_relevance[t]] for t in range(n_w)])
    table("spatial_global_relevance.csv", ["sensor", "relevance"],
          [[s + 1, float(scores.spatial_global_relevance[s])] for s in range(n_s)])
    table("spatial_global_matrix.csv", ["from_sensor"] + sens_cols,
          [[s + 1] + [float(v) for v in scores.spatial_global_matrix[s]] for s in range(n_s)])
    table("temporal_sensor_matrices.csv", ["sensor", "from_segment", "to_segment", "weight"],
          [[s + 1, i, j, float(pred.maps.temporal[s, i, j])]
           for s in range(n_s) for i in range(n_w) for j in range(n_w)])
    table("spatial_segment_matrices.csv", ["segment", "from_sensor", "to_sensor", "weight"],
          [[t, i + 1, j + 1, float(pred.maps.spatial[t, i, j])]
           for t in range(n_w) for i in range(n_s) for j in range(n_s)])

    _write_manifest(out_dir, "diagnose",
                    {"episode_id": episode_id, **model.config.to_dict()},
                    model.config.seed, [Path(model_path), Path(data_path)],
                    outputs, started)
    click.echo(f"diagnostic report for {episode_id} written to {out_dir}")


@cli.command("at-score")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--k", "k_spec", default="1,5,10,20,50", show_default=True,
              help="Comma-separated ablation percentages.")
@click.option("--by-class/--no-by-class", default=True, show_default=True)
@click.option("--out", required=True, type=click.Path())
def at_score_cmd(model_path, data_path, k_spec, by_class, out):
    """Attention-trustworthiness curves: output drop vs zeroed top-k% weights."""
    started = time.time()
    model = load_checkpoint(model_path)
    episodes, _ = _load_episodes(data_path)
    try:
        ks = [float(k) for k in k_spec.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--k must be a comma-separated list of numbers, got {k_spec!r}")
    if by_class:
        curves = diag.at_score_by_class(model, episodes, ks)
    else:
        curves = {"all": diag.at_score(model, episodes, ks)}

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    score_rows = []
    delta_rows = []
    for name, curve in sorted(curves.items()):
        for k, mean_d, median_d in zip(curve.k_percents, curve.mean_deltas,
                                       curve.median_deltas):
            score_rows.append([name, k, len(curve.per_episode[k]), mean_d, median_d])
            for ep_id, delta in zip(curve.episode_ids, curve.per_episode[k]):
                delta_rows.append([name, ep_id, k, delta])
    _write_csv(out_dir / "at_scores.csv",
               ["class", "k_percent", "n_episodes", "mean_delta", "median_delta"],
               score_rows)
    _write_csv(out_dir / "at_deltas.csv",
               ["class", "episode_id", "k_percent", "delta"], delta_rows)
    _write_manifest(out_dir, "at-score",
                    {"k": ks, "by_class": by_class, **model.config.to_dict()},
                    model.config.seed, [Path(model_path), Path(data_path)],
                    ["at_scores.csv", "at_deltas.csv"], started)
    click.echo(f"AT-score curves for {len(episodes)} episodes written to {out_dir}")


# ---------------------------------------------------------------------------
# encode-analyze
# ---------------------------------------------------------------------------

@cli.command("encode-analyze")
@click.option("--d", "dim", default=256, show_default=True)
@click.option("--rho", default=10000.0, show_default=True)
@click.option("--sigma-mult", default=4.0, show_default=True,
              help="Kernel bandwidth as a multiple of 2*pi/d.")
@click.option("--deltas", default="5,40,75", show_default=True,
              help="Positions of reference one-hot signals to reconstruct.")
@click.option("--out", required=True, type=click.Path())
def encode_analyze(dim, rho, sigma_mult, deltas, out):
    """Export frequency distributions, bin counts, reconstructions, Gram report."""
    started = time.time()
    try:
        delta_positions = [int(x) for x in deltas.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--deltas must be comma-separated integers, got {deltas!r}")
    vanilla = enc.EncodingSpec(d=dim, kind=enc.EncodingKind.VANILLA, rho=rho)
    faithful = enc.EncodingSpec(d=dim, kind=enc.EncodingKind.FAITHFUL, rho=rho)
    sigma = enc.default_bandwidth(dim, sigma_mult)
    van_dist = enc.frequency_distribution(vanilla, sigma)
    fai_dist = enc.faithful_distribution(faithful)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "frequency_distributions.csv",
               ["k", "omega", "vanilla_weight", "faithful_weight"],
               [[k, float(van_dist.omegas[k]), float(van_dist.weights[k]),
                 float(fai_dist.weights[k])] for k in range(dim // 2 + 1)])

    bin_dims = sorted({256, 512, dim})
    _write_csv(out_dir / "lowpass_bins.csv", ["d", "rho", "bin_count"],
               [[d, rho, enc.lowpass_bin_count(d, rho)] for d in bin_dims])

    header = ["t"]
    columns = []
    for pos in delta_positions:
        if not 0 <= pos < dim:
            raise ConfigError(f"delta position {pos} outside the lattice [0, {dim})")
        signal = np.zeros(dim)
        signal[pos] = 1.0
        columns.append(enc.reconstruct_reference(signal, van_dist))
        columns.append(enc.reconstruct_reference(signal, fai_dist))
        header.extend([f"vanilla_t{pos}", f"faithful_t{pos}"])
    _write_csv(out_dir / "reconstruction.csv", header,
               [[t] + [float(col[t]) for col in columns] for t in range(dim)])

    reports = [enc.gram_report(faithful), enc.gram_report(vanilla)]
    _write_csv(out_dir / "gram_report.csv",
               ["kind", "d", "max_abs_deviation", "max_off_diagonal",
                "max_diagonal_deviation"],
               [[r.kind, r.d, r.max_abs_deviation, r.max_off_diagonal,
                 r.max_diagonal_deviation] for r in reports])

    _write_manifest(out_dir, "encode-analyze",
                    {"d": dim, "rho": rho, "sigma_mult": sigma_mult,
                     "deltas": delta_positions}, None, [],
                    ["frequency_distributions.csv", "lowpass_bins.csv",
                     "reconstruction.csv", "gram_report.csv"], started)
    click.echo(f"encoding analysis for d={dim} written to {out_dir}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.ClickException as err:
        err.show()
        return EXIT_CONFIG
    except (ConfigError, ContractError, DimensionError) as err:
        click.echo(f"config error: {err}", err=True)
        return EXIT_CONFIG
    except IngestionError as err:
        click.echo(f"ingestion error: {err}", err=True)
        return EXIT_INGESTION
    except NumericError as err:
        click.echo(f"numeric error: {err}", err=True)
        return EXIT_NUMERIC
    except OSError as err:
        click.echo(f"i/o error: {err}", err=True)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
