"""Synthetic episode generation, scaling, windowing, and CSV interchange.

An episode is one S-variate series of ``segments * window`` samples with a
binary label; anomalous episodes carry injection metadata describing what
was planted where. The synthetic generator produces trapezoidal
ramp-hold-ramp trajectories (one amplitude per sensor) with Gaussian noise,
plus two anomaly families: localized decaying spikes ("point") and sustained
offsets across the whole episode ("friction").

The canonical interchange format is a long CSV with columns
``episode_id, t, <sensor...>, label``; a sibling ``dataset.json`` carries
injection metadata and generator settings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IngestionError

POINT = "point"
FRICTION = "friction"


@dataclass
class Injection:
    """One planted anomaly: where it lives and how strong it is."""

    kind: str
    segments: list[int]
    sensors: list[int]
    magnitude: float

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "segments": list(self.segments),
            "sensors": list(self.sensors),
            "magnitude": self.magnitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Injection":
        return cls(
            kind=d["kind"],
            segments=[int(s) for s in d["segments"]],
            sensors=[int(s) for s in d["sensors"]],
            magnitude=float(d["magnitude"]),
        )


@dataclass
class EpisodeRecord:
    """One labeled S-variate time-series sample."""

    episode_id: str
    values: np.ndarray  # (S, T)
    label: int
    injections: list[Injection] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError(f"episode values must be (S, T), got {self.values.shape}")
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")
        if bool(self.injections) != (self.label == 1):
            raise ContractError(
                f"episode {self.episode_id}: label {self.label} inconsistent with "
                f"{len(self.injections)} injections"
            )

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def anomaly_kind(self) -> str:
        """``point``, ``friction``, ``mixed`` or ``normal``."""
        kinds = {inj.kind for inj in self.injections}
        if not kinds:
            return "normal"
        if len(kinds) > 1:
            return "mixed"
        return kinds.pop()


def _sensor_amplitudes(n_sensors: int) -> np.ndarray:
    return 0.5 + 1.5 * (np.arange(n_sensors) + 1.0) / n_sensors


def generate_synthetic(
    n_episodes: int,
    sensors: int,
    segments: int,
    window: int,
    anomaly_ratio: float,
    seed: int,
    kinds: tuple[str, ...] = (POINT, FRICTION),
    point_sensor_range: tuple[int, int] = (1, 3),
    point_magnitude: tuple[float, float] = (5.0, 10.0),
    friction_magnitude: tuple[float, float] = (2.0, 4.0),
) -> list[EpisodeRecord]:
    """Deterministically generate a labeled synthetic dataset.

    Exactly ``round(anomaly_ratio * n_episodes)`` episodes are anomalous
    (stratified draw); anomalous episodes cycle through ``kinds``. Point
    injections add a decaying spike of 5-10x the noise level inside one
    random segment on 1-3 random sensors; friction injections add a
    sustained 2-4x offset across all segments on 2-4 random sensors.
    Injection metadata records the exact locations.
    """
    if n_episodes <= 0 or sensors <= 0 or segments <= 0 or window <= 0:
        raise ConfigError("episode, sensor, segment and window counts must all be positive")
    if not 0.0 <= anomaly_ratio <= 1.0:
        raise ConfigError(f"anomaly_ratio must lie in [0, 1], got {anomaly_ratio}")
    for kind in kinds:
        if kind not in (POINT, FRICTION):
            raise ConfigError(f"unknown anomaly kind {kind!r}")

    rng = np.random.default_rng(seed)
    total = segments * window
    amps = _sensor_amplitudes(sensors)
    noise_sigma = 0.05 * amps
    ramp = max(1, total // 5)
    t = np.arange(total)
    profile_shape = np.minimum(np.minimum(t / ramp, (total - 1 - t) / ramp), 1.0)
    profile_shape = np.clip(profile_shape, 0.0, 1.0)

    n_anomalous = int(round(anomaly_ratio * n_episodes))
    flags = np.array([1] * n_anomalous + [0] * (n_episodes - n_anomalous))
    rng.shuffle(flags)

    episodes: list[EpisodeRecord] = []
    kind_cursor = 0
    for i in range(n_episodes):
        values = amps[:, None] * profile_shape[None, :]
        values += rng.normal(0.0, 1.0, size=(sensors, total)) * noise_sigma[:, None]

        injections: list[Injection] = []
        if flags[i]:
            kind = kinds[kind_cursor % len(kinds)]
            kind_cursor += 1
            if kind == POINT:
                injections.append(_inject_point(
                    values, rng, segments, window, noise_sigma,
                    point_sensor_range, point_magnitude,
                ))
            else:
                injections.append(_inject_friction(
                    values, rng, segments, noise_sigma, friction_magnitude,
                ))
        episodes.append(EpisodeRecord(
            episode_id=f"ep{i:04d}",
            values=values,
            label=int(flags[i]),
            injections=injections,
        ))
    return episodes


def _inject_point(values, rng, segments, window, noise_sigma,
                  sensor_range, magnitude_range) -> Injection:
    segment = int(rng.integers(segments))
    lo, hi = sensor_range
    hi = min(hi, values.shape[0])
    count = int(rng.integers(lo, hi + 1))
    chosen = sorted(int(s) for s in rng.choice(values.shape[0], size=count, replace=False))
    magnitude = float(rng.uniform(*magnitude_range))
    decay = max(2, window // 6)
    start_in_segment = int(rng.integers(max(1, window - 3 * decay)))
    start = segment * window + start_in_segment
    length = min(3 * decay, (segment + 1) * window - start)
    shape = np.exp(-np.arange(length) / decay)
    for s in chosen:
        values[s, start:start + length] += magnitude * noise_sigma[s] * shape
    return Injection(kind=POINT, segments=[segment], sensors=chosen, magnitude=magnitude)


def _inject_friction(values, rng, segments, noise_sigma, magnitude_range) -> Injection:
    count = int(rng.integers(2, min(4, values.shape[0]) + 1))
    chosen = sorted(int(s) for s in rng.choice(values.shape[0], size=count, replace=False))
    magnitude = float(rng.uniform(*magnitude_range))
    for s in chosen:
        values[s, :] += magnitude * noise_sigma[s]
    return Injection(kind=FRICTION, segments=list(range(segments)), sensors=chosen,
                     magnitude=magnitude)


# ---------------------------------------------------------------------------
# Scaling and windowing
# ---------------------------------------------------------------------------

@dataclass
class ScalerState:
    """Per-sensor min/max learned on a training split."""

    mins: np.ndarray
    maxs: np.ndarray


def fit_scaler(episodes: list[EpisodeRecord]) -> ScalerState:
    """Per-sensor extrema over the given (training) episodes only."""
    if not episodes:
        raise ConfigError("cannot fit a scaler on an empty training set")
    mins = np.minimum.reduce([ep.values.min(axis=1) for ep in episodes])
    maxs = np.maximum.reduce([ep.values.max(axis=1) for ep in episodes])
    return ScalerState(mins=mins, maxs=maxs)


def apply_scaler(state: ScalerState, episode: EpisodeRecord) -> EpisodeRecord:
    """Map values through (x - min) / (max - min); degenerate sensors go to 0.

    Values outside the fitted range are passed through unclipped, so test
    data may leave [0, 1].
    """
    return EpisodeRecord(
        episode_id=episode.episode_id,
        values=scale_values(state, episode.values),
        label=episode.label,
        injections=list(episode.injections),
    )


def scale_values(state: ScalerState, values: np.ndarray) -> np.ndarray:
    span = state.maxs - state.mins
    safe = np.where(span > 0, span, 1.0)
    scaled = (values - state.mins[:, None]) / safe[:, None]
    scaled[span == 0, :] = 0.0
    return scaled


def segment_episode(values: np.ndarray, window: int, pad: bool = False) -> np.ndarray:
    """Split (S, T) into (N_w, S, window) contiguous non-overlapping slices.

    If T is not divisible by the window, either reject or zero-pad the final
    window, per ``pad``.
    """
    values = np.asarray(values, dtype=np.float64)
    n_sensors, total = values.shape
    remainder = total % window
    if remainder:
        if not pad:
            raise IngestionError(
                f"episode length {total} is not divisible by window {window}"
            )
        padded = np.zeros((n_sensors, total + window - remainder))
        padded[:, :total] = values
        values = padded
        total = values.shape[1]
    n_segments = total // window
    return values.reshape(n_sensors, n_segments, window).transpose(1, 0, 2)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def sensor_columns(n_sensors: int) -> list[str]:
    return [f"sensor_{i + 1}" for i in range(n_sensors)]


def save_episodes_csv(path: str | Path, episodes: list[EpisodeRecord]) -> None:
    """Long-format CSV: episode_id, t, sensor columns, label."""
    path = Path(path)
    if not episodes:
        raise ConfigError("refusing to write an empty dataset")
    names = sensor_columns(episodes[0].n_sensors)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode_id", "t"] + names + ["label"])
        for ep in episodes:
            for t in range(ep.n_samples):
                row = [ep.episode_id, t]
                # repr of a Python float round-trips exactly through text
                row.extend(repr(float(v)) for v in ep.values[:, t])
                row.append(ep.label)
                writer.writerow(row)


def load_episodes_csv(path: str | Path) -> list[EpisodeRecord]:
    """Parse the long format (or a single-episode file without episode_id).

    Malformed rows are reported with their 1-based line number.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        has_id = "episode_id" in header
        required = ["t", "label"] + (["episode_id"] if has_id else [])
        for col in required:
            if col not in header:
                raise IngestionError(f"{path}: missing required column {col!r}")
        sensor_names = [h for h in header if h not in ("episode_id", "t", "label")]
        if not sensor_names:
            raise IngestionError(f"{path}: no sensor columns found")
        idx = {name: header.index(name) for name in header}

        series: dict[str, list[list[float]]] = {}
        labels: dict[str, int] = {}
        order: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: line {line_no}: expected {len(header)} fields, got {len(row)}"
                )
            ep_id = row[idx["episode_id"]] if has_id else path.stem
            try:
                sample = [float(row[idx[name]]) for name in sensor_names]
                label = int(row[idx["label"]])
            except ValueError as err:
                raise IngestionError(f"{path}: line {line_no}: {err}") from None
            if label not in (0, 1):
                raise IngestionError(f"{path}: line {line_no}: label must be 0 or 1")
            if ep_id not in series:
                series[ep_id] = []
                labels[ep_id] = label
                order.append(ep_id)
            elif labels[ep_id] != label:
                raise IngestionError(
                    f"{path}: line {line_no}: inconsistent label for episode {ep_id}"
                )
            series[ep_id].append(sample)
        if not series:
            raise IngestionError(f"{path}: no data rows")

    episodes = []
    for ep_id in order:
        values = np.array(series[ep_id], dtype=np.float64).T
        # Labels from CSV have no metadata; attach a placeholder injection so
        # the label/injection invariant still holds until metadata is merged.
        injections = [Injection(kind="unknown", segments=[], sensors=[], magnitude=0.0)] \
            if labels[ep_id] else []
        episodes.append(EpisodeRecord(ep_id, values, labels[ep_id], injections))
    return episodes


DATASET_META_NAME = "dataset.json"
DATASET_CSV_NAME = "data.csv"


def save_dataset(out_dir: str | Path, episodes: list[EpisodeRecord],
                 config: dict | None = None) -> dict:
    """Write ``data.csv`` plus ``dataset.json`` (labels, injections, settings)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_episodes_csv(out_dir / DATASET_CSV_NAME, episodes)
    meta = {
        "version": 1,
        "n_episodes": len(episodes),
        "n_anomalous": sum(ep.label for ep in episodes),
        "config": config or {},
        "episodes": [
            {
                "episode_id": ep.episode_id,
                "label": ep.label,
                "injections": [inj.to_dict() for inj in ep.injections],
            }
            for ep in episodes
        ],
    }
    with open(out_dir / DATASET_META_NAME, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def load_dataset(path: str | Path) -> tuple[list[EpisodeRecord], dict]:
    """Load a dataset directory (or bare CSV); returns (episodes, metadata).

    When ``dataset.json`` is available next to the CSV, injection metadata
    replaces the placeholder injections created from bare labels.
    """
    path = Path(path)
    if path.is_dir():
        csv_path = path / DATASET_CSV_NAME
        meta_path = path / DATASET_META_NAME
    else:
        csv_path = path
        meta_path = path.parent / DATASET_META_NAME
    if not csv_path.exists():
        raise IngestionError(f"dataset file not found: {csv_path}")
    episodes = load_episodes_csv(csv_path)
    meta: dict = {}
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        by_id = {e["episode_id"]: e for e in meta.get("episodes", [])}
        for ep in episodes:
            entry = by_id.get(ep.episode_id)
            if entry is not None:
                ep.injections = [Injection.from_dict(d) for d in entry.get("injections", [])]
                if bool(ep.injections) != (ep.label == 1):
                    raise IngestionError(
                        f"metadata for {ep.episode_id} disagrees with its CSV label"
                    )
    return episodes, meta
