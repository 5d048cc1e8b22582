"""End-to-end episode classifier and its training/evaluation harness.

Pipeline per episode: per-sensor CNN features for each segment, temporal
positional encoding added to every sensor row, one spatio-temporal
attention layer, then a classification head (flatten sensors, average over
segments, FC+ReLU+dropout, FC+sigmoid) trained with binary cross-entropy.

Everything is deterministic given the config seed: parameter init, dropout
masks, minibatch order, and fold splits all derive from it.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from configparser import ConfigParser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionMaps, AttentionMasks, StLayer, StLayerConfig
from .data import EpisodeRecord, ScalerState, fit_scaler, scale_values, segment_episode
from .encoding import EncodingKind, EncodingSpec, encoding_matrix
from .errors import ConfigError, ContractError, DimensionError, IngestionError, NumericError
from .feature_cnn import CnnConfig, FeatureExtractor
from .optim import Adam
from .tensor import Tape, Tensor, backward, parameter

BCE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """All hyperparameters, serializable to a flat INI-style text file."""

    # [data]
    sensors: int
    segments: int
    window: int
    # [model]
    embed_dim: int = 240
    encoding: str = "faithful"
    rho: float = 10000.0
    cnn_blocks: int = 4
    kernel_size: int = 5
    filters: int = 32
    pool_size: int = 2
    pool_stride: int = 2
    ffn_dim: int = 2048
    heads: int = 1
    attention_mode: str = "factorized"
    dropout: float = 0.1
    head_hidden: int = 512
    threshold: float = 0.5
    # [train]
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.15
    pad_policy: str = "reject"
    seed: int = 0

    def validate(self) -> None:
        if self.sensors < 1 or self.segments < 1 or self.window < 1:
            raise ConfigError("sensors, segments and window must all be positive")
        if self.embed_dim % 2 != 0:
            raise ConfigError(f"embedding width must be even, got {self.embed_dim}")
        if self.embed_dim <= self.segments:
            raise ConfigError(
                f"embedding width {self.embed_dim} must exceed the segment count "
                f"{self.segments} for lattice positional encoding"
            )
        if self.encoding not in ("faithful", "vanilla"):
            raise ConfigError(f"unknown encoding kind {self.encoding!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch size, epochs and patience must be positive")
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.pad_policy not in ("reject", "pad"):
            raise ConfigError(f"pad_policy must be 'reject' or 'pad', got {self.pad_policy!r}")
        self.cnn_config().validate(self.window)
        self.st_config().validate()

    def cnn_config(self) -> CnnConfig:
        return CnnConfig(
            num_blocks=self.cnn_blocks,
            kernel_size=self.kernel_size,
            filters=self.filters,
            pool_size=self.pool_size,
            pool_stride=self.pool_stride,
            embed_dim=self.embed_dim,
        )

    def st_config(self) -> StLayerConfig:
        return StLayerConfig(
            embed_dim=self.embed_dim,
            ffn_dim=self.ffn_dim,
            heads=self.heads,
            dropout=self.dropout,
            mode=self.attention_mode,
        )

    def encoding_spec(self) -> EncodingSpec:
        kind = EncodingKind.FAITHFUL if self.encoding == "faithful" else EncodingKind.VANILLA
        return EncodingSpec(d=self.embed_dim, kind=kind, rho=self.rho)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        hints = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value)
        return cls(**kwargs)

    def to_ini_text(self) -> str:
        lines = []
        for section, names in _INI_SECTIONS.items():
            lines.append(f"[{section}]")
            for name in names:
                lines.append(f"{name} = {getattr(self, name)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini_text(cls, text: str, defaults: "ModelConfig | None" = None) -> "ModelConfig":
        parser = ConfigParser()
        parser.read_string(text)
        values: dict = {} if defaults is None else defaults.to_dict()
        known = {name for names in _INI_SECTIONS.values() for name in names}
        for section in parser.sections():
            if section not in _INI_SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                values[key] = _coerce(key, raw)
        missing = [k for k in ("sensors", "segments", "window") if k not in values]
        if missing:
            raise ConfigError(f"config is missing required keys: {', '.join(missing)}")
        return cls(**values)

    @classmethod
    def from_ini_file(cls, path: str | Path,
                      defaults: "ModelConfig | None" = None) -> "ModelConfig":
        return cls.from_ini_text(Path(path).read_text(encoding="utf-8"), defaults)

    def with_overrides(self, overrides: dict[str, object]) -> "ModelConfig":
        coerced = {k: _coerce(k, v) for k, v in overrides.items()}
        return replace(self, **coerced)

    @classmethod
    def synthetic_profile(cls, sensors: int, segments: int, window: int,
                          **overrides) -> "ModelConfig":
        """Desk-scale defaults sized for the synthetic benchmark datasets."""
        cfg = cls(
            sensors=sensors, segments=segments, window=window,
            embed_dim=64, filters=16, ffn_dim=256, head_hidden=128,
            max_epochs=60,
        )
        return cfg.with_overrides(overrides) if overrides else cfg


_INI_SECTIONS: dict[str, list[str]] = {
    "data": ["sensors", "segments", "window"],
    "model": ["embed_dim", "encoding", "rho", "cnn_blocks", "kernel_size", "filters",
              "pool_size", "pool_stride", "ffn_dim", "heads", "attention_mode",
              "dropout", "head_hidden", "threshold"],
    "train": ["lr", "batch_size", "max_epochs", "patience", "val_fraction",
              "pad_policy", "seed"],
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _coerce(key: str, value) -> object:
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config key {key!r}: {err}") from None


# ---------------------------------------------------------------------------
# The classifier
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """One classification outcome plus the attention used to produce it."""

    logit: float
    probability: float
    label: int
    maps: AttentionMaps


class AnomalyClassifier:
    """CNN + positional encoding + spatio-temporal attention + sigmoid head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        init_rng, = _rng_streams(config.seed, 1)
        self.cnn = FeatureExtractor(config.sensors, config.window, config.cnn_config(),
                                    init_rng)
        self.st = StLayer(config.st_config(), init_rng)
        m, hidden = config.embed_dim, config.head_hidden
        flat = config.sensors * m
        self.head: dict[str, Tensor] = {}
        bound = np.sqrt(1.0 / flat)
        self.head["head.w1"] = parameter(
            init_rng.uniform(-bound, bound, size=(flat, hidden)), name="head.w1")
        self.head["head.b1"] = parameter(np.zeros(hidden), name="head.b1")
        bound = np.sqrt(1.0 / hidden)
        self.head["head.w2"] = parameter(
            init_rng.uniform(-bound, bound, size=(hidden, 1)), name="head.w2")
        self.head["head.b2"] = parameter(np.zeros(1), name="head.b2")
        # Positional encoding is a fixed analytic matrix; it consumes no
        # randomness, so both encoding kinds see identical initial weights.
        enc = encoding_matrix(config.encoding_spec(), config.segments)
        self._encoding = enc.reshape(1, config.segments, 1, m)
        self.scaler: ScalerState | None = None
        self._eval_rng = np.random.default_rng(0)  # dropout is inert in eval mode

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return {**self.cnn.params, **self.st.params, **self.head}

    def buffers(self) -> dict[str, np.ndarray]:
        buffers = dict(self.cnn.buffers)
        if self.scaler is not None:
            buffers["scaler.mins"] = self.scaler.mins
            buffers["scaler.maxs"] = self.scaler.maxs
        return buffers

    def set_scaler(self, scaler: ScalerState | None) -> None:
        self.scaler = scaler

    def state_snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: p.data.copy() for k, p in self.parameters().items()}
        snap.update({f"buffer:{k}": v.copy() for k, v in self.cnn.buffers.items()})
        return snap

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for key, value in snap.items():
            if key.startswith("buffer:"):
                self.cnn.buffers[key[len("buffer:"):]][...] = value
            else:
                params[key].data[...] = value

    # -- forward -------------------------------------------------------------

    def segment_episode_values(self, values: np.ndarray) -> np.ndarray:
        """Scale (if fitted) and window one raw episode into (N_w, S, w_l)."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.config.sensors:
            raise DimensionError(
                f"expected ({self.config.sensors}, T) episode values, got {values.shape}"
            )
        if self.scaler is not None:
            values = scale_values(self.scaler, values)
        segments = segment_episode(values, self.config.window,
                                   pad=self.config.pad_policy == "pad")
        if segments.shape[0] != self.config.segments:
            raise IngestionError(
                f"episode yields {segments.shape[0]} segments, model expects "
                f"{self.config.segments}"
            )
        return segments

    def _forward_segments(self, segments: np.ndarray, train: bool,
                          rng: np.random.Generator,
                          masks: AttentionMasks | None = None,
                          return_maps: bool = True,
                          ) -> tuple[Tensor, list[AttentionMaps] | None]:
        """Batched forward over pre-segmented episodes (B, N_w, S, w_l)."""
        b, nw, s, w = segments.shape
        cfg = self.config
        if (nw, s, w) != (cfg.segments, cfg.sensors, cfg.window):
            raise DimensionError(
                f"expected (B, {cfg.segments}, {cfg.sensors}, {cfg.window}), "
                f"got {segments.shape}"
            )
        x = self.cnn.extract_batch(segments.reshape(b * nw, s, w), train=train)
        x = T.reshape(x, (b, nw, s, cfg.embed_dim))
        x = T.add(x, self._encoding)
        x, maps = self.st.forward(x, train, rng, masks)
        flat = T.reshape(x, (b, nw, s * cfg.embed_dim))
        pooled = T.tmean(flat, axis=1)
        hid = T.relu(T.add(T.matmul(pooled, self.head["head.w1"]), self.head["head.b1"]))
        hid = T.dropout(hid, cfg.dropout, rng, train)
        logits = T.reshape(
            T.add(T.matmul(hid, self.head["head.w2"]), self.head["head.b2"]), (b,))
        return logits, (maps if return_maps else None)

    def forward(self, values: np.ndarray, masks: AttentionMasks | None = None
                ) -> Prediction:
        """Evaluation-mode prediction for one raw episode (S, T)."""
        segments = self.segment_episode_values(values)
        logits, maps = self._forward_segments(segments[None], train=False,
                                              rng=self._eval_rng, masks=masks)
        logit = float(logits.data[0])
        if not np.isfinite(logit):
            raise NumericError("forward pass produced a non-finite logit")
        prob = float(1.0 / (1.0 + np.exp(-logit))) if logit >= 0 else \
            float(np.exp(logit) / (1.0 + np.exp(logit)))
        return Prediction(
            logit=logit,
            probability=prob,
            label=int(prob >= self.config.threshold),
            maps=maps[0],
        )

    def predict_probabilities(self, episodes: Sequence[EpisodeRecord],
                              chunk: int = 32) -> np.ndarray:
        """Evaluation-mode probabilities for raw episodes, in order."""
        segments = np.stack([self.segment_episode_values(ep.values) for ep in episodes])
        return self._predict_segment_probs(segments, chunk)

    def _predict_segment_probs(self, segments: np.ndarray, chunk: int = 32) -> np.ndarray:
        probs = np.empty(segments.shape[0])
        for start in range(0, segments.shape[0], chunk):
            part = segments[start:start + chunk]
            logits, _ = self._forward_segments(part, train=False, rng=self._eval_rng,
                                               return_maps=False)
            x = logits.data
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            probs[start:start + chunk] = out
        return probs


def _rng_streams(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(c) for c in children]


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------

def bce_loss(predictions: Sequence[Prediction | float], labels: Sequence[int]) -> float:
    """Summed binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    if len(predictions) != len(labels):
        raise ContractError(
            f"{len(predictions)} predictions vs {len(labels)} labels")
    total = 0.0
    for pred, label in zip(predictions, labels):
        if label not in (0, 1):
            raise ContractError(f"labels must be 0 or 1, got {label!r}")
        p = pred.probability if isinstance(pred, Prediction) else float(pred)
        p = min(max(p, BCE_EPS), 1.0 - BCE_EPS)
        total += -(label * np.log(p) + (1 - label) * np.log(1.0 - p))
    return float(total)


def _bce_graph(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE as a differentiable graph over batch logits."""
    probs = T.clip(T.sigmoid(logits), BCE_EPS, 1.0 - BCE_EPS)
    y = labels.astype(np.float64)
    term = T.add(T.mul(y, T.log(probs)), T.mul(1.0 - y, T.log(T.sub(1.0, probs))))
    return T.mul(T.neg(T.tsum(term)), 1.0 / labels.shape[0])


@dataclass
class Metrics:
    """Binary classification metrics; zero-division cases yield 0 and a flag."""

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    zero_division: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def binary_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"label shapes disagree: {y_true.shape} vs {y_pred.shape}")
    tp = int(((y_true == 1) & (y_pred == 1)).sum())
    fp = int(((y_true == 0) & (y_pred == 1)).sum())
    tn = int(((y_true == 0) & (y_pred == 0)).sum())
    fn = int(((y_true == 1) & (y_pred == 0)).sum())
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Metrics(precision=precision, recall=recall, f1=f1,
                   tp=tp, fp=fp, tn=tn, fn=fn, zero_division=flags)


def evaluate(model: AnomalyClassifier, episodes: Sequence[EpisodeRecord],
             threshold: float | None = None) -> Metrics:
    """Precision/recall/F1 of the model on labeled episodes."""
    if not episodes:
        raise ContractError("cannot evaluate on an empty episode list")
    thr = model.config.threshold if threshold is None else threshold
    probs = model.predict_probabilities(episodes)
    preds = (probs >= thr).astype(int)
    return binary_metrics([ep.label for ep in episodes], preds)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: AnomalyClassifier
    history: list[dict]
    best_epoch: int
    best_val_f1: float


def best_threshold(probs: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """Decision threshold maximizing F1 on held-out probabilities.

    Candidates are the midpoints between adjacent distinct probabilities
    (plus 0.5); ties prefer the threshold closest to 0.5.
    """
    labels = list(labels)
    uniq = np.sort(np.unique(probs))
    candidates = [0.5]
    if uniq.size > 1:
        candidates.extend(((uniq[1:] + uniq[:-1]) / 2.0).tolist())
    best_thr, best_f1 = 0.5, -1.0
    for thr in sorted(candidates):
        if not 0.0 < thr < 1.0:
            continue
        f1 = binary_metrics(labels, (probs >= thr).astype(int)).f1
        better = f1 > best_f1 + 1e-12
        tied_closer = abs(f1 - best_f1) <= 1e-12 and abs(thr - 0.5) < abs(best_thr - 0.5)
        if better or tied_closer:
            best_thr, best_f1 = float(thr), float(f1)
    return best_thr, best_f1


def train_model(train_episodes: Sequence[EpisodeRecord],
                val_episodes: Sequence[EpisodeRecord],
                config: ModelConfig,
                log=None) -> TrainResult:
    """Minibatch Adam training with early stopping on validation F1.

    The min-max scaler is fitted on the training split only and stored on
    the returned model, so downstream evaluation of raw episodes never
    consults statistics from outside the training data.
    """
    config.validate()
    if not train_episodes or not val_episodes:
        raise ConfigError("training requires non-empty train and validation splits")
    scaler = fit_scaler(list(train_episodes))
    model = AnomalyClassifier(config)
    model.set_scaler(scaler)

    train_segments = np.stack([model.segment_episode_values(ep.values)
                               for ep in train_episodes])
    train_labels = np.array([ep.label for ep in train_episodes], dtype=np.float64)
    val_segments = np.stack([model.segment_episode_values(ep.values)
                             for ep in val_episodes])
    val_labels = [ep.label for ep in val_episodes]

    _, dropout_rng, shuffle_rng = _rng_streams(config.seed, 3)
    optimizer = Adam(model.parameters(), lr=config.lr)
    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    best_thr = config.threshold
    bad_epochs = 0
    n = train_segments.shape[0]
    flat_train = train_segments.reshape(-1, config.sensors, config.window)
    model.cnn.recalibrate(flat_train)  # replace the cold-start statistics

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            try:
                with Tape():
                    logits, _ = model._forward_segments(train_segments[batch],
                                                        train=True, rng=dropout_rng,
                                                        return_maps=False)
                    loss = _bce_graph(logits, train_labels[batch])
            except NumericError as err:
                raise NumericError(f"training diverged at epoch {epoch}: {err}") from err
            loss_value = float(loss.data)
            if not np.isfinite(loss_value) or not np.isfinite(logits.data).all():
                raise NumericError(f"training loss diverged at epoch {epoch}")
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            epoch_loss += loss_value * len(batch)
        epoch_loss /= n

        # Exact normalization statistics for this epoch's weights; the
        # momentum estimates lag too far behind for faithful validation.
        model.cnn.recalibrate(flat_train)
        val_probs = model._predict_segment_probs(val_segments)
        # The operating threshold is part of what training fits: pick the
        # F1-maximizing cut on the validation probabilities each epoch.
        threshold, val_f1 = best_threshold(val_probs, val_labels)
        val_metrics = binary_metrics(val_labels, (val_probs >= threshold).astype(int))
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss,
            "val_precision": val_metrics.precision,
            "val_recall": val_metrics.recall,
            "val_f1": val_metrics.f1,
            "threshold": threshold,
        })
        if log is not None:
            log(f"epoch {epoch}: loss {epoch_loss:.4f} val_f1 {val_metrics.f1:.4f}")

        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_state = model.state_snapshot()
            best_thr = threshold
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if best_state is not None:
        model.load_snapshot(best_state)
        model.config = replace(config, threshold=best_thr)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_val_f1=best_f1)


def episode_strata(episodes: Sequence[EpisodeRecord]) -> list[str]:
    """Stratification tags: anomaly kind, so splits stay balanced per class."""
    return [ep.anomaly_kind() for ep in episodes]


def split_train_val(episodes: Sequence[EpisodeRecord], val_fraction: float,
                    seed: int) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Stratified train/validation split (validation gets ``val_fraction``)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    order = stratified_order(episode_strata(episodes), rng)
    n_val = max(1, int(round(val_fraction * len(episodes))))
    if n_val >= len(episodes):
        raise ConfigError("dataset too small for the requested validation fraction")
    val_idx = set(order[:n_val].tolist())
    train = [episodes[i] for i in range(len(episodes)) if i not in val_idx]
    val = [episodes[i] for i in order[:n_val]]
    return train, val


def stratified_order(strata: Sequence, rng: np.random.Generator) -> np.ndarray:
    """Shuffle within each stratum, then interleave strata by fractional rank.

    Any contiguous block of the result carries approximately the global
    stratum ratios, which keeps rotating CV blocks balanced.
    """
    strata = np.asarray(strata)
    keys = []
    idxs = []
    for cls in sorted(set(strata.tolist())):
        members = np.flatnonzero(strata == cls)
        rng.shuffle(members)
        if members.size:
            keys.append((np.arange(members.size) + 0.5) / members.size)
            idxs.append(members)
    merged_keys = np.concatenate(keys)
    merged_idx = np.concatenate(idxs)
    return merged_idx[np.argsort(merged_keys, kind="stable")]


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    seed: int
    metrics: Metrics
    best_epoch: int
    n_train: int
    n_val: int
    n_test: int


@dataclass
class CvResult:
    folds: list[FoldResult]

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(f.metrics, key) for f in self.folds]))

    def std(self, key: str) -> float:
        return float(np.std([getattr(f.metrics, key) for f in self.folds]))

    def summary(self) -> dict:
        return {
            "folds": [
                {"fold": f.fold, "seed": f.seed, "best_epoch": f.best_epoch,
                 "n_train": f.n_train, "n_val": f.n_val, "n_test": f.n_test,
                 **f.metrics.to_dict()}
                for f in self.folds
            ],
            "mean": {k: self.mean(k) for k in ("precision", "recall", "f1")},
            "std": {k: self.std(k) for k in ("precision", "recall", "f1")},
        }


def fold_indices(n: int, k: int, strata: Sequence, seed: int,
                 test_fraction: float = 0.15,
                 ) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Rotating (train, val, test) index blocks over a stratified order.

    Test blocks are pairwise disjoint; validation is the block following the
    test block (cyclically); training gets the remainder (70% at the default
    fractions with k = 5).
    """
    if k < 2:
        raise ConfigError(f"cross-validation needs k >= 2, got {k}")
    block = int(round(test_fraction * n))
    if block < 1 or k * block > n:
        raise ConfigError(
            f"dataset of {n} episodes is too small for {k} folds at "
            f"{test_fraction:.0%} test share"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    order = stratified_order(strata, rng)
    splits = []
    for i in range(k):
        test_pos = np.arange(i * block, (i + 1) * block)
        val_pos = np.arange((i + 1) * block, (i + 2) * block) % n
        test = order[test_pos]
        val = order[val_pos]
        used = set(test.tolist()) | set(val.tolist())
        train = np.array([j for j in order if j not in used])
        splits.append((train, val, test))
    return splits


def _run_fold(args: tuple) -> FoldResult:
    episodes, config_dict, fold, train_idx, val_idx, test_idx, fold_seed = args
    config = ModelConfig.from_dict(config_dict).with_overrides({"seed": fold_seed})
    train = [episodes[i] for i in train_idx]
    val = [episodes[i] for i in val_idx]
    test = [episodes[i] for i in test_idx]
    result = train_model(train, val, config)
    metrics = evaluate(result.model, test)
    return FoldResult(fold=fold, seed=fold_seed, metrics=metrics,
                      best_epoch=result.best_epoch,
                      n_train=len(train), n_val=len(val), n_test=len(test))


def cross_validate(episodes: Sequence[EpisodeRecord], config: ModelConfig,
                   k: int = 5, jobs: int = 1) -> CvResult:
    """k rotating folds at 70/15/15 proportions; per-fold seeds derive from
    the master seed, so results are independent of ``jobs``."""
    episodes = list(episodes)
    splits = fold_indices(len(episodes), k, episode_strata(episodes), config.seed)
    fold_seeds = [int(s.generate_state(1)[0]) for s in
                  np.random.SeedSequence(config.seed).spawn(k)]
    tasks = [
        (episodes, config.to_dict(), i, train_idx, val_idx, test_idx, fold_seeds[i])
        for i, (train_idx, val_idx, test_idx) in enumerate(splits)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(task) for task in tasks]
    return CvResult(folds=folds)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STDIAGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: AnomalyClassifier, path: str | Path) -> None:
    """Self-describing binary container: JSON header + raw little-endian f64.

    The byte stream is a pure function of the model state, so identical
    training runs produce identical checkpoint files.
    """
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, p in model.parameters().items():
        arrays.append((name, "param", p.data))
    for name, buf in model.buffers().items():
        arrays.append((name, "buffer", buf))
    offset = 0
    entries = []
    payload = io.BytesIO()
    for name, group, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({
            "name": name,
            "group": group,
            "shape": list(data.shape),
            "offset": offset,
        })
        payload.write(data.tobytes())
        offset += data.size
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "has_scaler": model.scaler is not None,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload.getvalue())


def load_checkpoint(path: str | Path) -> AnomalyClassifier:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise IngestionError(f"{path}: not a model checkpoint")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise IngestionError(
                f"{path}: unsupported checkpoint version {header['format_version']}"
            )
        payload = np.frombuffer(fh.read(), dtype="<f8")
    config = ModelConfig.from_dict(header["config"])
    model = AnomalyClassifier(config)
    params = model.parameters()
    scaler_parts: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        values = payload[entry["offset"]:entry["offset"] + size].reshape(shape)
        name = entry["name"]
        if entry["group"] == "param":
            params[name].data[...] = values
        elif name.startswith("scaler."):
            scaler_parts[name] = values.copy()
        else:
            model.cnn.buffers[name][...] = values
    if header.get("has_scaler"):
        model.set_scaler(ScalerState(mins=scaler_parts["scaler.mins"],
                                     maxs=scaler_parts["scaler.maxs"]))
    return model
