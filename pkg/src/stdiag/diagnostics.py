"""Diagnostic scores derived from attention, and their validation.

From the row-stochastic attention stacks of one episode we compute eight
scores: per-sensor and global temporal relevance (how much attention each
segment receives), the sensor-averaged temporal matrix, per-segment and
global spatial relevance, and a relevance-weighted global spatial matrix.
Column sums are used throughout, i.e. relevance counts attention *received*.

The attention-trustworthiness score quantifies how much the pre-sigmoid
model output drops when the strongest attention entries are zeroed: for a
given percentage k, the top-k% entries of the pooled temporal+spatial
weights are set to zero post-softmax (no renormalization) and the full
forward pass is re-run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMaps, AttentionMasks
from .data import EpisodeRecord, Injection
from .errors import ContractError
from .model import AnomalyClassifier, Prediction


@dataclass
class DiagnosticScores:
    """The eight attention-derived scores for one episode."""

    temporal_relevance: np.ndarray        # (S, N_w): per-sensor, received by segment
    temporal_global_matrix: np.ndarray    # (N_w, N_w): sensor-averaged attention
    temporal_global_relevance: np.ndarray  # (N_w,)
    spatial_relevance: np.ndarray         # (N_w, S): per-segment, received by sensor
    spatial_global_matrix: np.ndarray     # (S, S): relevance-weighted average
    spatial_global_relevance: np.ndarray  # (S,)

    def conservation_errors(self) -> dict[str, float]:
        """Deviations of the six mass-conservation identities (ideally ~0)."""
        s, n_w = self.temporal_relevance.shape
        return {
            "temporal_relevance_rows": float(np.abs(
                self.temporal_relevance.sum(axis=1) - n_w).max()),
            "temporal_global_matrix_rows": float(np.abs(
                self.temporal_global_matrix.sum(axis=1) - 1.0).max()),
            "temporal_global_relevance": abs(
                float(self.temporal_global_relevance.sum()) - n_w),
            "spatial_relevance_rows": float(np.abs(
                self.spatial_relevance.sum(axis=1) - s).max()),
            "spatial_global_matrix_rows": float(np.abs(
                self.spatial_global_matrix.sum(axis=1) - 1.0).max()),
            "spatial_global_relevance": abs(
                float(self.spatial_global_relevance.sum()) - s),
        }

    def assert_conserved(self, tol: float = 1e-8) -> None:
        errors = self.conservation_errors()
        worst = max(errors, key=errors.get)
        if errors[worst] > tol:
            raise ContractError(f"conservation identity {worst} violated by {errors[worst]}")


def diagnostic_scores(maps: AttentionMaps, tol: float = 1e-8) -> DiagnosticScores:
    """Aggregate an episode's attention stacks into the diagnostic scores."""
    maps.validate_stochastic(tol=tol)
    a = maps.temporal  # (S, N_w, N_w), rows = attending segment
    b = maps.spatial   # (N_w, S, S), rows = attending sensor
    temporal_relevance = a.sum(axis=1)            # column sums per sensor
    temporal_global_matrix = a.mean(axis=0)
    temporal_global_relevance = temporal_relevance.mean(axis=0)
    spatial_relevance = b.sum(axis=1)             # column sums per segment
    n_w = b.shape[0]
    weighted = b * temporal_global_relevance[:, None, None]
    spatial_global_matrix = weighted.sum(axis=0) / n_w
    spatial_global_relevance = spatial_global_matrix.sum(axis=0)
    return DiagnosticScores(
        temporal_relevance=temporal_relevance,
        temporal_global_matrix=temporal_global_matrix,
        temporal_global_relevance=temporal_global_relevance,
        spatial_relevance=spatial_relevance,
        spatial_global_matrix=spatial_global_matrix,
        spatial_global_relevance=spatial_global_relevance,
    )


@dataclass
class DiagnosticReport:
    """Scores plus prediction and provenance for one episode."""

    episode_id: str
    logit: float
    probability: float
    label: int
    scores: DiagnosticScores
    localization: "LocalizationResult | None" = None

    def to_dict(self) -> dict:
        payload = {
            "episode_id": self.episode_id,
            "logit": self.logit,
            "probability": self.probability,
            "predicted_label": self.label,
            "temporal_relevance": self.scores.temporal_relevance.tolist(),
            "temporal_global_matrix": self.scores.temporal_global_matrix.tolist(),
            "temporal_global_relevance": self.scores.temporal_global_relevance.tolist(),
            "spatial_relevance": self.scores.spatial_relevance.tolist(),
            "spatial_global_matrix": self.scores.spatial_global_matrix.tolist(),
            "spatial_global_relevance": self.scores.spatial_global_relevance.tolist(),
        }
        if self.localization is not None:
            payload["localization"] = self.localization.to_dict()
        return payload


def diagnose_episode(model: AnomalyClassifier, episode: EpisodeRecord) -> DiagnosticReport:
    """Run one evaluation forward pass and derive the full report.

    Localization flags are attached only when the episode carries injection
    metadata (normal episodes get no flags).
    """
    pred = model.forward(episode.values)
    scores = diagnostic_scores(pred.maps)
    localization = None
    if episode.injections and all(inj.kind in ("point", "friction")
                                  for inj in episode.injections):
        localization = localization_check(scores, episode.injections)
    return DiagnosticReport(
        episode_id=episode.episode_id,
        logit=pred.logit,
        probability=pred.probability,
        label=pred.label,
        scores=scores,
        localization=localization,
    )


# ---------------------------------------------------------------------------
# Localization against ground truth
# ---------------------------------------------------------------------------

TEMPORAL_TOP_K = 3
DISTRIBUTED_RATIO = 3.0  # "no dominant segment": max relevance < ratio * mean


@dataclass
class LocalizationResult:
    """Whether attention agreed with the injected ground truth."""

    temporal_hit: bool | None
    spatial_hit: bool | None

    def to_dict(self) -> dict:
        return {"temporal_hit": self.temporal_hit, "spatial_hit": self.spatial_hit}


def localization_check(scores: DiagnosticScores,
                       injections: list[Injection]) -> LocalizationResult:
    """Compare relevance rankings against injection metadata.

    Point injections: every injected segment must rank in the top-3 of the
    global temporal relevance, and at each injected segment every injected
    sensor must rank in the top-ceil(S/4) of that segment's spatial
    relevance. Friction injections (episode-wide): temporal attention must
    be distributed (no segment above 3x the mean relevance) and injected
    sensors must rank in the top-ceil(S/4) of the global spatial relevance.
    """
    if not injections:
        return LocalizationResult(temporal_hit=None, spatial_hit=None)
    n_sensors = scores.spatial_global_relevance.shape[0]
    n_segments = scores.temporal_global_relevance.shape[0]
    top_sensors = math.ceil(n_sensors / 4)
    temporal_ranks = np.argsort(-scores.temporal_global_relevance, kind="stable")
    temporal_top = set(temporal_ranks[:TEMPORAL_TOP_K].tolist())
    global_sensor_ranks = np.argsort(-scores.spatial_global_relevance, kind="stable")
    global_sensor_top = set(global_sensor_ranks[:top_sensors].tolist())

    temporal_hit = True
    spatial_hit = True
    for inj in injections:
        if inj.kind == "friction" or len(inj.segments) == n_segments:
            peak = float(scores.temporal_global_relevance.max())
            mean = float(scores.temporal_global_relevance.mean())
            temporal_hit &= peak < DISTRIBUTED_RATIO * mean
            spatial_hit &= all(s in global_sensor_top for s in inj.sensors)
        else:
            temporal_hit &= all(seg in temporal_top for seg in inj.segments)
            for seg in inj.segments:
                ranks = np.argsort(-scores.spatial_relevance[seg], kind="stable")
                top = set(ranks[:top_sensors].tolist())
                spatial_hit &= all(s in top for s in inj.sensors)
    return LocalizationResult(temporal_hit=temporal_hit, spatial_hit=spatial_hit)


# ---------------------------------------------------------------------------
# Attention trustworthiness
# ---------------------------------------------------------------------------

@dataclass
class AtScoreCurve:
    """Mean output drop per ablation percentage, with per-episode deltas."""

    k_percents: list[float]
    mean_deltas: list[float]
    median_deltas: list[float]
    per_episode: dict[float, list[float]] = field(default_factory=dict)
    episode_ids: list[str] = field(default_factory=list)
    anomaly_class: str = "all"


def _topk_masks(maps: AttentionMaps, k_percent: float) -> AttentionMasks:
    """Keep-masks zeroing the top-k% pooled temporal+spatial entries."""
    a, b = maps.temporal, maps.spatial
    pooled = np.concatenate([a.ravel(), b.ravel()])
    n_zero = int(round(k_percent / 100.0 * pooled.size))
    keep_a = np.ones_like(a)
    keep_b = np.ones_like(b)
    if n_zero > 0:
        ranked = np.argsort(-pooled, kind="stable")[:n_zero]
        flat_mask = np.ones(pooled.size)
        flat_mask[ranked] = 0.0
        keep_a = flat_mask[:a.size].reshape(a.shape)
        keep_b = flat_mask[a.size:].reshape(b.shape)
    return AttentionMasks(temporal=keep_a, spatial=keep_b)


def at_score(model: AnomalyClassifier, episodes: list[EpisodeRecord],
             k_percents: list[float]) -> AtScoreCurve:
    """Attention trustworthiness over a test set.

    For each episode the unablated forward pass supplies both the reference
    pre-sigmoid output and the attention ranking; each k then zeroes that
    episode's top-k% entries and re-runs the full forward pass. k = 0 leaves
    the model untouched, so its delta is exactly zero.
    """
    for k in k_percents:
        if not 0.0 <= k <= 100.0:
            raise ContractError(f"ablation percentage must lie in [0, 100], got {k}")
    per_episode: dict[float, list[float]] = {k: [] for k in k_percents}
    ids = []
    for ep in episodes:
        base = model.forward(ep.values)
        ids.append(ep.episode_id)
        for k in k_percents:
            if k == 0.0:
                per_episode[k].append(0.0)
                continue
            masks = _topk_masks(base.maps, k)
            ablated = model.forward(ep.values, masks=masks)
            per_episode[k].append(base.logit - ablated.logit)
    return AtScoreCurve(
        k_percents=list(k_percents),
        mean_deltas=[float(np.mean(per_episode[k])) if per_episode[k] else 0.0
                     for k in k_percents],
        median_deltas=[float(np.median(per_episode[k])) if per_episode[k] else 0.0
                       for k in k_percents],
        per_episode=per_episode,
        episode_ids=ids,
    )


def at_score_by_class(model: AnomalyClassifier, episodes: list[EpisodeRecord],
                      k_percents: list[float]) -> dict[str, AtScoreCurve]:
    """AT-score curves grouped by anomaly class (point / friction / normal)."""
    groups: dict[str, list[EpisodeRecord]] = {}
    for ep in episodes:
        groups.setdefault(ep.anomaly_kind(), []).append(ep)
    curves = {}
    for name, group in sorted(groups.items()):
        curve = at_score(model, group, k_percents)
        curve.anomaly_class = name
        curves[name] = curve
    return curves
