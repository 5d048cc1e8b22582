import numpy as np
import pytest

from stdiag.attention import AttentionMaps
from stdiag.data import Injection
from stdiag.diagnostics import (DiagnosticScores, _topk_masks, at_score,
                                diagnostic_scores, localization_check)
from stdiag.errors import ContractError


def random_maps(rng, sensors=4, segments=5):
    def stochastic(shape):
        raw = rng.random(shape) + 0.05
        return raw / raw.sum(axis=-1, keepdims=True)

    return AttentionMaps(
        temporal=stochastic((sensors, segments, segments)),
        spatial=stochastic((segments, sensors, sensors)),
    )


def uniform_maps(sensors=4, segments=5):
    return AttentionMaps(
        temporal=np.full((sensors, segments, segments), 1.0 / segments),
        spatial=np.full((segments, sensors, sensors), 1.0 / sensors),
    )


# ---------------------------------------------------------------------------
# diagnostic scores
# ---------------------------------------------------------------------------

def test_uniform_attention_gives_unit_relevance():
    scores = diagnostic_scores(uniform_maps())
    assert np.allclose(scores.temporal_relevance, 1.0)
    assert np.allclose(scores.temporal_global_relevance, 1.0)
    assert np.allclose(scores.spatial_relevance, 1.0)
    assert np.allclose(scores.spatial_global_relevance, 1.0)


def test_mass_conservation_identities(rng):
    scores = diagnostic_scores(random_maps(rng))
    errors = scores.conservation_errors()
    assert max(errors.values()) < 1e-8
    scores.assert_conserved(1e-8)


def test_scores_match_direct_summation_oracle(rng):
    maps = random_maps(rng, sensors=3, segments=4)
    scores = diagnostic_scores(maps)
    s, n_w = 3, 4
    a_rel = np.zeros((s, n_w))
    for si in range(s):
        for tau in range(n_w):
            a_rel[si, tau] = sum(maps.temporal[si, tp, tau] for tp in range(n_w))
    assert np.abs(scores.temporal_relevance - a_rel).max() == 0.0
    a_glob = sum(maps.temporal[si] for si in range(s)) / s
    assert np.abs(scores.temporal_global_matrix - a_glob).max() < 1e-15
    ag = a_rel.mean(axis=0)
    assert np.abs(scores.temporal_global_relevance - ag).max() < 1e-15
    b_rel = np.zeros((n_w, s))
    for tau in range(n_w):
        for si in range(s):
            b_rel[tau, si] = sum(maps.spatial[tau, sp, si] for sp in range(s))
    assert np.abs(scores.spatial_relevance - b_rel).max() == 0.0
    b_glob = np.zeros((s, s))
    for sp in range(s):
        for si in range(s):
            b_glob[sp, si] = sum(
                maps.spatial[tau, sp, si] * ag[tau] for tau in range(n_w)) / n_w
    assert np.abs(scores.spatial_global_matrix - b_glob).max() < 1e-15
    assert np.abs(scores.spatial_global_relevance - b_glob.sum(axis=0)).max() < 1e-15


def test_non_stochastic_maps_rejected(rng):
    maps = random_maps(rng)
    maps.temporal[0, 0, 0] += 0.5
    with pytest.raises(ContractError):
        diagnostic_scores(maps)


def test_scores_are_permutation_equivariant(rng):
    maps = random_maps(rng, sensors=4, segments=3)
    perm = np.array([2, 0, 3, 1])
    permuted = AttentionMaps(
        temporal=maps.temporal[perm],
        spatial=maps.spatial[:, perm][:, :, perm],
    )
    base = diagnostic_scores(maps)
    out = diagnostic_scores(permuted)
    assert np.abs(out.temporal_relevance - base.temporal_relevance[perm]).max() < 1e-12
    assert np.abs(out.spatial_relevance - base.spatial_relevance[:, perm]).max() < 1e-12
    assert np.abs(out.spatial_global_matrix
                  - base.spatial_global_matrix[np.ix_(perm, perm)]).max() < 1e-12
    assert np.abs(out.spatial_global_relevance
                  - base.spatial_global_relevance[perm]).max() < 1e-12


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def concentrated_scores(sensors=8, segments=10, hot_segment=3, hot_sensors=(1, 2)):
    temporal_rel = np.full(segments, 0.8)
    temporal_rel[hot_segment] = segments - 0.8 * (segments - 1)
    spatial = np.ones((segments, sensors))
    for s in hot_sensors:
        spatial[hot_segment, s] = sensors
    glob = np.ones(sensors)
    for s in hot_sensors:
        glob[s] = sensors
    return DiagnosticScores(
        temporal_relevance=np.tile(temporal_rel, (sensors, 1)),
        temporal_global_matrix=np.full((segments, segments), 1.0 / segments),
        temporal_global_relevance=temporal_rel,
        spatial_relevance=spatial,
        spatial_global_matrix=np.full((sensors, sensors), 1.0 / sensors),
        spatial_global_relevance=glob,
    )


def test_localization_hits_for_concentrated_attention():
    scores = concentrated_scores()
    result = localization_check(
        scores, [Injection("point", segments=[3], sensors=[1, 2], magnitude=6.0)])
    assert result.temporal_hit is True
    assert result.spatial_hit is True


def test_localization_misses_for_wrong_segment():
    scores = concentrated_scores(hot_segment=7)
    result = localization_check(
        scores, [Injection("point", segments=[3], sensors=[1], magnitude=6.0)])
    assert result.temporal_hit is False


def test_localization_none_for_normal_episode():
    result = localization_check(concentrated_scores(), [])
    assert result.temporal_hit is None
    assert result.spatial_hit is None


def test_friction_uses_distributed_attention_criterion():
    segments, sensors = 10, 8
    flat = DiagnosticScores(
        temporal_relevance=np.ones((sensors, segments)),
        temporal_global_matrix=np.full((segments, segments), 0.1),
        temporal_global_relevance=np.ones(segments),
        spatial_relevance=np.ones((segments, sensors)),
        spatial_global_matrix=np.full((sensors, sensors), 1.0 / sensors),
        spatial_global_relevance=np.array([4.0, 4.0, 1.0, 1, 1, 1, 1, 1]),
    )
    inj = Injection("friction", segments=list(range(segments)), sensors=[0, 1],
                    magnitude=3.0)
    result = localization_check(flat, [inj])
    assert result.temporal_hit is True  # no segment dominates
    assert result.spatial_hit is True   # 0,1 lead the global ranking
    spiky = flat
    spiky.temporal_global_relevance = np.array([9.1] + [0.1] * 9)
    assert localization_check(spiky, [inj]).temporal_hit is False


# ---------------------------------------------------------------------------
# top-k masks
# ---------------------------------------------------------------------------

def test_topk_masks_zero_expected_count(rng):
    maps = random_maps(rng, sensors=3, segments=4)
    total = maps.temporal.size + maps.spatial.size
    masks = _topk_masks(maps, 25.0)
    zeroed = (masks.temporal == 0).sum() + (masks.spatial == 0).sum()
    assert zeroed == int(round(0.25 * total))


def test_topk_masks_pick_largest_entries(rng):
    maps = random_maps(rng, sensors=2, segments=3)
    masks = _topk_masks(maps, 10.0)
    pooled = np.concatenate([maps.temporal.ravel(), maps.spatial.ravel()])
    keep = np.concatenate([masks.temporal.ravel(), masks.spatial.ravel()])
    n_zero = int(round(0.10 * pooled.size))
    cutoff = np.sort(pooled)[-n_zero]
    assert np.all(pooled[keep == 0.0] >= cutoff)


def test_topk_zero_percent_keeps_everything(rng):
    maps = random_maps(rng)
    masks = _topk_masks(maps, 0.0)
    assert np.all(masks.temporal == 1.0) and np.all(masks.spatial == 1.0)


def test_topk_hundred_percent_zeroes_everything(rng):
    maps = random_maps(rng)
    masks = _topk_masks(maps, 100.0)
    assert np.all(masks.temporal == 0.0) and np.all(masks.spatial == 0.0)


def test_at_score_rejects_bad_percentages(tiny_config, rng):
    from stdiag.model import AnomalyClassifier
    model = AnomalyClassifier(tiny_config)
    with pytest.raises(ContractError):
        at_score(model, [], [150.0])
