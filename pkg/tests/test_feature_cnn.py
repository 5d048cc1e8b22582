import numpy as np
import pytest

from stdiag import tensor as T
from stdiag.errors import ConfigError, DimensionError
from stdiag.feature_cnn import CnnConfig, FeatureExtractor
from stdiag.tensor import Tape, backward

from conftest import finite_difference_check


def make_extractor(sensors=3, window=16, **overrides):
    defaults = dict(num_blocks=2, kernel_size=3, filters=4, embed_dim=6)
    defaults.update(overrides)
    config = CnnConfig(**defaults)
    return FeatureExtractor(sensors, window, config, np.random.default_rng(0))


def test_config_rejects_collapsing_pools():
    with pytest.raises(ConfigError, match="collapses"):
        CnnConfig(num_blocks=4, embed_dim=8).validate(8)


def test_config_rejects_even_kernel():
    with pytest.raises(ConfigError, match="odd"):
        CnnConfig(kernel_size=4).validate(64)


def test_zero_segment_gives_zero_pre_norm_activations():
    ex = make_extractor()
    x = T.Tensor(np.zeros((1, 1, 16)))
    for block in range(ex.config.num_blocks):
        out = ex._pre_norm(x, sensor=0, block=block)
        assert np.array_equal(out.data, np.zeros_like(out.data))
        x = T.Tensor(np.zeros_like(out.data))


def test_output_shape_matches_tabled_config():
    # 20 sensors, window 100, embedding width 240, 4 blocks of pool 2
    config = CnnConfig(num_blocks=4, kernel_size=5, filters=8, embed_dim=240)
    ex = FeatureExtractor(20, 100, config, np.random.default_rng(1))
    out = ex.extract(np.random.default_rng(2).random((20, 100)))
    assert out.shape == (20, 240)


def test_extract_rejects_wrong_shape():
    ex = make_extractor()
    with pytest.raises(DimensionError):
        ex.extract(np.zeros((3, 17)))


def test_sensor_independence():
    ex = make_extractor(sensors=4)
    rng = np.random.default_rng(3)
    base = rng.random((4, 16))
    perturbed = base.copy()
    perturbed[1] += rng.random(16)
    out_a = ex.extract(base).data
    out_b = ex.extract(perturbed).data
    assert not np.array_equal(out_a[1], out_b[1])
    for s in (0, 2, 3):
        assert np.array_equal(out_a[s], out_b[s])


def test_eval_mode_is_deterministic():
    ex = make_extractor()
    seg = np.random.default_rng(4).random((3, 16))
    a = ex.extract(seg, train=False).data
    b = ex.extract(seg, train=False).data
    assert np.array_equal(a, b)


def test_train_mode_updates_running_stats():
    ex = make_extractor()
    before = ex.buffers["cnn.s0.b0.bn_mean"].copy()
    ex.extract(np.random.default_rng(5).random((3, 16)) + 1.0, train=True)
    after = ex.buffers["cnn.s0.b0.bn_mean"]
    assert not np.array_equal(before, after)


def test_eval_mode_ignores_batch_statistics():
    ex = make_extractor()
    seg = np.random.default_rng(6).random((3, 16))
    out_before = ex.extract(seg, train=False).data
    # train on different data; eval output changes only through buffers
    ex.extract(np.random.default_rng(7).random((3, 16)) * 5.0, train=True)
    out_after = ex.extract(seg, train=False).data
    assert not np.array_equal(out_before, out_after)  # buffers moved


def test_recalibrate_sets_exact_statistics():
    ex = make_extractor(sensors=2)
    rng = np.random.default_rng(8)
    segments = rng.random((10, 2, 16))
    ex.recalibrate(segments)
    # first block of sensor 0: statistics must match a direct computation
    x = T.Tensor(segments[:, 0, :].reshape(10, 1, 16))
    acts = ex._pre_norm(x, 0, 0)
    assert np.allclose(ex.buffers["cnn.s0.b0.bn_mean"].ravel(),
                       acts.data.mean(axis=(0, 2)), atol=1e-15)
    assert np.allclose(ex.buffers["cnn.s0.b0.bn_var"].ravel(),
                       acts.data.var(axis=(0, 2)), atol=1e-15)


@pytest.mark.parametrize("train", [False, True])
def test_extract_gradient_matches_finite_differences(train, rng):
    ex = make_extractor(sensors=2, window=8, num_blocks=2, filters=3, embed_dim=4)
    seg = rng.random((2, 8))
    weights = np.linspace(0.5, 1.5, 8).reshape(2, 4)
    # Train-mode forwards fold batch statistics into the stores; pin the
    # stores so every finite-difference evaluation sees the same state.
    frozen = {k: v.copy() for k, v in ex.buffers.items()}

    def forward():
        for k, v in frozen.items():
            ex.buffers[k][...] = v
        return T.tsum(T.mul(ex.extract(seg, train=train), weights))

    def loss_fn():
        with Tape():
            return float(forward().data)

    with Tape():
        loss = forward()
    backward(loss)
    params = {k: p for k, p in ex.params.items() if p.grad is not None}
    assert params
    finite_difference_check(loss_fn, params, rng, n_coords=4)
