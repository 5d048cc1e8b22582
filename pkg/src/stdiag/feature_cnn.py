"""Per-sensor 1D convolutional feature extraction.

Each sensor owns an independent head: a stack of blocks, each
[same-padding conv -> max pool -> ReLU -> batch norm], whose flattened
output is linearly projected to the embedding width M. Sensor heads never
mix information, so perturbing one sensor's raw segment cannot change
another sensor's embedding row.

Batch normalization is computed per channel over (batch x time); train-mode
forward passes update the running statistics (momentum 0.1) that
evaluation-mode passes consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor, parameter

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class CnnConfig:
    num_blocks: int = 4
    kernel_size: int = 5
    filters: int = 32
    pool_size: int = 2
    pool_stride: int = 2
    embed_dim: int = 240

    def validate(self, window: int) -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"need at least one conv block, got {self.num_blocks}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.filters < 1:
            raise ConfigError(f"filters must be positive, got {self.filters}")
        if self.pool_size < 1 or self.pool_stride < 1:
            raise ConfigError("pool size and stride must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2 != 0:
            raise ConfigError(f"embedding width must be a positive even integer, got {self.embed_dim}")
        self.pooled_length(window)

    def pooled_length(self, window: int) -> int:
        """Time length remaining after all pooling stages; must stay >= 1."""
        length = window
        for _ in range(self.num_blocks):
            length = (length - self.pool_size) // self.pool_stride + 1
            if length < 1:
                raise ConfigError(
                    f"pooling collapses window {window} to zero length after "
                    f"{self.num_blocks} blocks"
                )
        return length


class FeatureExtractor:
    """Maps raw segments (S, w_l) to embedding rows (S, M)."""

    def __init__(self, sensors: int, window: int, config: CnnConfig,
                 rng: np.random.Generator):
        config.validate(window)
        self.sensors = sensors
        self.window = window
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        flat_dim = config.filters * config.pooled_length(window)
        for s in range(sensors):
            in_ch = 1
            for b in range(config.num_blocks):
                fan_in = in_ch * config.kernel_size
                bound = np.sqrt(1.0 / fan_in)
                key = f"cnn.s{s}.b{b}"
                self.params[f"{key}.w"] = parameter(
                    rng.uniform(-bound, bound, size=(config.filters, in_ch, config.kernel_size)),
                    name=f"{key}.w",
                )
                self.params[f"{key}.bias"] = parameter(
                    np.zeros(config.filters), name=f"{key}.bias")
                self.params[f"{key}.bn_gain"] = parameter(
                    np.ones((config.filters, 1)), name=f"{key}.bn_gain")
                self.params[f"{key}.bn_bias"] = parameter(
                    np.zeros((config.filters, 1)), name=f"{key}.bn_bias")
                self.buffers[f"{key}.bn_mean"] = np.zeros((config.filters, 1))
                self.buffers[f"{key}.bn_var"] = np.ones((config.filters, 1))
                in_ch = config.filters
            bound = np.sqrt(1.0 / flat_dim)
            self.params[f"cnn.s{s}.proj_w"] = parameter(
                rng.uniform(-bound, bound, size=(flat_dim, config.embed_dim)),
                name=f"cnn.s{s}.proj_w",
            )
            self.params[f"cnn.s{s}.proj_b"] = parameter(
                np.zeros(config.embed_dim), name=f"cnn.s{s}.proj_b")

    def extract(self, segment: np.ndarray, train: bool = False) -> Tensor:
        """One segment (S, w_l) -> (S, M). Train mode uses batch-of-one statistics."""
        segment = np.asarray(segment, dtype=np.float64)
        if segment.shape != (self.sensors, self.window):
            raise DimensionError(
                f"expected segment shape {(self.sensors, self.window)}, got {segment.shape}"
            )
        out = self.extract_batch(segment[None, :, :], train=train)
        return T.reshape(out, (self.sensors, self.config.embed_dim))

    def extract_batch(self, segments: np.ndarray, train: bool = False) -> Tensor:
        """A batch (B, S, w_l) -> (B, S, M); sensors processed independently."""
        segments = np.asarray(segments, dtype=np.float64)
        if segments.ndim != 3 or segments.shape[1] != self.sensors \
                or segments.shape[2] != self.window:
            raise DimensionError(
                f"expected (B, {self.sensors}, {self.window}), got {segments.shape}"
            )
        if not np.isfinite(segments).all():
            raise ConfigError("segments contain non-finite values")
        batch = segments.shape[0]
        cfg = self.config
        per_sensor = []
        for s in range(self.sensors):
            x = Tensor(np.ascontiguousarray(segments[:, s, :]).reshape(batch, 1, self.window))
            for b in range(cfg.num_blocks):
                x = self._block(x, s, b, train)
            flat = T.reshape(x, (batch, x.shape[1] * x.shape[2]))
            proj = T.add(T.matmul(flat, self.params[f"cnn.s{s}.proj_w"]),
                         self.params[f"cnn.s{s}.proj_b"])
            per_sensor.append(proj)
        return T.stack(per_sensor, axis=1)

    def _block(self, x: Tensor, sensor: int, block: int, train: bool) -> Tensor:
        activated = self._pre_norm(x, sensor, block)
        return self._batch_norm(activated, f"cnn.s{sensor}.b{block}", train)

    def _pre_norm(self, x: Tensor, sensor: int, block: int) -> Tensor:
        """Conv, pool and ReLU of one block, before normalization."""
        cfg = self.config
        key = f"cnn.s{sensor}.b{block}"
        w = self.params[f"{key}.w"]
        out_ch, in_ch, kernel = w.shape
        batch, _, time = x.shape
        cols = T.im2col1d(x, kernel, kernel // 2)  # (B, T, C*k)
        # One flat GEMM instead of a stack of per-sample ones.
        flat = T.reshape(cols, (batch * time, in_ch * kernel))
        w2d = T.reshape(w, (out_ch, in_ch * kernel))
        conv = T.add(T.matmul(flat, T.transpose(w2d, (1, 0))), self.params[f"{key}.bias"])
        conv = T.transpose(T.reshape(conv, (batch, time, out_ch)), (0, 2, 1))  # (B, F, T)
        pooled = T.maxpool1d(conv, cfg.pool_size, cfg.pool_stride)
        return T.relu(pooled)

    def recalibrate(self, segments: np.ndarray) -> None:
        """Replace running statistics with exact per-channel statistics.

        Walks the blocks in order, so each block's statistics are computed
        from inputs normalized by the already-recalibrated earlier blocks.
        Momentum-based running estimates lag the fast-moving weights during
        training; one exact pass over the training segments at epoch end
        removes that lag from evaluation-mode forwards.
        """
        segments = np.asarray(segments, dtype=np.float64)
        batch = segments.shape[0]
        for s in range(self.sensors):
            x = Tensor(np.ascontiguousarray(segments[:, s, :]).reshape(batch, 1, self.window))
            for b in range(self.config.num_blocks):
                key = f"cnn.s{s}.b{b}"
                activated = self._pre_norm(x, s, b)
                self.buffers[f"{key}.bn_mean"][...] = \
                    activated.data.mean(axis=(0, 2)).reshape(-1, 1)
                self.buffers[f"{key}.bn_var"][...] = \
                    activated.data.var(axis=(0, 2)).reshape(-1, 1)
                x = self._batch_norm(activated, key, train=False)

    def _batch_norm(self, x: Tensor, key: str, train: bool) -> Tensor:
        """Per-channel normalization over (batch x time).

        Train mode normalizes with the current batch statistics (gradients
        flow through them) and folds those statistics into the stores with
        momentum 0.1; eval mode normalizes with the stored statistics. The
        training loop additionally refreshes the stores with exact dataset
        statistics between epochs (see ``recalibrate``).
        """
        gain = self.params[f"{key}.bn_gain"]
        bias = self.params[f"{key}.bn_bias"]
        if train:
            mu = T.tmean(x, axis=(0, 2), keepdims=True)
            var = T.tmean(T.square(T.sub(x, mu)), axis=(0, 2), keepdims=True)
            self.buffers[f"{key}.bn_mean"] *= 1.0 - BN_MOMENTUM
            self.buffers[f"{key}.bn_mean"] += BN_MOMENTUM * mu.data.reshape(-1, 1)
            self.buffers[f"{key}.bn_var"] *= 1.0 - BN_MOMENTUM
            self.buffers[f"{key}.bn_var"] += BN_MOMENTUM * var.data.reshape(-1, 1)
            normalized = T.div(T.sub(x, mu), T.sqrt(T.add(var, BN_EPS)))
        else:
            mean = self.buffers[f"{key}.bn_mean"]
            std = np.sqrt(self.buffers[f"{key}.bn_var"] + BN_EPS)
            normalized = T.div(T.sub(x, mean), std)
        return T.add(T.mul(normalized, gain), bias)
