"""Factorized spatio-temporal dependency layer.

Dependencies across a (segment, sensor) grid of embeddings are modeled by
two families of row-stochastic transition matrices: temporal attention
``A[s]`` (segment-to-segment, one matrix per sensor) and spatial attention
``B[t]`` (sensor-to-sensor, one matrix per segment). Scores are scaled dot
products of learned query/key projections, which is exactly the exponential
of a quadratic form in the embeddings followed by normalization; the two
views are checked against each other in the test suite.

Enriched temporal and spatial branches are fused by residual layer
normalization and a two-layer ReLU feed-forward block. The attention
matrices are exposed for diagnostics; the optional masks argument zeroes
selected post-softmax entries (no renormalization), which implements the
attention-trustworthiness ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, parameter


@dataclass
class AttentionMaps:
    """Temporal stack (S, N_w, N_w) and spatial stack (N_w, S, S) for one episode."""

    temporal: np.ndarray
    spatial: np.ndarray

    def validate_stochastic(self, tol: float = 1e-10) -> None:
        for name, stack in (("temporal", self.temporal), ("spatial", self.spatial)):
            sums = stack.sum(axis=-1)
            err = float(np.abs(sums - 1.0).max())
            if err > tol:
                raise ContractError(f"{name} attention rows deviate from 1 by {err}")
            if (stack < 0).any():
                raise ContractError(f"{name} attention has negative entries")


@dataclass
class AttentionMasks:
    """Binary keep-masks applied to post-softmax attention entries."""

    temporal: np.ndarray  # (S, N_w, N_w)
    spatial: np.ndarray   # (N_w, S, S)


@dataclass(frozen=True)
class StLayerConfig:
    embed_dim: int
    ffn_dim: int = 2048
    heads: int = 1
    dropout: float = 0.1
    mode: str = "factorized"  # or "shared": one attention matrix per axis

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ConfigError(f"embedding width too small: {self.embed_dim}")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"head count {self.heads} must divide embedding width {self.embed_dim}"
            )
        if self.ffn_dim < 1:
            raise ConfigError(f"feed-forward width must be positive, got {self.ffn_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.mode not in ("factorized", "shared"):
            raise ConfigError(f"unknown attention mode {self.mode!r}")


class StLayer:
    """One spatio-temporal attention layer with residual fusion and FFN."""

    def __init__(self, config: StLayerConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        m, ffn = config.embed_dim, config.ffn_dim
        bound_m = np.sqrt(1.0 / m)
        bound_f = np.sqrt(1.0 / ffn)
        self.params: dict[str, Tensor] = {}

        def mat(name, rows, cols, bound):
            self.params[name] = parameter(
                rng.uniform(-bound, bound, size=(rows, cols)), name=name)

        for branch in ("t", "s"):
            for role in ("wq", "wk", "wv"):
                mat(f"st.{branch}_{role}", m, m, bound_m)
        self.params["st.ln_attn_gain"] = parameter(np.ones(m), name="st.ln_attn_gain")
        self.params["st.ln_attn_bias"] = parameter(np.zeros(m), name="st.ln_attn_bias")
        self.params["st.ln_ffn_gain"] = parameter(np.ones(m), name="st.ln_ffn_gain")
        self.params["st.ln_ffn_bias"] = parameter(np.zeros(m), name="st.ln_ffn_bias")
        mat("st.ffn_w1", m, ffn, bound_m)
        self.params["st.ffn_b1"] = parameter(np.zeros(ffn), name="st.ffn_b1")
        mat("st.ffn_w2", ffn, m, bound_f)
        self.params["st.ffn_b2"] = parameter(np.zeros(m), name="st.ffn_b2")

    # -- attention ---------------------------------------------------------

    def _heads_split(self, x: Tensor) -> Tensor:
        b, n, m = x.shape
        h = self.config.heads
        return T.transpose(T.reshape(x, (b, n, h, m // h)), (0, 2, 1, 3))

    def _heads_merge(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))

    @staticmethod
    def _project(x: Tensor, w: Tensor) -> Tensor:
        b, n, m = x.shape
        return T.reshape(T.matmul(T.reshape(x, (b * n, m)), w), (b, n, m))

    def _attend(self, score_src: Tensor, value_src: Tensor, wq, wk, wv,
                mask: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
        """Scaled dot-product attention over the middle axis of (B, n, M)."""
        q = self._heads_split(self._project(score_src, wq))
        k = self._heads_split(self._project(score_src, wk))
        v = self._heads_split(self._project(value_src, wv))
        dh = q.shape[-1]
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        attn = T.softmax_rows(scores, scale=1.0 / np.sqrt(dh))
        if mask is not None:
            attn = T.mul(attn, mask)
        out = self._heads_merge(T.matmul(attn, v))
        return out, attn.data.mean(axis=1)  # head-averaged map for diagnostics

    def temporal_attention(self, x: Tensor, masks: AttentionMasks | None = None
                           ) -> tuple[Tensor, np.ndarray]:
        """Per-sensor attention across segments.

        ``x`` is (B, N_w, S, M); returns the enriched branch of the same
        shape and the attention stack (B, S, N_w, N_w). Sensor slices are
        processed independently, so a perturbation at one sensor cannot
        affect another sensor's temporal attention.
        """
        _, _, n_sensors, _ = x.shape
        shared_src = T.tmean(x, axis=2) if self.config.mode == "shared" else None
        outs, maps = [], []
        for s in range(n_sensors):
            xs = T.take_index(x, s, axis=2)
            src = shared_src if shared_src is not None else xs
            mask = None if masks is None else masks.temporal[s]
            out, attn = self._attend(src, xs, self.params["st.t_wq"],
                                     self.params["st.t_wk"], self.params["st.t_wv"],
                                     mask)
            outs.append(out)
            maps.append(attn)
        return T.stack(outs, axis=2), np.stack(maps, axis=1)

    def spatial_attention(self, x: Tensor, masks: AttentionMasks | None = None
                          ) -> tuple[Tensor, np.ndarray]:
        """Per-segment attention across sensors; mirror image of the temporal branch.

        Returns the enriched branch (B, N_w, S, M) and the stack
        (B, N_w, S, S).
        """
        _, n_segments, _, _ = x.shape
        shared_src = T.tmean(x, axis=1) if self.config.mode == "shared" else None
        outs, maps = [], []
        for t in range(n_segments):
            xt = T.take_index(x, t, axis=1)
            src = shared_src if shared_src is not None else xt
            mask = None if masks is None else masks.spatial[t]
            out, attn = self._attend(src, xt, self.params["st.s_wq"],
                                     self.params["st.s_wk"], self.params["st.s_wv"],
                                     mask)
            outs.append(out)
            maps.append(attn)
        return T.stack(outs, axis=1), np.stack(maps, axis=1)

    # -- fusion ------------------------------------------------------------

    def fuse_and_ffn(self, x: Tensor, x_temporal: Tensor, x_spatial: Tensor,
                     train: bool, rng: np.random.Generator) -> Tensor:
        """Residual fusion of both branches, then the feed-forward block.

        The two branch terms share one layer-norm parameter set; the
        feed-forward residual has its own.
        """
        p = self.config.dropout
        g1, b1 = self.params["st.ln_attn_gain"], self.params["st.ln_attn_bias"]
        fused = T.add(
            T.layer_norm(T.add(x, T.dropout(x_temporal, p, rng, train)), g1, b1),
            T.layer_norm(T.add(x, T.dropout(x_spatial, p, rng, train)), g1, b1),
        )
        shape = fused.shape
        m = shape[-1]
        flat = T.reshape(fused, (int(np.prod(shape[:-1])), m))
        hidden = T.relu(T.add(T.matmul(flat, self.params["st.ffn_w1"]),
                              self.params["st.ffn_b1"]))
        ffn = T.add(T.matmul(hidden, self.params["st.ffn_w2"]), self.params["st.ffn_b2"])
        ffn = T.dropout(T.reshape(ffn, shape), p, rng, train)
        return T.layer_norm(T.add(fused, ffn),
                            self.params["st.ln_ffn_gain"], self.params["st.ln_ffn_bias"])

    def forward(self, x: Tensor, train: bool, rng: np.random.Generator,
                masks: AttentionMasks | None = None,
                ) -> tuple[Tensor, list[AttentionMaps]]:
        """Full layer for a batch (B, N_w, S, M); returns per-episode maps."""
        if x.ndim != 4:
            raise DimensionError(f"expected (B, N_w, S, M), got shape {x.shape}")
        x_temporal, a_stack = self.temporal_attention(x, masks)
        x_spatial, b_stack = self.spatial_attention(x, masks)
        out = self.fuse_and_ffn(x, x_temporal, x_spatial, train, rng)
        maps = [AttentionMaps(temporal=a_stack[i], spatial=b_stack[i])
                for i in range(x.shape[0])]
        return out, maps


def quadratic_form_equivalence(wq: np.ndarray, wk: np.ndarray,
                               rng: np.random.Generator, n_pairs: int = 100) -> float:
    """Max deviation between the quadratic-form and query-key score formulas.

    Compares x^T (Wq Wk^T) x' / sqrt(M) against (x Wq) . (x' Wk) / sqrt(M)
    over random vector pairs; the two are algebraically identical.
    """
    m = wq.shape[0]
    h = wq @ wk.T
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(m)
        x2 = rng.standard_normal(m)
        quad = x @ h @ x2 / np.sqrt(m)
        qk = (x @ wq) @ (x2 @ wk) / np.sqrt(m)
        worst = max(worst, abs(quad - qk))
    return worst
