"""Positional encodings and the Fourier toolkit used to analyze them.

Two encodings are provided for integer sequence positions:

* the classic sinusoidal ("vanilla") encoding built from a geometric
  frequency ladder ``w_k = rho**(-k/d)``, and
* the orthonormal DFT-coefficient ("faithful") encoding, whose vectors on
  the lattice ``tau = 0..d-1`` form an orthonormal set, so the one-hot
  position function can be recovered exactly by an inverse transform.

The analysis half estimates how each encoding distributes its mass over the
real Fourier frequencies ``omega_k = 2*pi*k/d`` (kernel density estimate for
the vanilla ladder, a closed form for the faithful one), counts how many
vanilla frequencies collapse into the lowest frequency bin, and reconstructs
reference one-hot signals through frequency-weighted DFT filtering to make
the low-pass distortion measurable.

All DFT work is done with the explicit O(d^2) orthonormal basis; d <= 512
keeps that comfortably fast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError, DimensionError


class EncodingKind(str, Enum):
    VANILLA = "vanilla"
    FAITHFUL = "faithful"


@dataclass(frozen=True)
class EncodingSpec:
    """Dimensionality and flavor of a positional encoding.

    ``d`` must be even; the faithful encoding additionally needs
    ``d >= 4`` so that at least one interior cos/sin pair exists.
    """

    d: int
    kind: EncodingKind = EncodingKind.FAITHFUL
    rho: float = 10000.0

    def __post_init__(self):
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"encoding dimension must be a positive even integer, got {self.d}")
        if self.kind == EncodingKind.FAITHFUL and self.d < 4:
            raise ConfigError(f"faithful encoding needs d >= 4, got {self.d}")
        if self.rho <= 1.0:
            raise ConfigError(f"vanilla base rho must exceed 1, got {self.rho}")

    @property
    def interior_pairs(self) -> int:
        """Number of interior cos/sin frequency pairs (d/2 - 1)."""
        return self.d // 2 - 1


@dataclass
class FrequencyDistribution:
    """Normalized weights over the frequency grid omega_k = 2*pi*k/d, k=0..d/2."""

    d: int
    omegas: np.ndarray
    weights: np.ndarray
    bandwidth: float | None = None

    def __post_init__(self):
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-12:
            raise ContractError(f"frequency weights must sum to 1, got {total}")
        if (self.weights < 0).any():
            raise ContractError("frequency weights must be nonnegative")


@dataclass
class GramReport:
    """Deviation of an encoding's Gram matrix from the identity."""

    kind: str
    d: int
    max_abs_deviation: float
    max_off_diagonal: float
    max_diagonal_deviation: float


def encode_vanilla(tau: int, spec: EncodingSpec) -> np.ndarray:
    """Sinusoidal encoding (sin(w_0 t), cos(w_0 t), sin(w_2 t), cos(w_2 t), ...).

    Uses the even-index ladder w_l = rho**(-l/d) for l = 0, 2, ..., d-2,
    one sin/cos pair per frequency.
    """
    if spec.kind != EncodingKind.VANILLA:
        raise ContractError(f"encode_vanilla requires a vanilla spec, got {spec.kind.value}")
    if tau < 0:
        raise ContractError(f"position must be nonnegative, got {tau}")
    freqs = vanilla_frequencies(spec)
    angles = freqs * float(tau)
    out = np.empty(spec.d)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def vanilla_frequencies(spec: EncodingSpec) -> np.ndarray:
    """The d/2 ladder frequencies rho**(-l/d) for l = 0, 2, ..., d-2."""
    ladder = np.arange(0, spec.d, 2, dtype=np.float64)
    return spec.rho ** (-ladder / spec.d)


def encode_faithful(tau: int, spec: EncodingSpec) -> np.ndarray:
    """DFT-coefficient encoding of the one-hot position function at ``tau``.

    Returns sqrt(2/d) * (1/sqrt2, cos(w_1 t), sin(w_1 t), ...,
    cos(w_K t), sin(w_K t), cos(pi*t)/sqrt2) with w_k = 2*pi*k/d and
    K = d/2 - 1. Every vector has unit norm and distinct integer lattice
    positions are exactly orthogonal.
    """
    if spec.kind != EncodingKind.FAITHFUL:
        raise ContractError(f"encode_faithful requires a faithful spec, got {spec.kind.value}")
    if not 0 <= tau < spec.d:
        raise ConfigError(
            f"faithful encoding positions must lie on the lattice [0, {spec.d}), got {tau}"
        )
    d = spec.d
    k = np.arange(1, spec.interior_pairs + 1)
    angles = 2.0 * np.pi * k * tau / d
    root = math.sqrt(2.0 / d)
    out = np.empty(d)
    out[0] = root / math.sqrt(2.0)
    out[1:d - 1:2] = root * np.cos(angles)
    out[2:d - 1:2] = root * np.sin(angles)
    out[d - 1] = root * math.cos(math.pi * tau) / math.sqrt(2.0)
    return out


def encoding_matrix(spec: EncodingSpec, n_positions: int | None = None) -> np.ndarray:
    """Stack encodings for positions 0..n-1 as rows (defaults to n = d)."""
    n = spec.d if n_positions is None else n_positions
    encode = encode_faithful if spec.kind == EncodingKind.FAITHFUL else encode_vanilla
    return np.stack([encode(tau, spec) for tau in range(n)])


def gram_report(spec: EncodingSpec) -> GramReport:
    """Pairwise inner products of all d lattice encodings, compared to identity."""
    e = encoding_matrix(spec)
    gram = e @ e.T
    dev = gram - np.eye(spec.d)
    off = dev - np.diag(np.diag(dev))
    return GramReport(
        kind=spec.kind.value,
        d=spec.d,
        max_abs_deviation=float(np.abs(dev).max()),
        max_off_diagonal=float(np.abs(off).max()),
        max_diagonal_deviation=float(np.abs(np.diag(dev)).max()),
    )


def verify_faithfulness(spec: EncodingSpec) -> GramReport:
    """Executable orthonormality check for the faithful encoding."""
    if spec.kind != EncodingKind.FAITHFUL:
        raise ContractError("verify_faithfulness requires a faithful spec")
    return gram_report(spec)


def frequency_distribution(spec: EncodingSpec, sigma: float) -> FrequencyDistribution:
    """Gaussian-kernel density of the vanilla ladder over the omega grid.

    g_k is the normalized sum of exp(-(omega_k - w_l)^2 / (2 sigma^2)) over
    the ladder frequencies w_l, evaluated at each grid point omega_k.
    """
    if spec.kind != EncodingKind.VANILLA:
        raise ContractError("frequency_distribution applies to the vanilla encoding")
    if sigma <= 0:
        raise ContractError(f"bandwidth must be positive, got {sigma}")
    omegas = frequency_grid(spec.d)
    ladder = vanilla_frequencies(spec)
    diffs = omegas[:, None] - ladder[None, :]
    weights = np.exp(-(diffs ** 2) / (2.0 * sigma * sigma)).sum(axis=1)
    weights /= weights.sum()
    return FrequencyDistribution(d=spec.d, omegas=omegas, weights=weights, bandwidth=sigma)


def default_bandwidth(d: int, multiplier: float = 4.0) -> float:
    """Kernel bandwidth sigma = multiplier * 2*pi/d."""
    return multiplier * 2.0 * np.pi / d


def faithful_distribution(spec: EncodingSpec) -> FrequencyDistribution:
    """Frequency mass of the faithful encoding: flat except the two terminals.

    The terminal bins (k = 0 and the Nyquist bin) hold a single basis
    function and carry weight 1/d each; every interior bin holds a cos/sin
    pair and carries 2/d.
    """
    d = spec.d
    weights = np.full(d // 2 + 1, 2.0 / d)
    weights[0] = 1.0 / d
    weights[-1] = 1.0 / d
    return FrequencyDistribution(d=d, omegas=frequency_grid(d), weights=weights)


def frequency_grid(d: int) -> np.ndarray:
    """omega_k = 2*pi*k/d for k = 0..d/2 (inclusive Nyquist)."""
    return 2.0 * np.pi * np.arange(d // 2 + 1) / d


def lowpass_bin_count(d: int, rho: float = 10000.0) -> int:
    """How many ladder frequencies fall below the first nonzero grid frequency.

    Solves rho**(-l/d) = 2*pi/d for l and rounds to the nearest integer;
    for rho = 10^4 this is (d/4) * log10(d / (2*pi)).
    """
    if d < 2:
        raise ConfigError(f"lowpass_bin_count needs d >= 2, got {d}")
    if rho <= 1.0:
        raise ConfigError(f"rho must exceed 1, got {rho}")
    l = d * math.log(d / (2.0 * math.pi)) / math.log(rho)
    return int(math.floor(l + 0.5))


# ---------------------------------------------------------------------------
# Real DFT on the d-point lattice
# ---------------------------------------------------------------------------

def dft_basis(d: int) -> np.ndarray:
    """Orthonormal real Fourier basis as rows of a d x d matrix.

    Row layout matches the faithful encoding: constant, interleaved
    cos/sin pairs for k = 1..d/2-1, then the Nyquist alternating row.
    Column ``tau`` of this matrix equals ``encode_faithful(tau)``.
    """
    if d < 2 or d % 2 != 0:
        raise ConfigError(f"DFT lattice size must be even, got {d}")
    t = np.arange(d)
    basis = np.empty((d, d))
    basis[0] = 1.0 / math.sqrt(d)
    root = math.sqrt(2.0 / d)
    for k in range(1, d // 2):
        angles = 2.0 * np.pi * k * t / d
        basis[2 * k - 1] = root * np.cos(angles)
        basis[2 * k] = root * np.sin(angles)
    basis[d - 1] = np.cos(np.pi * t) / math.sqrt(d)
    return basis


def dft_coefficients(f: np.ndarray) -> np.ndarray:
    """Coefficients of ``f`` against the orthonormal real Fourier basis."""
    f = np.asarray(f, dtype=np.float64)
    return dft_basis(f.shape[0]) @ f


def inverse_dft(coefficients: np.ndarray) -> np.ndarray:
    """Signal-domain reconstruction from real Fourier coefficients."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    return dft_basis(coefficients.shape[0]).T @ coefficients


def dft_roundtrip(f: np.ndarray) -> np.ndarray:
    """Forward then inverse transform; equals ``f`` up to rounding."""
    return inverse_dft(dft_coefficients(f))


def _per_coefficient_multipliers(dist: FrequencyDistribution) -> np.ndarray:
    """Spread per-bin weights over the coefficients each bin contains.

    Terminal bins hold one coefficient, interior bins a cos/sin pair, so the
    flat faithful distribution scales every coefficient equally and the
    subsequent norm restoration makes it the exact identity.
    """
    d = dist.d
    mult = np.empty(d)
    mult[0] = dist.weights[0]
    interior = dist.weights[1:-1] / 2.0
    mult[1:d - 1:2] = interior
    mult[2:d - 1:2] = interior
    mult[d - 1] = dist.weights[-1]
    return mult


def reconstruct_reference(f: np.ndarray, dist: FrequencyDistribution) -> np.ndarray:
    """Filter ``f`` through frequency weights and transform back.

    The DFT coefficients of ``f`` are scaled by the per-coefficient share of
    the bin weights, rescaled so the coefficient vector keeps its original
    l2 norm, and inverse-transformed. A sharply low-passed weighting smears
    one-hot inputs into broad humps; the flat weighting reproduces any input
    exactly.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != dist.d:
        raise DimensionError(
            f"signal length {f.shape} does not match the d={dist.d} frequency grid"
        )
    coeffs = dft_coefficients(f)
    original_norm = float(np.linalg.norm(coeffs))
    filtered = coeffs * _per_coefficient_multipliers(dist)
    filtered_norm = float(np.linalg.norm(filtered))
    if filtered_norm > 0.0:
        filtered *= original_norm / filtered_norm
    return inverse_dft(filtered)
