import numpy as np
import pytest

from stdiag.model import ModelConfig


def finite_difference_check(loss_fn, params, rng, n_coords=10, h=1e-5, rtol=1e-4):
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must run a fresh forward pass (deterministic across calls)
    and return the scalar loss; ``params`` maps names to Tensors whose
    ``grad`` was already populated by one backward pass. Checks ``n_coords``
    random coordinates of each tensor with |analytic - numeric| <=
    rtol * max(1, |analytic|, |numeric|).
    """
    failures = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            up = loss_fn()
            flat[idx] = original - h
            down = loss_fn()
            flat[idx] = original
            numeric = (up - down) / (2.0 * h)
            analytic = grad[idx]
            tol = rtol * max(1.0, abs(analytic), abs(numeric))
            if abs(analytic - numeric) > tol:
                failures.append((name, int(idx), analytic, numeric))
    assert not failures, f"gradient mismatches: {failures[:5]}"


@pytest.fixture
def tiny_config():
    """S=3, N_w=4, w_l=8, M=8; two blocks so pooling keeps length >= 1."""
    return ModelConfig(
        sensors=3, segments=4, window=8, embed_dim=8,
        cnn_blocks=2, filters=4, ffn_dim=16, head_hidden=8,
        dropout=0.0, batch_size=4, max_epochs=3, seed=7,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
