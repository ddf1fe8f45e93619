import numpy as np
import pytest

from styleforge.rng import SplitMix64


def finite_difference(loss_fn, array: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. an array it closes over.

    Mutates `array` in place entry by entry and restores it; loss_fn must
    rebuild its graph from the current array contents on every call.
    """
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def assert_grad_close(analytic, numeric, tol=1e-4):
    err = relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: relative error {err:.3e}"


def smooth_image(seed: int, h: int, w: int, channels: int = 3) -> np.ndarray:
    """Deterministic smooth test image in [0, 1], shape (c, h, w) float32."""
    from styleforge.flow import _smooth_noise

    return _smooth_noise(SplitMix64(seed), channels, h, w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
