import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import ssmgraph.tensor as tensor_mod  # noqa: E402


@pytest.fixture(autouse=True)
def finite_checks():
    """Every forward op must produce finite values during tests."""
    tensor_mod.CHECK_FINITE = True
    yield
    tensor_mod.CHECK_FINITE = False


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_direct(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """O(L^2) causal convolution: the independent oracle for the FFT path."""
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    length = signal.shape[-1]
    out = np.zeros_like(signal)
    for t in range(length):
        for s in range(t + 1):
            out[..., t] += kernel[..., s] * signal[..., t - s]
    return out
