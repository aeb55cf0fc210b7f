import numpy as np
import pytest

from morphoformer import _kernels_py, kernels

BACKENDS = [_kernels_py]
if kernels.compiled_available():
    from morphoformer import _kernels
    BACKENDS.append(_kernels)


@pytest.fixture(params=BACKENDS, ids=lambda m: m.BACKEND)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error over entries whose magnitude exceeds ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    big = scale > floor
    if not big.any():
        return 0.0
    return float(np.max(np.abs(a - b)[big] / scale[big]))
