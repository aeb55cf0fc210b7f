"""Pure-numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Inputs are C-contiguous float64 arrays; callers reshape to 2-D where noted.
"""

import numpy as np

BACKEND = "python"

GELU_K = 0.7978845608
GELU_C = 0.044715


def gelu_fwd(x):
    inner = GELU_K * (x + GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    x2 = x * x
    t = np.tanh(GELU_K * (x + GELU_C * x2 * x))
    dinner = GELU_K * (1.0 + 3.0 * GELU_C * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layernorm_fwd(x, gamma, beta, eps):
    """Row-wise LayerNorm of a 2-D array. Returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0].copy()


def layernorm_bwd(dy, xhat, rstd, gamma):
    """Returns (dx, dgamma, dbeta)."""
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def huber_fwd(r, beta):
    a = np.abs(r)
    per = np.where(a <= beta, 0.5 * r * r, beta * (a - 0.5 * beta))
    return float(per.sum() / r.size)


def huber_grad(r, beta):
    """Elementwise derivative of the per-element Huber term wrt r."""
    return np.clip(r, -beta, beta)


def window_counts(codes, centers, radius, n_codes):
    """Count codes in the (2r+1)^2 window around each center, center excluded.

    ``codes`` is an int8 grid with -1 meaning "no code". Returns an
    (n_centers, n_codes) int64 array.
    """
    rows, cols = codes.shape
    out = np.zeros((len(centers), n_codes), dtype=np.int64)
    padded = np.full((rows + 2 * radius, cols + 2 * radius), -1, dtype=np.int8)
    padded[radius:radius + rows, radius:radius + cols] = codes
    r0 = centers[:, 0]
    c0 = centers[:, 1]
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            vals = padded[r0 + dr + radius, c0 + dc + radius]
            for k in range(n_codes):
                out[:, k] += vals == k
    return out
