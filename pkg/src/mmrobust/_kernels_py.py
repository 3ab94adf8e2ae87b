"""Pure-numpy row kernels. Same contract as the compiled ``_ckernels`` module.

All inputs are 2-D, C-contiguous float64 arrays laid out as ``(rows, n)``;
every kernel works along the last axis.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.70710678118654752440
_INV_SQRT2PI = 0.39894228040143267794

BACKEND = "python"


def masked_softmax_fwd(x, mask):
    """Return ``(probs, bad_row)``; ``bad_row`` is -1 unless some row is fully masked."""
    mask = mask.astype(bool, copy=False)
    alive = mask.any(axis=1)
    if not alive.all():
        return None, int(np.flatnonzero(~alive)[0])
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e[~mask] = 0.0
    return e / e.sum(axis=1, keepdims=True), -1


def masked_softmax_bwd(p, gout):
    dot = (p * gout).sum(axis=1, keepdims=True)
    return p * (gout - dot)


def layernorm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(gout, xhat, rstd, gain):
    n = xhat.shape[1]
    ggain = (gout * xhat).sum(axis=0)
    gbias = gout.sum(axis=0)
    gxhat = gout * gain
    gx = (gxhat - gxhat.mean(axis=1, keepdims=True)
          - xhat * (gxhat * xhat).sum(axis=1, keepdims=True) / n) * rstd[:, None]
    return gx, ggain, gbias


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, gout):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gout * (cdf + x * pdf)
