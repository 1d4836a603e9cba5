"""Pure-numpy reference kernels.

Every function works on the last axis of a C-contiguous float64 array and
mirrors the compiled routines in ``_ckernels.pyx`` one for one.
"""
import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
MASK_FILL = -1e30


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd


def layer_norm_backward(gy, xhat, rstd, gain):
    lead = tuple(range(gy.ndim - 1))
    ggain = (gy * xhat).sum(axis=lead)
    gbias = gy.sum(axis=lead)
    gxhat = gy * gain
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = rstd * (gxhat - m1 - xhat * m2)
    return gx, ggain, gbias


def masked_softmax_forward(x, valid):
    z = np.where(valid, x, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    e = np.where(valid, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_backward(gy, y):
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def gelu_forward(x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(gy, x, t):
    dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
