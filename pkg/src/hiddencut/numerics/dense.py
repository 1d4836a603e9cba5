"""Validated array-level operations (no tape)."""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateMaskError, ShapeError
from . import kernels

LAYER_NORM_EPS = 1e-5


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = _as_f64(a), _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a.cols={a.shape[1]} != b.rows={b.shape[0]}")
    return a @ b


def softmax_rows(m, mask=None) -> np.ndarray:
    """Row softmax of ``m``; ``mask`` flags valid columns (1-D per column or
    full 2-D). Masked entries come out exactly 0.
    """
    m = _as_f64(m)
    if m.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {m.shape}")
    if mask is None:
        valid = np.ones(m.shape, dtype=bool)
    else:
        try:
            valid = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
        except ValueError as exc:
            raise ShapeError(f"mask shape {np.shape(mask)} incompatible with {m.shape}") from exc
    if not valid.any(axis=-1).all():
        raise DegenerateMaskError("every column of some row is masked")
    return kernels.active.masked_softmax_forward(m, valid)


def layer_norm(v, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    v, gain, bias = _as_f64(v), _as_f64(gain), _as_f64(bias)
    if not (v.shape[-1] == gain.shape[-1] == bias.shape[-1]) or gain.ndim != 1 or bias.ndim != 1:
        raise ShapeError(f"layer_norm length mismatch: {v.shape}, {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    y, _, _ = kernels.active.layer_norm_forward(np.atleast_2d(v), gain, bias, eps)
    return y.reshape(v.shape)


def gelu(x):
    """Tanh-approximation GELU; scalars in, scalars out."""
    arr = _as_f64(x)
    y, _ = kernels.active.gelu_forward(np.atleast_2d(arr))
    y = y.reshape(arr.shape)
    return float(y) if np.ndim(x) == 0 else y


def log_softmax_rows(v) -> np.ndarray:
    """Log-softmax over the last axis as ``(v - max) - log1p(sum of the rest)``.

    Neither the max nor the small terms are folded into one large sum, so a
    confident row like ``[10, -10]`` keeps full relative precision.
    """
    v = np.asarray(v, dtype=np.float64)
    top = v.argmax(axis=-1)[..., None]
    shifted = v - np.take_along_axis(v, top, axis=-1)
    e = np.exp(shifted)
    np.put_along_axis(e, top, 0.0, axis=-1)
    return shifted - np.log1p(e.sum(axis=-1, keepdims=True))
