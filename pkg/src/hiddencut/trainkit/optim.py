"""Linear warmup/decay schedule and bias-corrected Adam."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import NumericError


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(math.ceil(warmup_ratio * total_steps - 1e-9))


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """0 -> peak over the warmup steps, then linearly back to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_ratio)
    if step < w:
        return peak_lr * step / w
    if total_steps == w:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - w)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              step_count: int | None = None) -> dict:
    """Update ``params`` in place and return it.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves parameters and moments exactly as they were.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    t = state.step + 1 if step_count is None else step_count
    if t < 1:
        raise ValueError("step_count must be >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            v = np.zeros_like(params[name])
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return params
