from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError
from .autodiff import Node, backward, param

LossFn = Callable[[Mapping[str, Node]], Node]


def grad_check(loss_fn: LossFn, params: Mapping[str, np.ndarray], eps: float = 1e-4,
               num_coords: int = 200, seed: int = 0, return_details: bool = False):
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` receives a mapping of parameter name to leaf :class:`Node`
    and must return a scalar node. ``num_coords`` coordinates are sampled
    uniformly without replacement across all parameters (every coordinate
    when there are fewer). The relative error of one coordinate is
    ``|g - fd| / max(|g|, |fd|, 1e-8)``; the maximum is returned.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-3]")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    leaves = {k: param(v, name=k) for k, v in work.items()}
    loss = loss_fn(leaves)
    if not np.isfinite(loss.value).all():
        raise NumericError("loss is not finite")
    backward(loss)
    analytic = {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
                for k, n in leaves.items()}

    def value() -> float:
        out = float(loss_fn({k: Node(v) for k, v in work.items()}).value)
        if not np.isfinite(out):
            raise NumericError("loss is not finite under perturbation")
        return out

    names = list(work)
    sizes = np.array([work[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= num_coords else np.sort(
        rng.choice(total, size=num_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    details = []
    for f in flat:
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(f - offsets[which]), work[name].shape)
        orig = work[name][idx]
        work[name][idx] = orig + eps
        up = value()
        work[name][idx] = orig - eps
        down = value()
        work[name][idx] = orig
        fd = (up - down) / (2.0 * eps)
        g = float(analytic[name][idx])
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        worst = max(worst, rel)
        details.append((name, idx, g, fd, rel))
    if return_details:
        return worst, details
    return worst
