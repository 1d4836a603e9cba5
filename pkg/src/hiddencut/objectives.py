"""Cross-entropy, KL and the consistency term, plus their weighted total.

Array functions take single examples; the ``*_node`` variants work on a
batch of logits on the tape and return one value per example.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError
from .numerics import autodiff as ad
from .numerics.autodiff import Node
from .numerics.dense import log_softmax_rows

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    l_ori: float
    l_aug: float
    l_js: float
    total: float


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return log_softmax_rows(z)


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise LabelError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: {p.shape} vs {q.shape}")
    q = np.maximum(q, PROB_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def js_consistency(p_ori, p_augs: Sequence) -> float:
    """Sum over augmented predictions of KL(p_aug || p_avg).

    ``p_avg`` averages the original and every augmented prediction.
    """
    if len(p_augs) == 0:
        raise ContractError("js_consistency needs at least one augmented prediction")
    p_ori = np.asarray(p_ori, dtype=np.float64)
    augs = [np.asarray(p, dtype=np.float64) for p in p_augs]
    if any(p.shape != p_ori.shape for p in augs):
        raise ShapeError("all distributions must share one support")
    # averaging deviations keeps p_avg == p_ori exactly when all views agree
    p_avg = p_ori + sum(p - p_ori for p in augs) / (len(augs) + 1)
    return sum(kl_divergence(p, p_avg) for p in augs)


def total_loss(l_ori: float, aug_losses: Sequence[float], l_js: float,
               gamma: float = 1.0, eta: float = 1.0) -> LossBreakdown:
    if gamma < 0 or eta < 0:
        raise ValueError("gamma and eta must be nonnegative")
    l_aug = float(sum(aug_losses))
    return LossBreakdown(float(l_ori), l_aug, float(l_js),
                         float(l_ori) + gamma * l_aug + eta * float(l_js))


# -- tape versions ----------------------------------------------------------

def cross_entropy_node(logits: Node, labels) -> Node:
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"label outside [0, {C})")
    return ad.scale(ad.pick(ad.log_softmax(logits), labels), -1.0)


def consistency_target(logits_ori, logits_augs) -> np.ndarray:
    """``p_avg`` over the original and augmented views, as a plain array."""
    vals = [getattr(x, "value", x) for x in (logits_ori, *logits_augs)]
    return sum(softmax(v) for v in vals) / len(vals)


def js_consistency_node(logits_ori: Node, logits_augs: Sequence[Node], target=None) -> Node:
    """Per-example consistency term; ``p_avg`` is a constant target.

    ``target`` overrides ``p_avg``. Finite-difference checks pass the value
    at the unperturbed parameters so both routes see the same frozen target.
    """
    if len(logits_augs) == 0:
        raise ContractError("js_consistency needs at least one augmented view")
    p_avg = consistency_target(logits_ori, logits_augs) if target is None else np.asarray(target)
    log_avg = np.log(np.maximum(p_avg, PROB_FLOOR))
    terms = []
    for la in logits_augs:
        logp = ad.log_softmax(la)
        terms.append(ad.sum_last(ad.mul(ad.exp(logp), ad.sub(logp, log_avg))))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out
