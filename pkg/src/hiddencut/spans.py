"""Span arithmetic: length, candidate set, start sampling and the cut itself."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError

_TOL = 1e-9


@dataclass(frozen=True)
class SpanMask:
    layer: int
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def valid_length(mask) -> int:
    """Index one past the last valid position (padding is always a suffix)."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    return int(idx[-1]) + 1 if idx.size else 0


def span_length(L_valid: int, alpha: float) -> int:
    """``round(alpha * L_valid)`` half-up, kept within ``[1, L_valid - 1]``."""
    if L_valid < 2:
        raise DegenerateInputError(f"need at least 2 valid positions, got {L_valid}")
    n = int(math.floor(alpha * L_valid + 0.5 + _TOL))
    return min(max(1, n), L_valid - 1)


def candidate_count(L_valid: int, beta: float) -> int:
    return max(1, int(math.ceil(beta * L_valid - _TOL)))


def candidate_set(scores, beta: float, valid) -> np.ndarray:
    """Top ``ceil(beta * L_valid)`` eligible positions by score, ascending.

    Position 0 and padding are never eligible. Ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    eligible = np.flatnonzero(valid)
    eligible = eligible[eligible > 0]
    if eligible.size == 0:
        raise DegenerateInputError("no valid position besides position 0")
    k = min(candidate_count(int(valid.sum()), beta), eligible.size)
    order = np.lexsort((eligible, -scores[eligible]))
    return np.sort(eligible[order[:k]])


def select_start(candidates, scores, reverse: bool, rng: np.random.Generator,
                 valid=None) -> int:
    """Sample a span start.

    Forward mode draws from ``candidates`` proportionally to their scores
    (uniformly when those are all zero). Reverse mode draws uniformly from
    the eligible positions outside ``candidates``, falling back to forward
    mode when that complement is empty.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise DegenerateInputError("empty candidate set")
    if reverse:
        if valid is None:
            raise ContractError("reverse sampling needs the validity mask")
        eligible = np.flatnonzero(np.asarray(valid, dtype=bool))
        eligible = eligible[eligible > 0]
        outside = np.setdiff1d(eligible, candidates)
        if outside.size:
            return int(outside[rng.integers(outside.size)])
    w = np.maximum(np.asarray(scores, dtype=np.float64)[candidates], 0.0)
    total = w.sum()
    if candidates.size == 1:
        return int(candidates[0])
    if not total > 0:
        return int(candidates[rng.integers(candidates.size)])
    cdf = np.cumsum(w) / total
    i = int(np.searchsorted(cdf, rng.random(), side="right"))
    return int(candidates[min(i, candidates.size - 1)])


def clamp_span(span: SpanMask, L_valid: int) -> SpanMask:
    if span.start < 1:
        raise ContractError("spans may not touch position 0")
    if span.start >= L_valid:
        raise ContractError(f"span start {span.start} outside valid region [1, {L_valid})")
    return SpanMask(span.layer, span.start, min(span.length, L_valid - span.start))


def apply_cut(H, attn_mask, span: SpanMask,
              L_valid: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Zero rows ``[start, start+length)`` of ``H`` and drop them from the mask.

    The span is clipped at the end of the valid region, which defaults to
    the extent of ``attn_mask``. Every other row is returned bit-identical.
    """
    H = np.array(H, dtype=np.float64, copy=True)
    mask = np.array(attn_mask, dtype=bool, copy=True)
    if H.shape[0] != mask.shape[0]:
        raise ContractError(f"hidden has {H.shape[0]} rows, mask has {mask.shape[0]}")
    span = clamp_span(span, valid_length(mask) if L_valid is None else L_valid)
    H[span.start:span.stop] = 0.0
    mask[span.start:span.stop] = False
    return H, mask
