"""Augmented forward passes: score, pick a span, cut it, at every layer."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import ModelConfig, forward_logits
from .errors import ConfigError
from .numerics import autodiff as ad
from .spans import SpanMask, candidate_set, clamp_span, select_start, span_length, valid_length
from .strategies import (
    GradCache,
    LimeTable,
    StrategyKind,
    attention_scores_batch,
    gem_scores,
    make_dropblock_hook,
    random_scores,
)

MAX_NUM_AUG = 4


@dataclass
class CutConfig:
    alpha: float = 0.1
    beta: float = 0.4
    strategy: StrategyKind = StrategyKind.ATTENTION
    reverse: bool = False
    num_aug: int = 1
    enabled: bool = True
    dropblock: bool = False
    dim_fraction: float = 0.5

    def __post_init__(self):
        self.strategy = StrategyKind(self.strategy)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} must lie in (0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta={self.beta} must lie in (0, 1]")
        if not 1 <= self.num_aug <= MAX_NUM_AUG:
            raise ConfigError(f"num_aug={self.num_aug} must lie in [1, {MAX_NUM_AUG}]")
        if not 0.0 < self.dim_fraction <= 1.0:
            raise ConfigError(f"dim_fraction={self.dim_fraction} must lie in (0, 1]")

    @property
    def active(self) -> bool:
        return self.enabled

    @property
    def label(self) -> str:
        """Row name in the ablation tables, e.g. ``Attention-R``."""
        if self.dropblock:
            return "DropBlock"
        name = {"gem": "GEM", "lime": "LIME"}.get(self.strategy.value, self.strategy.value.title())
        return name + ("-R" if self.reverse else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d


@dataclass
class Batch:
    ids: np.ndarray          # (B, L)
    pad_mask: np.ndarray     # (B, L) bool
    labels: np.ndarray       # (B,)
    example_ids: np.ndarray  # (B,)

    def __len__(self):
        return self.ids.shape[0]


def _layer_scores(cfg: CutConfig, m: int, H, pad: np.ndarray, A: np.ndarray,
                  example_ids, grad_cache: GradCache | None, lime_table: LimeTable | None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``(B, L)`` for layer ``m`` and a per-example flag saying the
    strategy fell back to Random."""
    B, L = pad.shape
    fallback = np.zeros(B, dtype=bool)
    kind = cfg.strategy
    if kind is StrategyKind.ATTENTION:
        return attention_scores_batch(A, pad), fallback
    scores = np.zeros((B, L))
    for b in range(B):
        n = valid_length(pad[b])
        if kind is StrategyKind.RANDOM:
            fallback[b] = True
        elif kind is StrategyKind.GEM:
            scores[b] = gem_scores(H.value[b], pad[b]).values
        elif kind is StrategyKind.GRADIENT:
            table = grad_cache.get(example_ids[b])
            if table is None:
                fallback[b] = True
            else:
                scores[b, :table.shape[1]] = table[m]
        elif kind is StrategyKind.LIME:
            vals = lime_table[int(example_ids[b])]
            scores[b, :min(n, vals.size)] = vals[:n]
        if fallback[b]:
            scores[b] = random_scores(L, pad[b]).values
    return scores, fallback


def make_cut_hook(cfg: CutConfig, pad: np.ndarray, example_ids, rngs: Sequence[np.random.Generator],
                  grad_cache: GradCache | None = None, lime_table: LimeTable | None = None):
    """Hook for :func:`encode` that draws and applies one span per example per layer."""
    if cfg.strategy is StrategyKind.GRADIENT and grad_cache is None:
        raise ConfigError("the gradient strategy needs a GradCache")
    if cfg.strategy is StrategyKind.LIME and lime_table is None:
        raise ConfigError("the LIME strategy needs a precomputed table")
    lengths = [valid_length(row) for row in pad]

    def hook(m, H, pad_mask, A):
        B, L, _ = H.shape
        scores, fallback = _layer_scores(cfg, m, H, pad_mask, A, example_ids, grad_cache, lime_table)
        keep = np.ones((B, L), dtype=bool)
        next_mask = pad_mask.copy()
        spans = []
        for b in range(B):
            n = lengths[b]
            # Random (and its fallback) treats every eligible position as a candidate
            beta = 1.0 if fallback[b] else cfg.beta
            cands = candidate_set(scores[b], beta, pad_mask[b])
            reverse = cfg.reverse and not fallback[b]
            start = select_start(cands, scores[b], reverse, rngs[b], valid=pad_mask[b])
            span = clamp_span(SpanMask(m, start, span_length(n, cfg.alpha)), n)
            keep[b, span.start:span.stop] = False
            next_mask[b, span.start:span.stop] = False
            spans.append(span)
        return ad.where(keep[:, :, None], H), next_mask, spans

    return hook


def fixed_span_hook(spans: Sequence[Sequence[SpanMask]]):
    """Hook that re-applies pre-drawn spans; ``spans[b][m]`` for example ``b``."""

    def hook(m, H, pad_mask, A):
        B, L, _ = H.shape
        keep = np.ones((B, L), dtype=bool)
        next_mask = pad_mask.copy()
        out = []
        for b in range(B):
            s = spans[b][m]
            keep[b, s.start:s.stop] = False
            next_mask[b, s.start:s.stop] = False
            out.append(s)
        return ad.where(keep[:, :, None], H), next_mask, out

    return hook


def augmented_forward(params: Mapping, batch: Batch, cfg: CutConfig, model_cfg: ModelConfig,
                      rngs: Sequence[np.random.Generator] | np.random.Generator,
                      grad_cache: GradCache | None = None, lime_table: LimeTable | None = None):
    """One augmented view of ``batch``.

    Returns the logits node and, per example, the list of spans cut at each
    layer. A disabled config runs the plain forward pass.
    """
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs] * len(batch)
    if not cfg.active:
        logits, _ = forward_logits(params, batch.ids, batch.pad_mask, model_cfg)
        return logits, [[] for _ in range(len(batch))]
    if cfg.dropblock:
        hook = make_dropblock_hook(batch.pad_mask, cfg.alpha, cfg.dim_fraction, rngs)
    else:
        hook = make_cut_hook(cfg, batch.pad_mask, batch.example_ids, rngs, grad_cache, lime_table)
    logits, records = forward_logits(params, batch.ids, batch.pad_mask, model_cfg, hook)
    spans = [[rec.spans[b] for rec in records] for b in range(len(batch))]
    return logits, spans
