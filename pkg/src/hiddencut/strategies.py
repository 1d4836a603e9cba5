"""Token-importance scores that decide where a span is cut, plus DropBlock."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, ParseError
from .numerics import autodiff as ad
from .spans import SpanMask, clamp_span, span_length, valid_length


class StrategyKind(str, enum.Enum):
    RANDOM = "random"
    ATTENTION = "attention"
    GRADIENT = "gradient"
    GEM = "gem"
    LIME = "lime"


@dataclass
class ImportanceScores:
    values: np.ndarray
    source: StrategyKind
    layer: int | None = None     # None: one table for the whole run (LIME)


def attention_scores(A, pad_mask, layer: int | None = None) -> ImportanceScores:
    """Head-averaged attention mass each token receives from the valid queries."""
    A = np.asarray(A, dtype=np.float64)
    pad = np.asarray(pad_mask, dtype=bool)
    a = A[:, pad, :].sum(axis=1).sum(axis=0) / A.shape[0]
    a = np.where(pad, a, 0.0)
    return ImportanceScores(a, StrategyKind.ATTENTION, layer)


def attention_scores_batch(A: np.ndarray, pad: np.ndarray) -> np.ndarray:
    """(B, P, L, L) attention and (B, L) mask to (B, L) scores."""
    recv = np.einsum("bpkl,bk->bl", A, pad.astype(np.float64)) / A.shape[1]
    return np.where(pad, recv, 0.0)


class GradCache:
    """Per-example, per-layer, per-position mean absolute hidden gradients.

    Entries are written after every backward pass for the examples of that
    step, so an example's scores come from the last time it was trained on.
    """

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self._table: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self._table)

    def __contains__(self, example_id):
        return example_id in self._table

    def update(self, example_ids: Sequence[int], layer_grads: Sequence[np.ndarray],
               pad: np.ndarray) -> None:
        """Store ``mean_d |g[b, i, d]|`` for each layer's ``(B, L, D)`` gradient."""
        if len(layer_grads) != self.num_layers:
            raise ValueError("one gradient array per layer expected")
        per_layer = np.stack([np.abs(g).mean(axis=-1) for g in layer_grads], axis=1)
        for b, eid in enumerate(example_ids):
            n = valid_length(pad[b])
            self._table[int(eid)] = np.where(pad[b, :n], per_layer[b, :, :n], 0.0)

    def get(self, example_id: int) -> np.ndarray | None:
        return self._table.get(int(example_id))

    def set(self, example_id: int, scores: np.ndarray) -> None:
        self._table[int(example_id)] = np.asarray(scores, dtype=np.float64)


def gradient_scores(cache: GradCache, layer: int, example_id: int = 0) -> ImportanceScores:
    if not 0 <= layer < cache.num_layers:
        raise IndexError(f"layer {layer} outside [0, {cache.num_layers})")
    table = cache.get(example_id)
    if table is None:
        raise KeyError(f"no cached gradients for example {example_id}")
    return ImportanceScores(np.array(table[layer]), StrategyKind.GRADIENT, layer)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def gem_components(H, pad_mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Novelty, significance and uniqueness of every valid row of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    pad = np.asarray(pad_mask, dtype=bool)
    rows = np.flatnonzero(pad)
    n = rows.size
    if n < 2:
        raise DegenerateInputError("GEM needs at least two valid rows")
    X = H[rows]
    L = H.shape[0]
    others = np.stack([np.delete(X, i, axis=0) for i in range(n)])    # (n, n-1, D)
    coef = np.einsum("nd,nde->ne", X, np.linalg.pinv(others))
    resid = X - np.einsum("ne,ned->nd", coef, others)
    norms = np.linalg.norm(X, axis=1)
    novelty = np.linalg.norm(resid, axis=1) / np.maximum(norms, 1e-12)

    mean = X.mean(axis=0)
    significance = np.array([max(0.0, _cos(x, mean)) for x in X])

    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, X / safe[:, None], 0.0)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -np.inf)
    uniqueness = np.clip(1.0 - cos.max(axis=1), 0.0, 1.0)

    out = [np.zeros(L) for _ in range(3)]
    for arr, vals in zip(out, (novelty, significance, uniqueness)):
        arr[rows] = vals
    return out[0], out[1], out[2]


def gem_scores(H, pad_mask, layer: int | None = None) -> ImportanceScores:
    """Product of novelty, significance and uniqueness per token."""
    n, s, u = gem_components(H, pad_mask)
    return ImportanceScores(n * s * u, StrategyKind.GEM, layer)


def random_scores(L: int, pad_mask=None, rng: np.random.Generator | None = None
                  ) -> ImportanceScores:
    pad = np.ones(L, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    return ImportanceScores(np.where(pad, 1.0, 0.0), StrategyKind.RANDOM)


# -- LIME -------------------------------------------------------------------

class BowClassifier:
    """Softmax regression on bag-of-words counts, trained by full-batch GD."""

    def __init__(self, vocab_size: int, num_classes: int):
        self.W = np.zeros((vocab_size, num_classes))
        self.b = np.zeros(num_classes)

    def proba(self, counts: np.ndarray) -> np.ndarray:
        z = counts @ self.W + self.b
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def fit(self, counts: np.ndarray, labels: np.ndarray, epochs: int, lr: float = 0.5,
            l2: float = 1e-4) -> "BowClassifier":
        Y = np.eye(self.W.shape[1])[labels]
        n = counts.shape[0]
        for _ in range(epochs):
            g = (self.proba(counts) - Y) / n
            self.W -= lr * (counts.T @ g + l2 * self.W)
            self.b -= lr * g.sum(axis=0)
        return self

    def known(self, token_id: int) -> bool:
        return bool(np.any(self.W[token_id] != 0.0))


def bow_counts(seqs: Sequence[np.ndarray], vocab_size: int, word_slice=slice(1, -1)) -> np.ndarray:
    X = np.zeros((len(seqs), vocab_size))
    for i, ids in enumerate(seqs):
        np.add.at(X[i], np.asarray(ids)[word_slice], 1.0)
    return X


def lime_explain(ids, classifier: BowClassifier, num_perturb: int, rng: np.random.Generator
                 ) -> np.ndarray:
    """LIME weights for the word positions of one ``<s> ... </s>`` sequence.

    Returns one score per position of ``ids``; the boundary tokens and words
    the classifier never saw score 0.
    """
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.zeros(ids.size)
    words = ids[1:-1]
    n = words.size
    if n == 0:
        return scores
    V = classifier.W.shape[0]
    onehot = np.zeros((n, V))
    onehot[np.arange(n), words] = 1.0
    target = int(np.argmax(classifier.proba(onehot.sum(axis=0, keepdims=True))[0]))
    Z = (rng.random((num_perturb, n)) < 0.5).astype(np.float64)
    y = classifier.proba(Z @ onehot)[:, target]
    weight = np.exp(-(n - Z.sum(axis=1)) / n)
    design = np.hstack([np.ones((num_perturb, 1)), Z])
    sw = np.sqrt(weight)[:, None]
    coef, *_ = np.linalg.lstsq(design * sw, y * sw[:, 0], rcond=None)
    word_scores = np.abs(coef[1:])
    for j, tok in enumerate(words):
        if not classifier.known(int(tok)):
            word_scores[j] = 0.0
    scores[1:-1] = word_scores
    return scores


class LimeTable(dict):
    """example id -> per-position LIME scores; frozen once computed."""

    def scores(self, example_id: int) -> ImportanceScores:
        return ImportanceScores(self[int(example_id)], StrategyKind.LIME, None)

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("example_id\ttoken_index\tscore\n")
            for eid in sorted(self):
                for i, s in enumerate(self[eid]):
                    fh.write(f"{eid}\t{i}\t{float(s)!r}\n")

    @classmethod
    def read_tsv(cls, path) -> "LimeTable":
        rows: dict[int, dict[int, float]] = {}
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != "example_id\ttoken_index\tscore":
                raise ParseError(f"bad LIME table header {header!r}", 1)
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ParseError("expected 3 fields", lineno)
                try:
                    eid, idx, score = int(parts[0]), int(parts[1]), float(parts[2])
                except ValueError as exc:
                    raise ParseError(str(exc), lineno) from None
                rows.setdefault(eid, {})[idx] = score
        table = cls()
        for eid, d in rows.items():
            arr = np.zeros(max(d) + 1)
            for i, s in d.items():
                arr[i] = s
            table[eid] = arr
        return table


def lime_precompute(dataset: Sequence, surrogate_epochs: int = 200, num_perturb: int = 200,
                    rng: np.random.Generator | None = None, vocab_size: int | None = None,
                    num_classes: int | None = None) -> LimeTable:
    """Fit a bag-of-words classifier on ``dataset`` and explain every example.

    ``dataset`` holds tokenized examples with ``ids``, ``label`` and ``id``.
    """
    if num_perturb < 100:
        raise ConfigError(f"num_perturb must be >= 100, got {num_perturb}")
    rng = np.random.default_rng(0) if rng is None else rng
    seqs = [ex.ids for ex in dataset]
    labels = np.array([ex.label for ex in dataset], dtype=np.int64)
    V = vocab_size or int(max(int(np.max(s)) for s in seqs) + 1)
    C = num_classes or int(labels.max() + 1)
    clf = BowClassifier(V, C).fit(bow_counts(seqs, V), labels, surrogate_epochs)
    table = LimeTable()
    for ex in dataset:
        table[int(ex.id)] = lime_explain(ex.ids, clf, num_perturb, rng)
    return table


# -- DropBlock --------------------------------------------------------------

def dropblock_cells(L_valid: int, D: int, alpha: float, dim_fraction: float,
                    rng: np.random.Generator, layer: int = 0) -> tuple[SpanMask, np.ndarray]:
    """Random span of ``span_length(L_valid, alpha)`` rows and a random set of
    ``ceil(dim_fraction * D)`` columns to zero."""
    length = span_length(L_valid, alpha)
    start = int(rng.integers(1, L_valid))
    span = clamp_span(SpanMask(layer, start, length), L_valid)
    k = max(1, int(math.ceil(dim_fraction * D - 1e-9)))
    dims = np.sort(rng.choice(D, size=min(k, D), replace=False))
    return span, dims


def make_dropblock_hook(pad: np.ndarray, alpha: float, dim_fraction: float,
                        rngs: Sequence[np.random.Generator]):
    def hook(m, H, pad_mask, A):
        B, L, D = H.shape
        keep = np.ones((B, L, D), dtype=bool)
        spans = []
        for b in range(B):
            span, dims = dropblock_cells(valid_length(pad[b]), D, alpha, dim_fraction, rngs[b], m)
            keep[b, span.start:span.stop, dims] = False
            spans.append(span)
        return ad.where(keep, H), pad_mask, spans
    return hook


def dropblock_forward(params: Mapping, example, cfg, alpha: float, dim_fraction: float,
                      rng: np.random.Generator):
    """Logits with DropBlock applied after every layer; attention masks untouched.

    ``example`` is anything with ``ids`` (``(L,)`` or ``(B, L)``) and
    ``pad_mask``; ``rng`` may be a single generator or one per example.
    """
    from .encoder import forward_logits

    ids = np.atleast_2d(example.ids)
    pad = np.atleast_2d(example.pad_mask)
    rngs = rng if isinstance(rng, (list, tuple)) else [rng] * ids.shape[0]
    logits, records = forward_logits(params, ids, pad, cfg,
                                     make_dropblock_hook(pad, alpha, dim_fraction, rngs))
    return logits, records
