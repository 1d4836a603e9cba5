"""Training loop: clean pass, N augmented passes, weighted loss, Adam."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..cut import Batch, CutConfig, augmented_forward
from ..data import Example, Record, Vocab, build_vocab, tokenize
from ..encoder import ModelConfig, forward_logits, init_params
from ..errors import ConfigError, DataError, NumericError
from ..numerics import autodiff as ad
from ..objectives import cross_entropy_node, js_consistency_node
from ..strategies import GradCache, LimeTable, StrategyKind, lime_precompute
from .metrics import accuracy
from .optim import AdamState, adam_step, lr_at

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 2e-3
    warmup_ratio: float = 0.06
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    gamma: float = 1.0
    eta: float = 1.0
    init_std: float = 0.02
    lime_perturb: int = 200
    lime_epochs: int = 200
    cut: CutConfig = field(default_factory=lambda: CutConfig(enabled=False))

    def __post_init__(self):
        if isinstance(self.cut, Mapping):
            self.cut = CutConfig(**self.cut)
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.gamma < 0 or self.eta < 0:
            raise ConfigError("gamma and eta must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cut"] = self.cut.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def example_rng(seed: int, epoch: int, example_id: int, aug: int) -> np.random.Generator:
    """Per-example stream; independent of batching and order."""
    return np.random.default_rng([seed, epoch, int(example_id), aug])


def make_batch(examples: Sequence[Example]) -> Batch:
    L = max(len(ex) for ex in examples)
    ids = np.zeros((len(examples), L), dtype=np.int64)
    pad = np.zeros((len(examples), L), dtype=bool)
    for i, ex in enumerate(examples):
        ids[i, :len(ex)] = ex.ids
        pad[i, :len(ex)] = True
    return Batch(ids, pad, np.array([ex.label for ex in examples], dtype=np.int64),
                 np.array([ex.id for ex in examples], dtype=np.int64))


def predict(params: Mapping, model_cfg: ModelConfig, examples: Sequence[Example],
            batch_size: int = 64) -> np.ndarray:
    """Class probabilities for every example, in input order (no cuts)."""
    out = []
    for i in range(0, len(examples), batch_size):
        b = make_batch(examples[i:i + batch_size])
        logits, _ = forward_logits(params, b.ids, b.pad_mask, model_cfg)
        z = logits.value - logits.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=-1, keepdims=True))
    if not out:
        return np.zeros((0, model_cfg.num_classes))
    return np.concatenate(out)


def evaluate(params: Mapping, model_cfg: ModelConfig, examples: Sequence[Example],
             batch_size: int = 64) -> float:
    if not examples:
        return 0.0
    pred = np.argmax(predict(params, model_cfg, examples, batch_size), axis=-1)
    return accuracy(pred, [ex.label for ex in examples])


def batch_loss(params: Mapping, model_cfg: ModelConfig, batch: Batch, run: TrainConfig,
               epoch: int, grad_cache: GradCache | None = None,
               lime_table: LimeTable | None = None):
    """Mean over the batch of ``l_ori + gamma * l_aug + eta * l_js``.

    Returns the scalar loss node, the per-term batch means, the clean logits
    and the clean-pass layer records (their ``pre_cut`` nodes carry hidden
    gradients after backward).
    """
    logits, records = forward_logits(params, batch.ids, batch.pad_mask, model_cfg)
    l_ori = cross_entropy_node(logits, batch.labels)
    total = l_ori
    terms = {"l_ori": float(l_ori.value.mean()), "l_aug": 0.0, "l_js": 0.0}
    cut = run.cut
    if cut.active:
        aug_logits = []
        l_aug = None
        for a in range(cut.num_aug):
            rngs = [example_rng(run.seed, epoch, eid, a + 1) for eid in batch.example_ids]
            la, _ = augmented_forward(params, batch, cut, model_cfg, rngs, grad_cache, lime_table)
            ce = cross_entropy_node(la, batch.labels)
            l_aug = ce if l_aug is None else ad.add(l_aug, ce)
            aug_logits.append(la)
        l_js = js_consistency_node(logits, aug_logits)
        terms["l_aug"] = float(l_aug.value.mean())
        terms["l_js"] = float(l_js.value.mean())
        total = ad.add(total, ad.add(ad.scale(l_aug, run.gamma), ad.scale(l_js, run.eta)))
    return ad.mean_all(total), terms, logits, records


def prepare_data(splits: Mapping[str, Sequence[Record]], model_cfg: ModelConfig,
                 vocab: Vocab | None = None) -> tuple[Vocab, ModelConfig, dict[str, list[Example]]]:
    """Build the vocabulary from ``train`` and tokenize every split.

    The returned model config has ``vocab_size`` set to match.
    """
    if not splits.get("train"):
        raise DataError("training split is empty")
    vocab = vocab or build_vocab(r.text for r in splits["train"])
    cfg = ModelConfig(**{**model_cfg.to_dict(), "vocab_size": len(vocab)})
    examples = {name: tokenize(recs, vocab, cfg.max_len) for name, recs in splits.items()}
    for name, exs in examples.items():
        bad = [ex.label for ex in exs if not 0 <= ex.label < cfg.num_classes]
        if bad:
            raise DataError(f"{name}: label {bad[0]} outside [0, {cfg.num_classes})")
    return vocab, cfg, examples


def train(run: TrainConfig, model_cfg: ModelConfig, datasets: Mapping[str, Sequence[Example]],
          params: dict | None = None, metrics_path=None, lime_table: LimeTable | None = None
          ) -> tuple[dict, MetricsReport]:
    """Fine-tune on ``datasets['train']``; evaluate ``dev``/``ood`` after each epoch.

    When ``metrics_path`` is given it is truncated and one JSON line per epoch
    is appended as training proceeds.
    """
    train_set = list(datasets.get("train") or [])
    if not train_set:
        raise DataError("training split is empty")
    rng = np.random.default_rng([run.seed, 0xC0DE])
    if params is None:
        params = init_params(model_cfg, rng, run.init_std)
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    cut = run.cut
    grad_cache = None
    if cut.active and not cut.dropblock:
        if cut.strategy is StrategyKind.GRADIENT:
            grad_cache = GradCache(model_cfg.num_layers)
        elif cut.strategy is StrategyKind.LIME and lime_table is None:
            lime_table = lime_precompute(train_set, run.lime_epochs, run.lime_perturb,
                                         np.random.default_rng([run.seed, 0x11E]),
                                         model_cfg.vocab_size, model_cfg.num_classes)

    n = len(train_set)
    steps_per_epoch = (n + run.batch_size - 1) // run.batch_size
    total_steps = steps_per_epoch * run.epochs
    state = AdamState()
    report = MetricsReport()
    sink = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(metrics_path, "w", encoding="utf-8")
    try:
        step = 0
        for epoch in range(run.epochs):
            order = np.random.default_rng([run.seed, epoch, 0x5EED]).permutation(n)
            sums = {"l_ori": 0.0, "l_aug": 0.0, "l_js": 0.0}
            correct = 0
            for s in range(steps_per_epoch):
                batch = make_batch([train_set[i] for i in order[s * run.batch_size:(s + 1) * run.batch_size]])
                leaves = {k: ad.param(v, name=k) for k, v in params.items()}
                loss, terms, logits, records = batch_loss(leaves, model_cfg, batch, run, epoch,
                                                          grad_cache, lime_table)
                if not np.isfinite(loss.value):
                    diag = {"event": "abort", "epoch": epoch, "step": step, **terms}
                    report.records.append(diag)
                    if sink:
                        sink.write(json.dumps(diag, sort_keys=True) + "\n")
                    raise NumericError(f"non-finite loss at step {step}: {terms}")
                ad.backward(loss)
                grads = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                         for k, leaf in leaves.items()}
                if grad_cache is not None:
                    B = len(batch)
                    grad_cache.update(batch.example_ids,
                                      [rec.pre_cut.grad * B for rec in records], batch.pad_mask)
                step += 1
                adam_step(params, grads, state, lr_at(step, total_steps, run.peak_lr, run.warmup_ratio))
                for k in sums:
                    sums[k] += terms[k] * len(batch)
                correct += int(np.sum(np.argmax(logits.value, axis=-1) == batch.labels))
            rec = {"epoch": epoch + 1, "step": step,
                   **{k: v / n for k, v in sums.items()},
                   "train_acc": correct / n}
            for split in ("dev", "ood"):
                if datasets.get(split):
                    rec[f"{split}_acc"] = evaluate(params, model_cfg, datasets[split])
            report.records.append(rec)
            log.info("epoch %d: %s", epoch + 1, rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    last = report.records[-1]
    report.summary = {k: last[k] for k in ("train_acc", "dev_acc", "ood_acc") if k in last}
    return params, report
