"""Run configuration files, the ablation grid driver and the paired OOD experiment."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..cut import CutConfig
from ..data import SpuriousSpec, generate_spurious_benchmark, load_splits
from ..encoder import ModelConfig
from ..errors import ConfigError
from ..strategies import StrategyKind
from .gradcheck import GradCheckSetup
from .train import TrainConfig, prepare_data, train

SECTIONS = ("model", "train", "cut", "benchmark", "data", "out", "seeds", "grad_check")

ALPHA_GRID = (0.05, 0.1, 0.2, 0.3, 0.4)
BETA_GRID = (0.1, 0.2, 0.4, 0.6)
STRATEGY_ROWS = (
    ("Random", dict(strategy="random")),
    ("LIME", dict(strategy="lime")),
    ("LIME-R", dict(strategy="lime", reverse=True)),
    ("GEM", dict(strategy="gem")),
    ("GEM-R", dict(strategy="gem", reverse=True)),
    ("Gradient", dict(strategy="gradient")),
    ("Gradient-R", dict(strategy="gradient", reverse=True)),
    ("Attention", dict(strategy="attention")),
    ("Attention-R", dict(strategy="attention", reverse=True)),
    ("DropBlock", dict(dropblock=True)),
)
ABLATION_FIELDS = ("grid", "setting", "seed", "dev_acc", "ood_acc")
SUMMARY_FIELDS = ("grid", "setting", "seeds", "dev_mean", "dev_std", "ood_mean", "ood_std")


def _build(cls, section: str, d):
    if d is None:
        return cls()
    if not isinstance(d, Mapping):
        raise ConfigError(f"section {section!r} must be an object")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass
class RunConfig:
    """Everything one run needs; mirrors the JSON config file."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    benchmark: SpuriousSpec = field(default_factory=SpuriousSpec)
    data: str | None = None
    out: str | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    grad_check: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        train_d = dict(d.get("train") or {})
        if "cut" in d:
            train_d["cut"] = dict(d["cut"])
        try:
            run = TrainConfig.from_dict(train_d)
        except TypeError as exc:
            raise ConfigError(f"section 'train': {exc}") from None
        seeds = d.get("seeds", [0, 1, 2])
        if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a list of nonnegative integers")
        gc = d.get("grad_check") or {}
        if not isinstance(gc, Mapping):
            raise ConfigError("section 'grad_check' must be an object")
        return cls(model=_build(ModelConfig, "model", d.get("model")), train=run,
                   benchmark=_build(SpuriousSpec, "benchmark", d.get("benchmark")),
                   data=d.get("data"), out=d.get("out"), seeds=list(seeds), grad_check=dict(gc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        cut = t.pop("cut")
        return {"model": self.model.to_dict(), "train": t, "cut": cut,
                "benchmark": self.benchmark.to_dict(), "data": self.data, "out": self.out,
                "seeds": list(self.seeds), "grad_check": dict(self.grad_check)}

    def splits(self):
        if self.data:
            return load_splits(self.data, self.model.num_classes)
        self.benchmark.validate()
        return generate_spurious_benchmark(self.benchmark)

    def datasets(self):
        """``(vocab, model config with vocab size, tokenized splits)``."""
        return prepare_data(self.splits(), self.model)

    def grad_check_setup(self) -> GradCheckSetup:
        try:
            return GradCheckSetup(model=self.model, **self.grad_check)
        except TypeError as exc:
            raise ConfigError(f"section 'grad_check': {exc}") from None


def grid_settings(grid: str, base: CutConfig) -> list[tuple[str, CutConfig]]:
    """Named cut configurations for one ablation grid."""
    common = dict(alpha=base.alpha, beta=base.beta, num_aug=base.num_aug,
                  dim_fraction=base.dim_fraction, enabled=True)
    if grid == "strategy":
        return [(name, CutConfig(**{**common, "strategy": StrategyKind.RANDOM, **kw}))
                for name, kw in STRATEGY_ROWS]
    strat = dict(strategy=base.strategy, reverse=base.reverse, dropblock=base.dropblock)
    if grid == "alpha":
        return [(f"{a:g}", CutConfig(**{**common, **strat, "alpha": a})) for a in ALPHA_GRID]
    if grid == "beta":
        return [(f"{b:g}", CutConfig(**{**common, **strat, "beta": b})) for b in BETA_GRID]
    raise ConfigError(f"unknown grid {grid!r}; expected alpha, beta or strategy")


def ablate(cfg: RunConfig, grid: str, out_dir, log=None) -> tuple[Path, Path]:
    """Train every setting of ``grid`` for every seed and write two CSVs.

    ``ablation_<grid>.csv`` has one row per (setting, seed);
    ``ablation_<grid>_summary.csv`` has one table row per setting.
    """
    settings = grid_settings(grid, cfg.train.cut)
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    _, model_cfg, examples = cfg.datasets()
    rows = []
    for name, cut in settings:
        for seed in cfg.seeds:
            run = replace(cfg.train, seed=seed, cut=cut)
            tag = f"{grid}_{name}_s{seed}".replace("/", "-")
            t0 = time.perf_counter()
            _, report = train(run, model_cfg, examples, metrics_path=out / "runs" / f"{tag}.jsonl")
            last = report.records[-1]
            rows.append({"grid": grid, "setting": name, "seed": seed,
                         "dev_acc": last.get("dev_acc", float("nan")),
                         "ood_acc": last.get("ood_acc", float("nan"))})
            if log:
                log(f"{tag}: dev={rows[-1]['dev_acc']:.4f} ood={rows[-1]['ood_acc']:.4f} "
                    f"({time.perf_counter() - t0:.1f}s)")
    detail = out / f"ablation_{grid}.csv"
    _write_csv(detail, ABLATION_FIELDS, rows)
    summary = []
    for name, _ in settings:
        mine = [r for r in rows if r["setting"] == name]
        dev = np.array([r["dev_acc"] for r in mine])
        ood = np.array([r["ood_acc"] for r in mine])
        summary.append({"grid": grid, "setting": name, "seeds": len(mine),
                        "dev_mean": dev.mean(), "dev_std": dev.std(),
                        "ood_mean": ood.mean(), "ood_std": ood.std()})
    summary_path = out / f"ablation_{grid}_summary.csv"
    _write_csv(summary_path, SUMMARY_FIELDS, summary)
    return detail, summary_path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(r[h])) if isinstance(r[h], (float, np.floating)) else r[h]
                        for h in header])


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided sign test: P(at least ``wins`` successes) under a fair coin; ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


@dataclass
class OodResult:
    seeds: list
    base: np.ndarray          # (S, 2): dev, ood per seed
    cut: np.ndarray
    wins: int
    losses: int
    p_value: float
    dev_gap: float            # mean dev(cut) - mean dev(base)
    ood_gain: float
    seconds: float

    @property
    def passed(self) -> bool:
        return abs(self.dev_gap) <= 0.02 and self.ood_gain > 0 and self.p_value < 0.1

    def summary(self) -> dict:
        return {"seeds": self.seeds, "base_dev": float(self.base[:, 0].mean()),
                "base_ood": float(self.base[:, 1].mean()), "cut_dev": float(self.cut[:, 0].mean()),
                "cut_ood": float(self.cut[:, 1].mean()), "wins": self.wins, "losses": self.losses,
                "p_value": self.p_value, "dev_gap": self.dev_gap, "ood_gain": self.ood_gain,
                "passed": self.passed, "seconds": self.seconds}


def ood_experiment(cfg: RunConfig, seeds: Sequence[int], cut: CutConfig | None = None,
                   log=None) -> OodResult:
    """Paired comparison of no-cut training against ``cut`` over ``seeds``."""
    t0 = time.perf_counter()
    cut = cut or CutConfig()
    _, model_cfg, examples = cfg.datasets()
    pairs = {"base": [], "cut": []}
    for seed in seeds:
        for arm, c in (("base", CutConfig(enabled=False)), ("cut", cut)):
            _, report = train(replace(cfg.train, seed=seed, cut=c), model_cfg, examples)
            last = report.records[-1]
            pairs[arm].append((last["dev_acc"], last["ood_acc"]))
        if log:
            log(f"seed {seed}: base={pairs['base'][-1]} cut={pairs['cut'][-1]}")
    base, treat = np.array(pairs["base"]), np.array(pairs["cut"])
    wins = int(np.sum(treat[:, 1] > base[:, 1]))
    losses = int(np.sum(treat[:, 1] < base[:, 1]))
    return OodResult(list(seeds), base, treat, wins, losses, sign_test_p(wins, losses),
                     float(treat[:, 0].mean() - base[:, 0].mean()),
                     float(treat[:, 1].mean() - base[:, 1].mean()), time.perf_counter() - t0)
