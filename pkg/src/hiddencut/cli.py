"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cut import CutConfig
from .data import SpuriousSpec, Vocab, encode_text, generate_spurious_benchmark, read_tsv, tokenize, write_benchmark
from .errors import ConfigError, DataError, HiddenCutError, NumericError
from .numerics.kernels import BACKEND
from .strategies import StrategyKind
from .trainkit.checkpoint import load_checkpoint, save_checkpoint
from .trainkit.experiments import RunConfig, ablate, ood_experiment
from .trainkit.gradcheck import objective_grad_check
from .trainkit.inspection import inspect_attention
from .trainkit.metrics import accuracy, confusion_2x2, matthews_corr, spearman_corr
from .trainkit.train import predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-6

log = logging.getLogger("hiddencut")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, flush=True)


def _load_run(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags win over the config file, which wins over defaults."""
    cut_kw = {k: v for k, v in (("alpha", args.alpha), ("beta", args.beta),
                                ("strategy", args.strategy), ("reverse", args.reverse),
                                ("num_aug", args.num_aug), ("dropblock", args.dropblock))
              if v is not None}
    cut = cfg.train.cut
    if cut_kw:
        cut = CutConfig(**{**cut.to_dict(), **cut_kw, "enabled": True})
    train_kw = {k: v for k, v in (("gamma", args.gamma), ("eta", args.eta), ("seed", args.seed))
                if v is not None}
    run = replace(cfg.train, cut=cut, **train_kw)
    run.__post_init__()
    return replace(cfg, train=run, data=args.data or cfg.data, out=args.out or cfg.out)


def cmd_gen_data(args) -> int:
    spec = SpuriousSpec()
    if args.spec:
        spec = SpuriousSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = write_benchmark(generate_spurious_benchmark(spec), spec, args.out)
    _say(f"wrote train/dev/ood splits and spec.json to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_overrides(_load_run(args), args)
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    vocab, model_cfg, examples = cfg.datasets()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    lime_table = None
    cut = cfg.train.cut
    if cut.active and not cut.dropblock and cut.strategy is StrategyKind.LIME:
        from .strategies import lime_precompute

        lime_table = lime_precompute(examples["train"], cfg.train.lime_epochs, cfg.train.lime_perturb,
                                     np.random.default_rng([cfg.train.seed, 0x11E]),
                                     model_cfg.vocab_size, model_cfg.num_classes)
        lime_table.write_tsv(out / "lime.tsv")
    params, report = train(cfg.train, model_cfg, examples, metrics_path=out / "metrics.jsonl",
                           lime_table=lime_table)
    save_checkpoint(out / "model.hcut", params, model_cfg, cfg.train.to_dict(), vocab.tokens)
    _say(json.dumps({"out": str(out), "backend": BACKEND, **report.summary}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    records = read_tsv(args.data, ckpt.model.num_classes)
    examples = tokenize(records, Vocab(ckpt.vocab), ckpt.model.max_len)
    labels = np.array([ex.label for ex in examples])
    proba = predict(ckpt.params, ckpt.model, examples)
    pred = np.argmax(proba, axis=-1)
    if args.metric == "acc":
        value = accuracy(pred, labels)
    elif args.metric == "mcc":
        if ckpt.model.num_classes != 2:
            raise ConfigError("mcc needs a binary model")
        value = matthews_corr(*confusion_2x2(pred, labels))
    else:
        # rank agreement between the expected class index and the gold label
        expected = proba @ np.arange(ckpt.model.num_classes)
        res = spearman_corr(expected, labels)
        if res.degenerate:
            log.warning("spearman: zero rank variance, reporting 0")
        value = res.value
    _say(json.dumps({"metric": args.metric, "value": value, "n": len(examples)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run(args)
    out = Path(args.out or cfg.out or "ablation")
    detail, summary = ablate(cfg, args.grid, out, log=_say)
    _say(f"wrote {detail} and {summary}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise DataError("checkpoint carries no vocabulary")
    vocab = Vocab(ckpt.vocab)
    ids = encode_text(args.text, vocab, ckpt.model.max_len)
    tokens = ["<s>"] + args.text.split()[: ckpt.model.max_len - 2] + ["</s>"]
    rows = inspect_attention(ckpt.params, ckpt.model, ids, args.out, tokens)
    top = max(rows[1:], key=lambda r: r.weight) if len(rows) > 1 else rows[0]
    _say(f"wrote {len(rows)} rows to {args.out}; top token {top.token!r} ({top.weight:.4f})")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _load_run(args)
    setup = cfg.grad_check_setup()
    if args.seed is not None:
        setup = replace(setup, seed=args.seed)
    err = objective_grad_check(setup)
    ok = err < GRAD_TOLERANCE
    _say(json.dumps({"max_rel_error": err, "tolerance": GRAD_TOLERANCE, "passed": ok}))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ood(args) -> int:
    cfg = _load_run(args)
    cut = cfg.train.cut if cfg.train.cut.active else CutConfig()
    seeds = list(range(args.seeds)) if args.seeds is not None else cfg.seeds
    res = ood_experiment(cfg, seeds, cut, log=_say)
    summary = res.summary()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _say(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hiddencut", description="Span-level hidden-state cutting lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the spurious-correlation benchmark")
    g.add_argument("--spec", help="SpuriousSpec JSON (defaults when absent)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fine-tune with or without cuts")
    t.add_argument("--config")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--eta", type=float)
    t.add_argument("--strategy", choices=[k.value for k in StrategyKind])
    t.add_argument("--reverse", action="store_true", default=None)
    t.add_argument("--num-aug", type=int)
    t.add_argument("--dropblock", action="store_true", default=None)
    t.add_argument("--seed", type=int)
    t.add_argument("--data")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a TSV split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", choices=["acc", "mcc", "spearman"], default="acc")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid and write CSV tables")
    a.add_argument("--config")
    a.add_argument("--grid", choices=["alpha", "beta", "strategy"], required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect-attention", help="last-layer attention from <s> as CSV")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--text", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_grad_check)

    o = sub.add_parser("ood", help="paired no-cut vs cut OOD experiment with a sign test")
    o.add_argument("--config")
    o.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's list")
    o.add_argument("--out")
    o.set_defaults(func=cmd_ood)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hiddencut: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"hiddencut: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"hiddencut: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HiddenCutError as exc:
        print(f"hiddencut: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
