"""Compiled vs numpy row kernels, per kernel and per training step.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Kernel shapes match the attention and FFN activations of a batch of 32
sequences of length 16 with D=32, P=2, ffn_dim=64. The training-step row
times one forward+backward+Adam step of the full objective with the
attention strategy, switching the dispatcher between backends. Both
backends share the numpy GELU forward, so that row is a control.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from hiddencut.cut import Batch, CutConfig
from hiddencut.encoder import ModelConfig, init_params
from hiddencut.numerics import autodiff as ad
from hiddencut.numerics import kernels
from hiddencut.trainkit import AdamState, TrainConfig, adam_step
from hiddencut.trainkit.train import batch_loss

B, L, D, P, F = 32, 16, 32, 2, 64


def kernel_cases(rng):
    x = rng.normal(size=(B, L, D))
    gain, bias = rng.normal(size=D), rng.normal(size=D)
    scores = rng.normal(size=(B, P, L, L))
    valid = np.ones((B, 1, 1, L), dtype=bool)
    valid[:, :, :, 12:] = False
    h = rng.normal(size=(B, L, F))

    def cases(k):
        _, xhat, rstd = k.layer_norm_forward(x, gain, bias, 1e-5)
        y = k.masked_softmax_forward(scores, valid)
        _, t = k.gelu_forward(h)
        return {
            "layer_norm_forward": lambda: k.layer_norm_forward(x, gain, bias, 1e-5),
            "layer_norm_backward": lambda: k.layer_norm_backward(x, xhat, rstd, gain),
            "masked_softmax_forward": lambda: k.masked_softmax_forward(scores, valid),
            "masked_softmax_backward": lambda: k.masked_softmax_backward(scores, y),
            "gelu_forward": lambda: k.gelu_forward(h),
            "gelu_backward": lambda: k.gelu_backward(h, h, t),
        }

    return cases


def train_step_fn(rng):
    cfg = ModelConfig(num_layers=2, hidden_dim=D, num_heads=P, ffn_dim=F, vocab_size=200, max_len=L)
    params = init_params(cfg, rng, std=0.02)
    ids = rng.integers(4, cfg.vocab_size, size=(B, L))
    ids[:, 0] = 1
    batch = Batch(ids, np.ones((B, L), dtype=bool), rng.integers(0, 2, size=B), np.arange(B))
    run = TrainConfig(cut=CutConfig())

    def step():
        leaves = {k: ad.param(v, name=k) for k, v in params.items()}
        loss, *_ = batch_loss(leaves, cfg, batch, run, epoch=0)
        ad.backward(loss)
        grads = {k: leaf.grad for k, leaf in leaves.items()}
        adam_step({k: v.copy() for k, v in params.items()}, grads, AdamState(), 1e-3)

    return step


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    backends = {"compiled": kernels.compiled, "python": kernels.python}
    cases = kernel_cases(np.random.default_rng(0))
    results = {}
    for name in cases(kernels.python):
        results[name] = {b: best_of(cases(k)[name], args.repeat, 200) for b, k in backends.items()}

    step = train_step_fn(np.random.default_rng(1))
    saved = kernels.active
    try:
        results["train_step"] = {}
        for b, k in backends.items():
            kernels.active = k
            results["train_step"][b] = best_of(step, args.repeat, 3)
    finally:
        kernels.active = saved

    print(f"{'case':<26}{'compiled (us)':>15}{'python (us)':>15}{'speedup':>10}")
    for name, r in results.items():
        print(f"{name:<26}{r['compiled'] * 1e6:>15.1f}{r['python'] * 1e6:>15.1f}"
              f"{r['python'] / r['compiled']:>9.2f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
