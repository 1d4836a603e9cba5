"""End-to-end gradient check of the full training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cut import Batch, CutConfig, augmented_forward, fixed_span_hook
from ..encoder import ModelConfig, forward_logits, init_params
from ..numerics import autodiff as ad
from ..numerics import grad_check
from ..objectives import consistency_target, cross_entropy_node, js_consistency_node
from ..strategies import StrategyKind


@dataclass
class GradCheckSetup:
    model: ModelConfig
    num_aug: int = 2
    batch_size: int = 3
    seq_len: int = 6
    alpha: float = 0.2
    gamma: float = 1.0
    eta: float = 1.0
    init_std: float = 0.3
    eps: float = 1e-4
    num_coords: int = 300
    seed: int = 0


def objective_grad_check(setup: GradCheckSetup, return_details: bool = False):
    """Max relative error of the full ``l_ori + gamma*l_aug + eta*l_js`` gradient.

    Spans are drawn once with the Random strategy and then held fixed, so the
    loss is a smooth function of the parameters. ``p_avg`` is a stop-gradient
    target, so the finite-difference route freezes it at the base parameters.
    """
    cfg = setup.model
    rng = np.random.default_rng([setup.seed, 0x6C])
    params = init_params(cfg, rng, setup.init_std)
    B, L = setup.batch_size, min(setup.seq_len, cfg.max_len)
    ids = rng.integers(4, cfg.vocab_size, size=(B, L))
    ids[:, 0], ids[:, -1] = 1, 2
    batch = Batch(ids, np.ones((B, L), dtype=bool), rng.integers(0, cfg.num_classes, size=B),
                  np.arange(B))
    cut = CutConfig(alpha=setup.alpha, strategy=StrategyKind.RANDOM, num_aug=setup.num_aug)
    views = []
    for a in range(setup.num_aug):
        rngs = [np.random.default_rng([setup.seed, b, a + 1]) for b in range(B)]
        _, spans = augmented_forward(params, batch, cut, cfg, rngs)
        views.append(spans)

    def views_logits(p):
        logits, _ = forward_logits(p, batch.ids, batch.pad_mask, cfg)
        augs = [forward_logits(p, batch.ids, batch.pad_mask, cfg, fixed_span_hook(s))[0]
                for s in views]
        return logits, augs

    target = consistency_target(*views_logits(params))

    def loss(p):
        logits, augs = views_logits(p)
        total = cross_entropy_node(logits, batch.labels)
        for la in augs:
            total = ad.add(total, ad.scale(cross_entropy_node(la, batch.labels), setup.gamma))
        total = ad.add(total, ad.scale(js_consistency_node(logits, augs, target), setup.eta))
        return ad.mean_all(total)

    return grad_check(loss, params, eps=setup.eps, num_coords=setup.num_coords, seed=setup.seed,
                      return_details=return_details)
