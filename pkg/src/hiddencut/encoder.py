"""Post-layer-norm transformer encoder with a per-layer cut hook.

Everything here is batch-first: hidden states are ``(B, L, D)``, attention
tensors ``(B, P, L, L)`` and masks ``(B, L)`` booleans. Parameters are a flat
``dict`` of name to array so they serialize and optimize without ceremony;
the forward functions accept either arrays or tape :class:`Node` leaves.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateMaskError, VocabError
from .numerics import LAYER_NORM_EPS
from .numerics import autodiff as ad
from .numerics.autodiff import Node


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 64
    max_len: int = 32
    num_classes: int = 2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for <s> and </s>")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerRecord:
    hidden: np.ndarray                 # (B, L, D), post-FFN and post-cut
    attention: np.ndarray              # (B, P, L, L)
    spans: list = field(default_factory=list)   # per example: SpanMask or None
    pre_cut: Optional[Node] = field(default=None, repr=False)


# hook(layer, hidden, pad_mask, attention) -> (hidden, next_mask, spans)
CutHook = Callable[[int, Node, np.ndarray, np.ndarray], tuple]


def layer_param_names(m: int) -> list[str]:
    return [f"layer{m}.{n}" for n in (
        "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
        "ff_w1", "ff_b1", "ff_w2", "ff_b2", "ln2_g", "ln2_b")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    D, F = cfg.hidden_dim, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, D), "pos_emb": (cfg.max_len, D)}
    for m in range(cfg.num_layers):
        p = f"layer{m}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (D, D)
        # no key bias: it shifts each softmax row by a constant and cancels
        for b in ("bq", "bv", "bo"):
            shapes[p + b] = (D,)
        shapes[p + "ln1_g"] = shapes[p + "ln1_b"] = (D,)
        shapes[p + "ff_w1"], shapes[p + "ff_b1"] = (D, F), (F,)
        shapes[p + "ff_w2"], shapes[p + "ff_b2"] = (F, D), (D,)
        shapes[p + "ln2_g"] = shapes[p + "ln2_b"] = (D,)
    shapes["cls_w"] = (D, cfg.num_classes)
    shapes["cls_b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    """Gaussian weights, zero biases, unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def _node(p) -> Node:
    return p if isinstance(p, Node) else Node(p)


def _nodes(params: Mapping) -> dict[str, Node]:
    return {k: _node(v) for k, v in params.items()}


def embed(token_ids, params: Mapping) -> Node:
    """H0[b, i] = tok_emb[ids[b, i]] + pos_emb[i]."""
    P = _nodes(params)
    ids = np.asarray(token_ids, dtype=np.int64)
    vocab, max_len = P["tok_emb"].shape[0], P["pos_emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"token id out of range [0, {vocab})")
    L = ids.shape[-1]
    if L > max_len:
        raise VocabError(f"sequence length {L} exceeds max_len {max_len}")
    pos = ad.getitem(P["pos_emb"], slice(0, L))
    return ad.add(ad.embedding(P["tok_emb"], ids), pos)


def _split_heads(x: Node, B: int, L: int, heads: int, dh: int) -> Node:
    return ad.transpose(ad.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))


def attention_sublayer(H: Node, attn_mask: np.ndarray, params: Mapping, layer: int,
                       num_heads: int) -> tuple[Node, np.ndarray]:
    """Multi-head self-attention, residual add, layer norm.

    Keys whose mask flag is 0 receive exactly zero attention from every
    query. Returns the new hidden state and the attention tensor.
    """
    P = _nodes(params)
    H = _node(H)
    B, L, D = H.shape
    mask = np.asarray(attn_mask, dtype=bool).reshape(B, L)
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("an example has no valid attention position")
    dh = D // num_heads
    p = f"layer{layer}."
    q = _split_heads(ad.add(ad.matmul(H, P[p + "wq"]), P[p + "bq"]), B, L, num_heads, dh)
    k = _split_heads(ad.matmul(H, P[p + "wk"]), B, L, num_heads, dh)
    v = _split_heads(ad.add(ad.matmul(H, P[p + "wv"]), P[p + "bv"]), B, L, num_heads, dh)
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    A = ad.masked_softmax(logits, mask[:, None, None, :])
    ctx = ad.reshape(ad.transpose(ad.matmul(A, v), (0, 2, 1, 3)), (B, L, D))
    out = ad.add(ad.matmul(ctx, P[p + "wo"]), P[p + "bo"])
    return ad.layer_norm(ad.add(H, out), P[p + "ln1_g"], P[p + "ln1_b"], LAYER_NORM_EPS), A.value


def ffn_sublayer(H: Node, params: Mapping, layer: int) -> Node:
    P = _nodes(params)
    H = _node(H)
    p = f"layer{layer}."
    inner = ad.gelu(ad.add(ad.matmul(H, P[p + "ff_w1"]), P[p + "ff_b1"]))
    out = ad.add(ad.matmul(inner, P[p + "ff_w2"]), P[p + "ff_b2"])
    return ad.layer_norm(ad.add(H, out), P[p + "ln2_g"], P[p + "ln2_b"], LAYER_NORM_EPS)


def encode(params: Mapping, token_ids, pad_mask, cfg: ModelConfig,
           cut_hook: CutHook | None = None) -> tuple[Node, list[LayerRecord]]:
    """Run all layers; returns the final hidden state and one record per layer.

    The hook sees each layer's post-FFN hidden state together with the
    original padding mask. The mask it returns governs the attention of the
    next layer only; the layer after that starts again from the padding mask.
    """
    P = _nodes(params)
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    pad = np.atleast_2d(np.asarray(pad_mask, dtype=bool))
    if pad.shape != ids.shape:
        raise ContractError(f"pad_mask shape {pad.shape} != token_ids shape {ids.shape}")
    B = ids.shape[0]
    H = embed(ids, P)
    attn_mask = pad
    records = []
    for m in range(cfg.num_layers):
        H, A = attention_sublayer(H, attn_mask, P, m, cfg.num_heads)
        H = ffn_sublayer(H, P, m)
        pre = H
        spans: list = [None] * B
        attn_mask = pad
        if cut_hook is not None:
            out = cut_hook(m, H, pad, A)
            if not isinstance(out, tuple) or len(out) != 3:
                raise ContractError("cut hook must return (hidden, mask, spans)")
            H, attn_mask, spans = out
            H = _node(H)
            attn_mask = np.asarray(attn_mask, dtype=bool)
            if H.shape != pre.shape or attn_mask.shape != pad.shape:
                raise ContractError("cut hook returned hidden/mask of the wrong shape")
            spans = list(spans) if spans is not None else [None] * B
            if len(spans) != B:
                raise ContractError("cut hook must return one span entry per example")
        records.append(LayerRecord(hidden=H.value, attention=A, spans=spans, pre_cut=pre))
    return H, records


def classify_head(H_final: Node, params: Mapping) -> Node:
    """Logits from the first position (the ``<s>`` slot): ``H[:, 0] @ W + b``."""
    P = _nodes(params)
    first = ad.getitem(_node(H_final), (slice(None), 0))
    return ad.add(ad.matmul(first, P["cls_w"]), P["cls_b"])


def forward_logits(params: Mapping, token_ids, pad_mask, cfg: ModelConfig,
                   cut_hook: CutHook | None = None) -> tuple[Node, list[LayerRecord]]:
    H, records = encode(params, token_ids, pad_mask, cfg, cut_hook)
    return classify_head(H, params), records


def check_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names differ: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ConfigError(f"{name}: shape {np.shape(params[name])} != {shape}")


def stack_ids(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of id sequences to a common length."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask
