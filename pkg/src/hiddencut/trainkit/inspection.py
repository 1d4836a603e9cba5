"""Where the start token looks: last-layer attention from position 0."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..encoder import ModelConfig, encode

CSV_HEADER = ("token", "position", "weight")


@dataclass(frozen=True)
class AttentionRow:
    token: str
    position: int
    weight: float


def start_token_attention(params: Mapping, model_cfg: ModelConfig, ids: Sequence[int],
                          tokens: Sequence[str] | None = None) -> list[AttentionRow]:
    """Head-averaged last-layer attention that ``<s>`` pays to every position.

    Runs without cuts. ``tokens`` labels the rows; ids are used when absent.
    """
    ids = np.asarray(ids, dtype=np.int64)[None]
    pad = np.ones_like(ids, dtype=bool)
    _, records = encode(params, ids, pad, model_cfg)
    weights = records[-1].attention[0, :, 0, :].mean(axis=0)
    names = [str(t) for t in (tokens if tokens is not None else ids[0])]
    return [AttentionRow(names[i], i, float(w)) for i, w in enumerate(weights)]


def write_attention_csv(rows: Sequence[AttentionRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow((r.token, r.position, repr(r.weight)))
    return path


def inspect_attention(params: Mapping, model_cfg: ModelConfig, ids: Sequence[int], out_path,
                      tokens: Sequence[str] | None = None) -> list[AttentionRow]:
    rows = start_token_attention(params, model_cfg, ids, tokens)
    write_attention_csv(rows, out_path)
    return rows
