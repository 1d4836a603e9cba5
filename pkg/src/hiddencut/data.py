"""Vocabulary, tokenization, TSV corpora and the spurious-correlation benchmark."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError, SpecError

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self.tokens[i]


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Ids by descending frequency, ties broken lexicographically."""
    counts: Counter = Counter()
    n = 0
    for text in corpus:
        n += 1
        counts.update(text.split())
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


def encode_text(text: str, vocab: Vocab, max_len: int, pad_to: int | None = None) -> list[int]:
    """``<s>`` + whitespace tokens (truncated to ``max_len - 2``) + ``</s>``."""
    if max_len < 3:
        raise DataError("max_len must be at least 3")
    words = text.split()[: max_len - 2]
    ids = [BOS_ID] + [vocab.id(w) for w in words] + [EOS_ID]
    if pad_to is not None:
        ids = ids + [PAD_ID] * max(0, pad_to - len(ids))
    return ids


@dataclass(frozen=True)
class Record:
    text: str
    label: int


@dataclass
class Example:
    ids: np.ndarray          # unpadded, <s> ... </s>
    label: int
    id: int

    def __len__(self):
        return len(self.ids)

    @property
    def pad_mask(self) -> np.ndarray:
        return np.ones(len(self.ids), dtype=bool)


def tokenize(records: Sequence[Record], vocab: Vocab, max_len: int) -> list[Example]:
    return [Example(np.asarray(encode_text(r.text, vocab, max_len), dtype=np.int64), r.label, i)
            for i, r in enumerate(records)]


def read_tsv(path, num_classes: int | None = None) -> list[Record]:
    """Read a ``text<TAB>label`` file with a header line."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\r\n")
        if header == "":
            return out
        if header.split("\t") != ["text", "label"]:
            raise ParseError(f"expected header 'text\\tlabel', got {header!r}", 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 2 tab-separated fields, got {len(parts)}", lineno)
            text, raw = parts
            try:
                label = int(raw)
            except ValueError:
                raise DataError(f"line {lineno}: label {raw!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataError(f"line {lineno}: unknown label {label}")
            out.append(Record(text, label))
    return out


def write_tsv(records: Iterable[Record], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("text\tlabel\n")
        for r in records:
            if "\t" in r.text or "\n" in r.text:
                raise DataError("text may not contain tabs or newlines")
            fh.write(f"{r.text}\t{int(r.label)}\n")


# -- synthetic benchmark ----------------------------------------------------

@dataclass
class SpuriousSpec:
    """Parameters of the spurious-correlation benchmark.

    Each sentence carries ``k`` signal tokens from its label's signal
    vocabulary, neutral filler, and one spurious token. With probability
    ``rho`` the spurious token belongs to the sentence's own label,
    otherwise to another label.
    """
    num_classes: int = 2
    signal_per_class: int = 40
    neutral_tokens: int = 60
    spurious_per_class: int = 1
    min_len: int = 8
    max_len: int = 14
    rho_train: float = 0.95
    rho_ood: float = 0.0
    k: int = 3
    n_train: int = 2000
    n_dev: int = 500
    n_ood: int = 500
    seed: int = 0

    def validate(self) -> None:
        for name in ("rho_train", "rho_ood"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecError(f"{name}={v} outside [0, 1]")
        if self.k < 1:
            raise SpecError("k must be >= 1")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if self.min_len > self.max_len:
            raise SpecError("min_len > max_len")
        if self.min_len < self.k + 1:
            raise SpecError(f"length range [{self.min_len}, {self.max_len}] cannot hold "
                            f"{self.k} signal tokens plus a spurious token")
        if self.k > self.signal_per_class:
            raise SpecError("k exceeds the signal vocabulary size")
        if self.min_len > self.k + 1 and self.neutral_tokens < 1:
            raise SpecError("filler needed but neutral vocabulary is empty")
        for name in ("signal_per_class", "spurious_per_class", "n_train", "n_dev", "n_ood"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SpuriousSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown SpuriousSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def signal_token(c: int, j: int) -> str:
    return f"sig{c}_{j}"


def spurious_token(c: int, j: int) -> str:
    return f"spu{c}_{j}"


def neutral_token(j: int) -> str:
    return f"w{j}"


def _sentence(spec: SpuriousSpec, label: int, rho: float, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    words = [signal_token(label, int(j))
             for j in rng.choice(spec.signal_per_class, size=spec.k, replace=False)]
    words += [neutral_token(int(j)) for j in rng.integers(0, spec.neutral_tokens, size=n - spec.k - 1)]
    words = [words[i] for i in rng.permutation(len(words))]
    if rng.random() < rho:
        owner = label
    else:
        others = [c for c in range(spec.num_classes) if c != label]
        owner = others[int(rng.integers(len(others)))]
    spu = spurious_token(owner, int(rng.integers(spec.spurious_per_class)))
    words.insert(int(rng.integers(len(words) + 1)), spu)
    return " ".join(words)


def generate_spurious_benchmark(spec: SpuriousSpec, rng: np.random.Generator | None = None
                                ) -> dict[str, list[Record]]:
    """Build ``train``/``dev``/``ood`` splits; bit-reproducible from ``spec.seed``.

    Each split draws from its own child stream of the seed. ``rng``, when
    given, replaces the seed-derived root stream.
    """
    spec.validate()
    if rng is None:
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)]
    else:
        streams = rng.spawn(3)
    plan = [("train", spec.n_train, spec.rho_train), ("dev", spec.n_dev, spec.rho_train),
            ("ood", spec.n_ood, spec.rho_ood)]
    out = {}
    for (name, n, rho), r in zip(plan, streams):
        labels = r.integers(0, spec.num_classes, size=n)
        out[name] = [Record(_sentence(spec, int(y), rho, r), int(y)) for y in labels]
    return out


def write_benchmark(splits: dict[str, list[Record]], spec: SpuriousSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in splits.items():
        write_tsv(records, out / f"{name}.tsv")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def load_splits(data_dir, num_classes: int | None = None) -> dict[str, list[Record]]:
    """Read whichever of train/dev/ood TSVs exist in ``data_dir``."""
    d = Path(data_dir)
    splits = {name: read_tsv(d / f"{name}.tsv", num_classes)
              for name in ("train", "dev", "ood") if (d / f"{name}.tsv").exists()}
    if "train" not in splits:
        raise DataError(f"{d} has no train.tsv")
    return splits


def signal_label(text: str) -> int | None:
    """Label implied by the signal tokens alone (``None`` if they disagree)."""
    owners = {int(w[3:].split("_")[0]) for w in text.split() if w.startswith("sig")}
    return owners.pop() if len(owners) == 1 else None


def spurious_label(text: str) -> int | None:
    for w in text.split():
        if w.startswith("spu"):
            return int(w[3:].split("_")[0])
    return None
