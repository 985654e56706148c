"""Synthetic multi-domain classification corpora and JSON-lines ingestion.

Each domain ("group", standing in for a language) owns a disjoint band of
token ids.  Every class has a handful of indicative tokens inside each
band; a sequence position emits one of them with probability
``signal``, otherwise a background token from the group's Zipf-shaped
distribution (or, with probability ``1 - group_divergence``, a token
from anywhere in the vocabulary).
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SpecError
from .seeding import stream

PAD = 0


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 256
    n_classes: int = 8
    n_groups: int = 5
    train_per_cell: int = 200
    test_per_cell: int = 50
    seq_len: int = 16
    signal: float = 0.35
    group_divergence: float = 0.9
    class_tokens: int = 4
    pretrain_size: int = 4000
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "n_classes", "n_groups", "train_per_cell", "seq_len", "class_tokens"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if self.test_per_cell < 0 or self.pretrain_size < 0:
            raise SpecError("test_per_cell and pretrain_size must be non-negative")
        if self.n_classes < 2:
            raise SpecError("n_classes must be at least 2")
        if not 0.0 <= self.signal <= 1.0:
            raise SpecError(f"signal must lie in [0, 1], got {self.signal}")
        if not 0.0 <= self.group_divergence <= 1.0:
            raise SpecError(f"group_divergence must lie in [0, 1], got {self.group_divergence}")
        if self.band_size <= self.n_classes * self.class_tokens:
            raise SpecError(
                f"vocab_size {self.vocab_size} too small: {self.n_groups} bands of "
                f"{self.band_size} tokens cannot hold {self.n_classes}x{self.class_tokens} class tokens plus background"
            )

    @property
    def band_size(self) -> int:
        return (self.vocab_size - 1) // self.n_groups

    def band(self, group: int) -> np.ndarray:
        start = 1 + group * self.band_size
        return np.arange(start, start + self.band_size)


@dataclass(frozen=True, eq=False)
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    vocab_size: int
    n_classes: int
    n_groups: int = 1

    def __post_init__(self):
        for arr in (self.tokens, self.labels, self.groups):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.tokens[idx].copy(),
            self.labels[idx].copy(),
            self.groups[idx].copy(),
            self.vocab_size,
            self.n_classes,
            self.n_groups,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.vocab_size, self.n_classes, self.n_groups)
            == (other.vocab_size, other.n_classes, other.n_groups)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.groups, other.groups)
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.vocab_size, self.n_classes, self.n_groups, list(self.tokens.shape)]).encode())
        for arr in (self.tokens, self.labels, self.groups):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Corpus:
    train: Dataset
    test: Dataset
    pretrain: np.ndarray  # label-free token sequences


def _group_tables(spec: CorpusSpec, rng: np.random.Generator):
    """Per-group background distribution and per-(group, class) indicative tokens."""
    background, indicative = [], []
    n_ind = spec.n_classes * spec.class_tokens
    zipf = 1.0 / np.arange(1, spec.band_size - n_ind + 1)
    zipf /= zipf.sum()
    for g in range(spec.n_groups):
        band = rng.permutation(spec.band(g))
        # indicative tokens never occur as in-band background
        indicative.append(band[:n_ind].reshape(spec.n_classes, spec.class_tokens))
        background.append((band[n_ind:], zipf))
    return background, indicative


def _sample_cell(spec, tables, group, cls, n, rng) -> np.ndarray:
    background, indicative = tables
    order, probs = background[group]
    L = spec.seq_len
    base = order[np.searchsorted(np.cumsum(probs), rng.random((n, L)), side="right").clip(max=len(order) - 1)]
    anywhere = rng.integers(1, spec.vocab_size, size=(n, L))
    base = np.where(rng.random((n, L)) < spec.group_divergence, base, anywhere)
    if cls is None:
        cls_draw = rng.integers(0, spec.n_classes, size=(n, 1))
        picks = indicative[group][cls_draw, rng.integers(0, spec.class_tokens, size=(n, L))]
    else:
        picks = indicative[group][cls, rng.integers(0, spec.class_tokens, size=(n, L))]
    return np.where(rng.random((n, L)) < spec.signal, picks, base).astype(np.int64)


def synthesize_corpus(spec: CorpusSpec = CorpusSpec()) -> Corpus:
    """Deterministically generate (train, test, pretrain) from ``spec``."""
    spec.validate()
    tables = _group_tables(spec, stream(spec.seed, "corpus", "tables"))
    splits = {}
    for split, per_cell in (("train", spec.train_per_cell), ("test", spec.test_per_cell)):
        rng = stream(spec.seed, "corpus", split)
        toks, labels, groups = [], [], []
        for g in range(spec.n_groups):
            for c in range(spec.n_classes):
                toks.append(_sample_cell(spec, tables, g, c, per_cell, rng))
                labels.append(np.full(per_cell, c))
                groups.append(np.full(per_cell, g))
        # rows are shuffled so consecutive batches mix cells
        order = rng.permutation(len(labels) * per_cell)
        splits[split] = Dataset(
            np.concatenate(toks).reshape(-1, spec.seq_len)[order],
            np.concatenate(labels).astype(np.int64)[order],
            np.concatenate(groups).astype(np.int64)[order],
            spec.vocab_size,
            spec.n_classes,
            spec.n_groups,
        )
    rng = stream(spec.seed, "corpus", "pretrain")
    group_of = rng.integers(0, spec.n_groups, size=spec.pretrain_size)
    pretrain = np.zeros((spec.pretrain_size, spec.seq_len), dtype=np.int64)
    for g in range(spec.n_groups):
        rows = np.flatnonzero(group_of == g)
        if rows.size:
            pretrain[rows] = _sample_cell(spec, tables, g, None, rows.size, rng)
    return Corpus(splits["train"], splits["test"], pretrain)


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split by (class, group) cell.

    Test counts are assigned with a running remainder inside each class, so
    every class's test share is within one example of ``test_fraction``.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = stream(seed, "split")
    test_idx = []
    for c in range(dataset.n_classes):
        assigned = seen = 0
        for g in range(dataset.n_groups):
            cell = np.flatnonzero((dataset.labels == c) & (dataset.groups == g))
            if cell.size == 0:
                continue
            seen += cell.size
            take = int(np.floor(test_fraction * seen + 0.5)) - assigned
            assigned += take
            test_idx.append(rng.permutation(cell)[:take])
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return dataset.subset(train), dataset.subset(test)


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, lab, grp in zip(dataset.tokens.tolist(), dataset.labels.tolist(), dataset.groups.tolist()):
            fh.write(json.dumps({"tokens": tok, "label": lab, "group": grp}) + "\n")


def load_jsonl(
    path,
    vocab_size: int,
    n_classes: int,
    n_groups: int | None = None,
    seq_len: int | None = None,
) -> Dataset:
    """Read ``{"tokens": [...], "label": int, "group": int}`` records, one per line.

    Sequences shorter than ``seq_len`` are right-padded with the pad token;
    longer ones are rejected.  When ``n_groups`` is omitted it is inferred as
    ``max(group) + 1``.
    """
    records = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or set(rec) != {"tokens", "label", "group"}:
                raise ParseError("record must have exactly the keys tokens, label, group", lineno)
            tokens, label, group = rec["tokens"], rec["label"], rec["group"]
            if not isinstance(tokens, list) or not all(_is_int(t) for t in tokens) or not tokens:
                raise ParseError("tokens must be a non-empty list of integers", lineno)
            if not _is_int(label) or not _is_int(group):
                raise ParseError("label and group must be integers", lineno)
            if any(t < 0 or t >= vocab_size for t in tokens):
                raise DataError(f"line {lineno}: token id out of range [0, {vocab_size})")
            if not 0 <= label < n_classes:
                raise DataError(f"line {lineno}: label {label} out of range [0, {n_classes})")
            if group < 0 or (n_groups is not None and group >= n_groups):
                raise DataError(f"line {lineno}: group {group} out of range")
            if seq_len is not None and len(tokens) > seq_len:
                raise DataError(f"line {lineno}: sequence of length {len(tokens)} exceeds {seq_len}")
            records.append((tokens, label, group))

    if not records:
        warnings.warn(f"{path}: empty dataset", stacklevel=2)
    width = seq_len if seq_len is not None else max((len(r[0]) for r in records), default=0)
    tokens = np.full((len(records), width), PAD, dtype=np.int64)
    for i, (tok, _, _) in enumerate(records):
        tokens[i, : len(tok)] = tok
    labels = np.array([r[1] for r in records], dtype=np.int64)
    groups = np.array([r[2] for r in records], dtype=np.int64)
    if n_groups is None:
        n_groups = int(groups.max()) + 1 if len(records) else 1
    return Dataset(tokens, labels, groups, vocab_size, n_classes, n_groups)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)
