"""Text classification data: normalisation, vocabulary, splits and batching."""

from __future__ import annotations

import csv
import hashlib
import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import PAD_INDEX, UNK_INDEX

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
VALID_FRACTION = 0.3

_BREAK_TAG = re.compile(r"<br\s*/?>")
_LOOSE_APOSTROPHE = re.compile(r"(?<![a-z0-9])'|'(?![a-z0-9])")
_NON_TOKEN = re.compile(r"[^a-z0-9']+")


def normalize_and_tokenize(text: str) -> list[str]:
    """Lower-case, turn every character outside ``[a-z0-9]`` into a space, split.

    Apostrophes survive only between two alphanumerics (``don't``).  HTML
    line breaks (``<br />``) are removed first.
    """
    text = _BREAK_TAG.sub(" ", text.lower())
    text = _NON_TOKEN.sub(" ", text)
    text = _LOOSE_APOSTROPHE.sub(" ", text)
    return text.split()


@dataclass
class Vocab:
    """Token to index map; index 0 is PAD and 1 is UNK."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.itos[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with PAD and UNK")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK_INDEX) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def roundtrip(self, tokens: Sequence[str]) -> tuple[list[str], list[int]]:
        """Encode then decode; also return positions that fell back to UNK."""
        ids = self.encode(tokens)
        unk = [i for i, t in enumerate(tokens) if t not in self.stoi]
        return self.decode(ids), unk


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Frequency-descending vocabulary with lexicographic tie-break."""
    counts = Counter()
    n_docs = 0
    for tokens in corpus:
        counts.update(tokens)
        n_docs += 1
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab([PAD_TOKEN, UNK_TOKEN, *kept])


@dataclass
class TextDataset:
    sequences: list[np.ndarray]
    labels: np.ndarray
    split: np.ndarray
    vocab: Vocab
    label_names: list[str]

    def __post_init__(self):
        if len(self.sequences) != len(self.labels) or len(self.labels) != len(self.split):
            raise ValueError("sequences, labels and split tags must align")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label index out of range")
        for seq in self.sequences:
            if seq.size and seq.max() >= len(self.vocab):
                raise ValueError("token index outside the vocabulary")

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def examples(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.sequences, self.labels.tolist()))

    def indices(self, split: str | None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.labels))
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> "TextDataset":
        idx = self.indices(split)
        return TextDataset([self.sequences[i] for i in idx], self.labels[idx], self.split[idx],
                           self.vocab, self.label_names)

    def majority_rate(self, split: str | None = None) -> float:
        labels = self.labels[self.indices(split)]
        if labels.size == 0:
            return 0.0
        return float(np.bincount(labels, minlength=self.n_classes).max() / labels.size)


@dataclass
class DatasetManifest:
    """Where a dataset lives and how to read it.

    Paths are resolved relative to the manifest file.  ``valid`` is optional;
    without it 30% of the train file is held out.
    """

    name: str
    train: str
    test: str | None = None
    valid: str | None = None
    delimiter: str = ","
    label_column: str = "label"
    text_column: str = "text"
    n_classes: int | None = None
    split_seed: int = 0
    valid_fraction: float = VALID_FRACTION
    min_freq: int = 1
    root: str = "."

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text(encoding="utf-8"))
        data.setdefault("root", str(path.parent))
        return cls(**data)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("root")
        return d


def read_labeled_rows(path, delimiter: str, label_column: str, text_column: str) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None or label_column not in reader.fieldnames or text_column not in reader.fieldnames:
            raise ValueError(f"{path}: header must contain {label_column!r} and {text_column!r}")
        return [(row[label_column], row[text_column] or "") for row in reader]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_seed_for(seed: int, digest: str) -> int:
    """Derive the shuffle seed from the user seed and the train file hash."""
    h = hashlib.sha256(f"{seed}:{digest}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def validation_mask(n: int, seed: int, digest: str, fraction: float = VALID_FRACTION) -> np.ndarray:
    rng = np.random.default_rng(split_seed_for(seed, digest))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:int(round(fraction * n))]] = True
    return mask


def load_dataset(manifest: DatasetManifest | str | Path) -> TextDataset:
    """Read, tokenise, split and encode the files named by ``manifest``.

    Labels are mapped to class indices in first-seen order (train, then
    valid, then test).  The vocabulary is built from the training split only.
    Texts with no tokens are encoded as a single UNK.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    train_path = manifest.resolve(manifest.train)
    parts: list[tuple[str, list[tuple[str, str]]]] = []
    train_rows = read_labeled_rows(train_path, manifest.delimiter, manifest.label_column, manifest.text_column)
    if manifest.valid:
        parts.append(("train", train_rows))
        parts.append(("valid", read_labeled_rows(manifest.resolve(manifest.valid), manifest.delimiter,
                                                 manifest.label_column, manifest.text_column)))
    else:
        mask = validation_mask(len(train_rows), manifest.split_seed, file_digest(train_path),
                               manifest.valid_fraction)
        tags = np.where(mask, "valid", "train")
        parts.append(("__mixed__", list(zip(tags.tolist(), train_rows))))
    if manifest.test:
        parts.append(("test", read_labeled_rows(manifest.resolve(manifest.test), manifest.delimiter,
                                                manifest.label_column, manifest.text_column)))

    label_names: list[str] = []
    label_index: dict[str, int] = {}
    tokens_all, labels, split = [], [], []
    for tag, rows in parts:
        for item in rows:
            row_tag, (label, text) = item if tag == "__mixed__" else (tag, item)
            if label not in label_index:
                label_index[label] = len(label_names)
                label_names.append(label)
            tokens_all.append(normalize_and_tokenize(text))
            labels.append(label_index[label])
            split.append(row_tag)

    if manifest.n_classes is not None and manifest.n_classes != len(label_names):
        raise ValueError(f"manifest declares {manifest.n_classes} classes, data has {len(label_names)}")
    split_arr = np.array(split)
    vocab = build_vocab((t for t, s in zip(tokens_all, split) if s == "train"), manifest.min_freq)
    sequences = [vocab.encode(t) if t else np.array([UNK_INDEX], dtype=np.int64) for t in tokens_all]
    return TextDataset(sequences, np.array(labels, dtype=np.int64), split_arr, vocab, label_names)


@dataclass
class Batch:
    ids: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray


def pad_sequences(sequences: Sequence[np.ndarray], clip_len: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([min(len(s), clip_len) for s in sequences], dtype=np.int64)
    ids = np.full((len(sequences), int(lengths.max()) if len(sequences) else 0), PAD_INDEX, dtype=np.int64)
    for row, (seq, n) in enumerate(zip(sequences, lengths)):
        ids[row, :n] = seq[:n]
    return ids, lengths


def make_batches(ds: TextDataset, batch_size: int, clip_len: int, seed: int = 0,
                 split: str | None = "train", epoch: int = 0, shuffle: bool = True) -> list[Batch]:
    """Clip, pad with PAD to the batch maximum, and (optionally) shuffle per epoch."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if clip_len < 1:
        raise ValueError("clip_len must be at least 1")
    idx = ds.indices(split)
    if shuffle:
        idx = idx[np.random.default_rng([seed, epoch]).permutation(idx.size)]
    batches = []
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        ids, lengths = pad_sequences([ds.sequences[i] for i in chunk], clip_len)
        batches.append(Batch(ids=ids, labels=ds.labels[chunk], lengths=lengths))
    return batches


@dataclass
class LengthSample:
    sequences: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    short: bool

    def __len__(self) -> int:
        return len(self.indices)


def sample_by_length(ds: TextDataset, d_s: int, n: int, seed: int = 0,
                     split: str | None = None) -> LengthSample:
    """Draw ``n`` examples with at least ``d_s`` tokens, clipped to exactly ``d_s``.

    When fewer than ``n`` qualify, all qualifying examples are returned with
    ``short=True`` and a warning is emitted.
    """
    idx = ds.indices(split)
    qualifying = np.array([i for i in idx if len(ds.sequences[i]) >= d_s], dtype=np.int64)
    short = qualifying.size < n
    if short:
        warnings.warn(f"only {qualifying.size} examples have >= {d_s} tokens (wanted {n})", stacklevel=2)
        chosen = qualifying
    else:
        rng = np.random.default_rng([seed, d_s])
        chosen = np.sort(rng.choice(qualifying, size=n, replace=False))
    seqs = np.array([ds.sequences[i][:d_s] for i in chosen], dtype=np.int64).reshape(len(chosen), d_s)
    return LengthSample(sequences=seqs, labels=ds.labels[chosen], indices=chosen, short=short)


def random_sequences(n: int, d_s: int, vocab_size: int, seed: int = 0) -> np.ndarray:
    """Uniform token ids (PAD and UNK excluded) for runs without a corpus."""
    if vocab_size <= 2:
        raise ValueError("vocab_size must exceed the two reserved indices")
    rng = np.random.default_rng([seed, d_s])
    return rng.integers(2, vocab_size, size=(n, d_s))


def _write_rows(dst, rows: Iterable[tuple[str, str]]) -> int:
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(dst, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "text"])
        for row in rows:
            writer.writerow(row)
            n += 1
    return n


def convert_trec(src, dst) -> int:
    """Rewrite a raw TREC question file (``COARSE:fine question``) as ``label,text`` CSV.

    Only the coarse label is kept (six classes).  Returns the row count.
    """
    rows = []
    for line in Path(src).read_bytes().decode("latin-1").splitlines():
        if not line.strip():
            continue
        label, _, rest = line.partition(" ")
        rows.append((label.split(":", 1)[0], rest.strip()))
    return _write_rows(dst, rows)


def convert_imdb(src_dir, dst, limit: int | None = None, seed: int = 0) -> int:
    """Collect ``pos``/``neg`` review files from one split directory of the IMDB archive.

    With ``limit`` a seeded random subset of that many reviews is kept.
    """
    src_dir = Path(src_dir)
    rows = []
    for label in ("neg", "pos"):
        for f in sorted((src_dir / label).glob("*.txt")):
            rows.append((label, f.read_text(encoding="utf-8")))
    if not rows:
        raise FileNotFoundError(f"no reviews under {src_dir}/{{pos,neg}}")
    if limit is not None and limit < len(rows):
        keep = np.sort(np.random.default_rng(seed).choice(len(rows), size=limit, replace=False))
        rows = [rows[i] for i in keep]
    return _write_rows(dst, rows)
