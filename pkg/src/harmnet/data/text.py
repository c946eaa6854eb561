"""Tokenisation, vocabulary and fixed-length encoding."""

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..errors import DataError
from ..io_utils import atomic_write_text
from .labels import get_schema, map_label

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


def tokenize(text: str) -> List[str]:
    """Split on whitespace runs and lowercase; nothing else."""
    return [tok.lower() for tok in text.split()]


class Vocabulary:
    """token -> id map with 0 = padding and 1 = unknown."""

    def __init__(self, tokens: Sequence[str], counts: Dict[str, int]):
        self.itos = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.counts = dict(counts)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.counts == other.counts

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.itos, ensure_ascii=False).encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        entries = [[tok, i, self.counts.get(tok, 0)] for i, tok in enumerate(self.itos)]
        return json.dumps({"hash": self.content_hash, "entries": entries}, ensure_ascii=False, indent=0)

    def save(self, path):
        atomic_write_text(path, self.to_json())

    @classmethod
    def from_json(cls, text: str):
        obj = json.loads(text)
        entries = sorted(obj["entries"], key=lambda e: e[1])
        if [e[1] for e in entries] != list(range(len(entries))) or entries[0][0] != PAD_TOKEN:
            raise DataError("vocabulary file ids are not contiguous from 0")
        vocab = cls([e[0] for e in entries[2:]], {e[0]: e[2] for e in entries[2:]})
        if obj.get("hash") and obj["hash"] != vocab.content_hash:
            raise DataError("vocabulary file hash does not match its contents")
        return vocab

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def build_vocab(texts: Iterable, min_count: int = 1) -> Vocabulary:
    """Ids from 2 upward by descending frequency, ties lexicographic.

    ``texts`` may hold raw strings, token lists or objects with ``.text``.
    """
    counts = Counter()
    n_docs = 0
    for item in texts:
        n_docs += 1
        if hasattr(item, "text"):
            item = item.text
        counts.update(tokenize(item) if isinstance(item, str) else item)
    if n_docs == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


@dataclass
class EncodedReport:
    ids: np.ndarray  # int64 [n_max]
    mask: np.ndarray  # bool [n_max]
    label: int


def encode_tokens(tokens: Sequence[str], vocab: Vocabulary, n_max: int):
    """Head-crop to ``n_max`` and right-pad with zeros; returns ``(ids, mask)``."""
    kept = tokens[:n_max]
    ids = np.zeros(n_max, np.int64)
    ids[:len(kept)] = vocab.ids(kept)
    mask = np.zeros(n_max, bool)
    mask[:len(kept)] = True
    return ids, mask


def encode(report, vocab: Vocabulary, schema, n_max: int) -> EncodedReport:
    if report.severity is None:
        raise DataError("cannot encode an unlabeled report")
    ids, mask = encode_tokens(tokenize(report.text), vocab, n_max)
    return EncodedReport(ids, mask, map_label(report.severity, get_schema(schema)))


def encode_batch(reports, vocab: Vocabulary, n_max: int, schema=None):
    """Stack reports into ``(ids [N, n_max], mask, labels or None)``."""
    ids = np.zeros((len(reports), n_max), np.int64)
    mask = np.zeros((len(reports), n_max), bool)
    labels = None if schema is None else np.zeros(len(reports), np.int64)
    for i, r in enumerate(reports):
        ids[i], mask[i] = encode_tokens(tokenize(r.text), vocab, n_max)
        if schema is not None:
            if r.severity is None:
                raise DataError(f"report {i} is unlabeled")
            labels[i] = map_label(r.severity, get_schema(schema))
    return ids, mask, labels
