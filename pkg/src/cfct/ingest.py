"""Interaction-log parsing and per-user train/test splitting."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

FORMATS = ("tsv-4col", "csv-3col")


class ParseError(ValueError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    weight: float | None = None

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item tokens must be non-empty")


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_interactions(source: BinaryIO | bytes | str, format: str = "tsv-4col") -> list[RawInteraction]:
    """Parse an interaction log into ``RawInteraction`` records.

    Ratings are kept on the record for reference only; every rated item
    counts as a positive. ``source`` may be a binary stream, raw bytes or
    already-decoded text.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read().decode("utf-8")

    sep, ncol = ("\t", 4) if format == "tsv-4col" else (",", 3)
    out: list[RawInteraction] = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(sep)]
        if format == "csv-3col" and lineno == 1 and len(parts) == ncol and not _is_number(parts[2]):
            continue  # header row
        if len(parts) != ncol:
            raise ParseError(lineno, line, f"expected {ncol} fields, got {len(parts)}")
        user, item, rating = parts[0], parts[1], parts[2]
        if not user or not item:
            raise ParseError(lineno, line, "empty user or item token")
        if not _is_number(rating):
            raise ParseError(lineno, line, "rating is not numeric")
        if format == "tsv-4col" and not _is_number(parts[3]):
            raise ParseError(lineno, line, "timestamp is not numeric")
        out.append(RawInteraction(user, item, float(rating)))
    return out


def read_interactions(path: str | Path, format: str = "tsv-4col") -> list[RawInteraction]:
    with open(path, "rb") as fh:
        return parse_interactions(fh, format)


@dataclass(frozen=True)
class InteractionDataset:
    """Implicit-feedback interactions split into per-user train/test sets.

    ``train_pos[u]`` and ``test_pos[u]`` are sorted int64 arrays. The
    negative set of a user is the complement of ``train_pos[u]`` and is
    never materialized.
    """

    num_users: int
    num_items: int
    train_pos: tuple[np.ndarray, ...]
    test_pos: tuple[np.ndarray, ...]
    user_tokens: tuple[str, ...]
    item_tokens: tuple[str, ...]
    seed: int = 0
    test_fraction: float = 0.2
    _user_index: dict = field(default_factory=dict, repr=False, compare=False)
    _item_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._user_index.update({t: i for i, t in enumerate(self.user_tokens)})
        self._item_index.update({t: i for i, t in enumerate(self.item_tokens)})

    def encode_user(self, token: str) -> int:
        return self._user_index[token]

    def encode_item(self, token: str) -> int:
        return self._item_index[token]

    def decode_user(self, uid: int) -> str:
        return self.user_tokens[uid]

    def decode_item(self, iid: int) -> str:
        return self.item_tokens[iid]

    @property
    def num_train(self) -> int:
        return sum(len(p) for p in self.train_pos)

    @property
    def num_test(self) -> int:
        return sum(len(p) for p in self.test_pos)

    def train_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Train positives as (indptr, indices) with sorted rows."""
        lens = np.fromiter((len(p) for p in self.train_pos), dtype=np.int64, count=self.num_users)
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        indices = np.concatenate(self.train_pos) if self.num_users else np.zeros(0, np.int64)
        return indptr, indices.astype(np.int64)

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All training (user, item) pairs in user-major order."""
        indptr, indices = self.train_csr()
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), np.diff(indptr))
        return users, indices

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "num_users": self.num_users,
            "num_items": self.num_items,
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2) + "\n")


def _num_test(n: int, test_fraction: float) -> int:
    # guard against 0.1 * 30 style float noise landing just below an integer
    k = math.floor(test_fraction * n + 1e-9)
    return k if k < n else 0


def build_dataset(raw: Iterable[RawInteraction], test_fraction: float = 0.2, seed: int = 0) -> InteractionDataset:
    """Reindex tokens densely and split each user's items into train/test.

    Ids follow first-appearance order. Each user contributes
    ``floor(test_fraction * n_u)`` test items chosen uniformly at random;
    users left with no train items keep everything in train.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    raw = list(raw)
    if not raw:
        raise ValueError("empty dataset")

    users: dict[str, int] = {}
    items: dict[str, int] = {}
    per_user: list[dict[int, None]] = []
    for r in raw:
        u = users.setdefault(r.user, len(users))
        i = items.setdefault(r.item, len(items))
        if u == len(per_user):
            per_user.append({})
        per_user[u][i] = None  # ordered set, collapses duplicates

    rng = np.random.default_rng(seed)
    train, test = [], []
    for seen in per_user:
        arr = np.fromiter(seen, dtype=np.int64, count=len(seen))
        k = _num_test(len(arr), test_fraction)
        perm = rng.permutation(len(arr))
        test.append(np.sort(arr[perm[:k]]))
        train.append(np.sort(arr[perm[k:]]))

    return InteractionDataset(
        num_users=len(users),
        num_items=len(items),
        train_pos=tuple(train),
        test_pos=tuple(test),
        user_tokens=tuple(users),
        item_tokens=tuple(items),
        seed=seed,
        test_fraction=test_fraction,
    )


def load_dataset(path: str | Path, format: str = "tsv-4col", test_fraction: float = 0.2, seed: int = 0) -> InteractionDataset:
    return build_dataset(read_interactions(path, format), test_fraction, seed)
