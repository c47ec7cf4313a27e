"""Matrix-factorization embedding tables, similarity scores and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

MAGIC = b"CFCT"
FORMAT_VERSION = 1
INIT_STD = 0.1


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    user_vecs: np.ndarray
    item_vecs: np.ndarray

    def __post_init__(self):
        if self.user_vecs.ndim != 2 or self.item_vecs.ndim != 2:
            raise ValueError("embedding tables must be 2-d")
        if self.user_vecs.shape[1] != self.item_vecs.shape[1]:
            raise ValueError("user and item dims differ")
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")

    @property
    def dim(self) -> int:
        return self.user_vecs.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_vecs.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_vecs.copy(), self.item_vecs.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.user_vecs).all() and np.isfinite(self.item_vecs).all())

    def as_float32(self) -> "EmbeddingTable":
        """Round-trip through the checkpoint precision."""
        return EmbeddingTable(
            self.user_vecs.astype(np.float32).astype(np.float64),
            self.item_vecs.astype(np.float32).astype(np.float64),
        )


def init_embeddings(num_users: int, num_items: int, d: int, seed: int) -> EmbeddingTable:
    """Draw both tables i.i.d. from N(0, 0.1^2)."""
    if d < 1:
        raise ValueError("embedding dim d must be >= 1")
    if num_users < 1 or num_items < 1:
        raise ValueError("num_users and num_items must be >= 1")
    rng = np.random.default_rng(seed)
    users = rng.normal(0.0, INIT_STD, size=(num_users, d))
    items = rng.normal(0.0, INIT_STD, size=(num_items, d))
    return EmbeddingTable(users, items)


def _check_id(idx: int, n: int, what: str) -> None:
    if not 0 <= idx < n:
        raise IndexError(f"{what} id {idx} out of range [0, {n})")


def score_dot(table: EmbeddingTable, u: int, i: int) -> float:
    _check_id(u, table.num_users, "user")
    _check_id(i, table.num_items, "item")
    return float(table.user_vecs[u] @ table.item_vecs[i])


@numba.njit(cache=True)
def _cos_tau(a, b, tau):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for k in range(a.shape[0]):
        dot += a[k] * b[k]
        na += a[k] * a[k]
        nb += b[k] * b[k]
    return dot / (np.sqrt(na) * np.sqrt(nb) * tau)


def score_cos_tau(user_vec: np.ndarray, target_vec: np.ndarray, tau: float) -> float:
    """Cosine similarity divided by the temperature ``tau``."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    a = np.asarray(user_vec, dtype=np.float64)
    b = np.asarray(target_vec, dtype=np.float64)
    if not (np.linalg.norm(a) > 0 and np.linalg.norm(b) > 0):
        raise DegenerateEmbeddingError("degenerate embedding")
    return float(_cos_tau(a, b, float(tau)))


def score_matrix(table: EmbeddingTable, similarity: str = "dot", tau: float = 1.0,
                 users: np.ndarray | None = None) -> np.ndarray:
    """Scores of every item for the given users (all users by default)."""
    U = table.user_vecs if users is None else table.user_vecs[users]
    V = table.item_vecs
    if similarity == "dot":
        return U @ V.T
    if similarity == "cosine":
        un = np.linalg.norm(U, axis=1, keepdims=True)
        vn = np.linalg.norm(V, axis=1, keepdims=True)
        if (un == 0).any() or (vn == 0).any():
            raise DegenerateEmbeddingError("degenerate embedding")
        return (U / un) @ (V / vn).T / tau
    raise ValueError(f"unknown similarity {similarity!r}")


def save_checkpoint(table: EmbeddingTable, path: str | Path) -> None:
    header = MAGIC + struct.pack("<IIII", FORMAT_VERSION, table.num_users, table.num_items, table.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(table.user_vecs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(table.item_vecs, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, nu, ni, d = struct.unpack("<IIII", data[4:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    expected = 20 + 4 * d * (nu + ni)
    if len(data) != expected:
        raise ValueError(f"{path}: truncated checkpoint ({len(data)} of {expected} bytes)")
    body = np.frombuffer(data, dtype="<f4", offset=20)
    users = body[: nu * d].reshape(nu, d).astype(np.float64)
    items = body[nu * d:].reshape(ni, d).astype(np.float64)
    return EmbeddingTable(users, items)
