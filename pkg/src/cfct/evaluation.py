"""Full-catalog top-K ranking metrics (precision, recall, NDCG)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EmbeddingTable, score_matrix
from .ingest import InteractionDataset

DEFAULT_CUTOFFS = (5, 10, 20)
METRICS = ("precision", "recall", "ndcg")


@dataclass
class RankingReport:
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    num_evaluated_users: int = 0

    def rows(self) -> list[tuple[str, int, float]]:
        return [(m, k, getattr(self, m)[k]) for m in METRICS for k in sorted(self.precision)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "K", "value"])
        for m, k, v in self.rows():
            w.writerow([m, k, repr(v)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def to_json(self) -> str:
        return json.dumps({
            "num_evaluated_users": self.num_evaluated_users,
            **{m: {str(k): v for k, v in getattr(self, m).items()} for m in METRICS},
        }, indent=2)

    @classmethod
    def from_csv(cls, text: str, num_evaluated_users: int = 0) -> "RankingReport":
        rep = cls(num_evaluated_users=num_evaluated_users)
        for row in csv.DictReader(io.StringIO(text)):
            getattr(rep, row["metric"])[int(row["K"])] = float(row["value"])
        return rep


def _rank_scores(scores: np.ndarray, exclude: np.ndarray, k_max: int) -> np.ndarray:
    s = np.array(scores, dtype=np.float64)
    s[exclude] = -np.inf
    # stable sort on the negated scores breaks ties by ascending item id
    return np.argsort(-s, kind="stable")[:k_max]


def rank_for_user(table: EmbeddingTable, dataset: InteractionDataset, u: int, k_max: int,
                  similarity: str = "dot", tau: float = 1.0) -> np.ndarray:
    """Top ``k_max`` items for ``u`` with train positives excluded."""
    if not 0 <= u < dataset.num_users:
        raise IndexError(f"user id {u} out of range")
    available = dataset.num_items - len(dataset.train_pos[u])
    if k_max > available:
        raise ValueError(f"k_max={k_max} exceeds the {available} rankable items")
    scores = score_matrix(table, similarity, tau, users=np.array([u]))[0]
    return _rank_scores(scores, dataset.train_pos[u], k_max)


def metrics_at_k(topk, test_pos, K: int) -> tuple[float, float, float]:
    test = set(int(t) for t in test_pos)
    if not test:
        raise ValueError("empty test set; skip this user")
    if len(topk) < K:
        raise ValueError(f"top-k list has {len(topk)} items, need {K}")
    dcg = 0.0
    hits = 0
    for r, item in enumerate(topk[:K], start=1):
        if int(item) in test:
            hits += 1
            dcg += 1.0 / math.log2(r + 1)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(K, len(test)) + 1))
    return hits / K, hits / len(test), dcg / idcg


def evaluate(table: EmbeddingTable, dataset: InteractionDataset, cutoffs=DEFAULT_CUTOFFS,
             similarity: str = "dot", tau: float = 1.0, block: int = 1024) -> RankingReport:
    """Macro-averaged metrics over users with a non-empty test set."""
    cutoffs = sorted(set(int(k) for k in cutoffs))
    if not cutoffs:
        raise ValueError("cutoffs must be non-empty")
    k_max = cutoffs[-1]
    users = np.array([u for u in range(dataset.num_users) if len(dataset.test_pos[u])], dtype=np.int64)
    per = {m: {k: [] for k in cutoffs} for m in METRICS}
    for start in range(0, users.size, block):
        chunk = users[start:start + block]
        scores = score_matrix(table, similarity, tau, users=chunk)
        for row, u in zip(scores, chunk):
            top = _rank_scores(row, dataset.train_pos[u], k_max)
            for k in cutoffs:
                p, r, n = metrics_at_k(top, dataset.test_pos[u], k)
                per["precision"][k].append(p)
                per["recall"][k].append(r)
                per["ndcg"][k].append(n)
    report = RankingReport(num_evaluated_users=int(users.size))
    for m in METRICS:
        for k in cutoffs:
            vals = per[m][k]
            getattr(report, m)[k] = math.fsum(vals) / len(vals) if vals else 0.0
    return report
