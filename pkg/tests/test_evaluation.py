import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfct.encoder import EmbeddingTable, init_embeddings
from cfct.evaluation import RankingReport, evaluate, metrics_at_k, rank_for_user
from cfct.ingest import InteractionDataset


def make_dataset(train, test, num_items):
    arr = lambda xs: tuple(np.array(sorted(x), dtype=np.int64) for x in xs)
    n = len(train)
    return InteractionDataset(
        num_users=n, num_items=num_items, train_pos=arr(train), test_pos=arr(test),
        user_tokens=tuple(f"u{u}" for u in range(n)), item_tokens=tuple(f"i{i}" for i in range(num_items)),
        seed=0, test_fraction=0.2)


def one_hot_table(scores):
    """Table whose dot scores equal ``scores`` (users x items)."""
    scores = np.asarray(scores, dtype=float)
    return EmbeddingTable(scores.copy(), np.eye(scores.shape[1]))


def brute_force(scores, train, test, K):
    """Reference: full sort with explicit tie rule, set intersection, textbook DCG."""
    out = {"precision": [], "recall": [], "ndcg": []}
    for u, row in enumerate(scores):
        if not test[u]:
            continue
        ranked = sorted((i for i in range(len(row)) if i not in train[u]), key=lambda i: (-row[i], i))[:K]
        hits = [r for r, i in enumerate(ranked, start=1) if i in test[u]]
        dcg = sum(1 / math.log2(r + 1) for r in hits)
        idcg = sum(1 / math.log2(r + 1) for r in range(1, min(K, len(test[u])) + 1))
        out["precision"].append(len(hits) / K)
        out["recall"].append(len(hits) / len(test[u]))
        out["ndcg"].append(dcg / idcg)
    return {m: math.fsum(v) / len(v) for m, v in out.items()}


def random_instance(rng):
    n_items = int(rng.integers(6, 21))
    n_users = int(rng.integers(1, 11))
    # coarse integer scores so that ties are common
    scores = rng.integers(0, 4, size=(n_users, n_items)).astype(float)
    train, test = [], []
    for _ in range(n_users):
        perm = rng.permutation(n_items)
        a = int(rng.integers(0, 4))
        b = int(rng.integers(0, 4))
        train.append(set(perm[:a].tolist()))
        test.append(set(perm[a:a + b].tolist()))
    if not any(test):
        test[0] = {int(perm[-1])}
        train[0].discard(int(perm[-1]))
    return scores, train, test


class TestMetricsAtK:
    def test_perfect_hit(self):
        assert metrics_at_k([3], {3}, 1) == (1.0, 1.0, 1.0)

    def test_hit_at_two(self):
        p, r, n = metrics_at_k([0, 7], {7}, 2)
        assert (p, r) == (0.5, 1.0)
        assert n == pytest.approx(1 / math.log2(3), rel=1e-15)
        assert n == pytest.approx(0.63093, abs=1e-5)

    def test_no_hits(self):
        assert metrics_at_k([1, 2, 3, 4, 5], {9}, 5) == (0.0, 0.0, 0.0)

    def test_idcg_truncated(self):
        # three test items, K=2, both slots hit -> ideal
        assert metrics_at_k([4, 5], {4, 5, 6}, 2)[2] == 1.0

    def test_empty_test(self):
        with pytest.raises(ValueError):
            metrics_at_k([1], set(), 1)

    def test_short_list(self):
        with pytest.raises(ValueError):
            metrics_at_k([1], {1}, 2)


class TestRankForUser:
    def test_hand_ordering(self):
        ds = make_dataset([{1}], [{2}], 3)
        t = one_hot_table([[0.1, 5.0, 0.7]])
        assert rank_for_user(t, ds, 0, 2).tolist() == [2, 0]

    def test_ties_by_item_id(self):
        ds = make_dataset([{2}], [{0}], 6)
        t = one_hot_table([[1.0] * 6])
        assert rank_for_user(t, ds, 0, 4).tolist() == [0, 1, 3, 4]

    def test_excludes_train(self):
        ds = make_dataset([{0, 3}], [{1}], 5)
        t = one_hot_table([[9, 1, 2, 8, 3]])
        top = rank_for_user(t, ds, 0, 3).tolist()
        assert 0 not in top and 3 not in top

    def test_k_too_large(self):
        ds = make_dataset([{0, 1}], [{2}], 4)
        with pytest.raises(ValueError):
            rank_for_user(one_hot_table([[0, 0, 0, 0]]), ds, 0, 3)

    def test_cosine_ranking(self):
        ds = make_dataset([set()], [{0}], 2)
        # dot prefers the long vector, cosine the aligned one
        t = EmbeddingTable(np.array([[1.0, 0.0]]), np.array([[1.0, 0.1], [3.0, 3.0]]))
        assert rank_for_user(t, ds, 0, 1, "dot").tolist() == [1]
        assert rank_for_user(t, ds, 0, 1, "cosine", tau=0.2).tolist() == [0]


class TestEvaluate:
    def test_perfect_model(self):
        ds = make_dataset([{0}, {1}, set()], [{2}, {3}, set()], 4)
        t = one_hot_table([[0, 0, 5, 1], [0, 0, 1, 5], [0, 0, 0, 0]])
        rep = evaluate(t, ds, cutoffs=[1, 2])
        assert rep.precision[1] == rep.recall[1] == rep.ndcg[1] == 1.0
        assert rep.num_evaluated_users == 2

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            scores, train, test = random_instance(rng)
            ds = make_dataset(train, test, scores.shape[1])
            K = int(min(rng.integers(1, 6), scores.shape[1] - max(len(t) for t in train)))
            rep = evaluate(one_hot_table(scores), ds, cutoffs=[K])
            ref = brute_force(scores, train, test, K)
            assert rep.precision[K] == ref["precision"]
            assert rep.recall[K] == ref["recall"]
            assert rep.ndcg[K] == ref["ndcg"]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_recall_monotone_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        scores, train, test = random_instance(rng)
        ds = make_dataset(train, test, scores.shape[1])
        top = scores.shape[1] - max(len(t) for t in train)
        rep = evaluate(one_hot_table(scores), ds, cutoffs=range(1, top + 1))
        r = [rep.recall[k] for k in range(1, top + 1)]
        assert all(b >= a for a, b in zip(r, r[1:]))
        assert all(0 <= v <= 1 for _, _, v in rep.rows())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores, train, test = random_instance(rng)
        scores = scores + rng.permutation(scores.size).reshape(scores.shape) * 1e-3  # distinct
        n = scores.shape[1]
        perm = rng.permutation(n)  # old id -> new id
        new_scores = np.empty_like(scores)
        new_scores[:, perm] = scores
        relabel = lambda xs: [{int(perm[i]) for i in s} for s in xs]
        K = min(3, n - max(len(t) for t in train))
        a = evaluate(one_hot_table(scores), make_dataset(train, test, n), cutoffs=[K])
        b = evaluate(one_hot_table(new_scores), make_dataset(relabel(train), relabel(test), n), cutoffs=[K])
        assert a.rows() == b.rows()

    def test_random_embeddings_chance_level(self, ml100k):
        t = init_embeddings(ml100k.num_users, ml100k.num_items, 64, seed=0)
        assert evaluate(t, ml100k).precision[5] < 0.1

    def test_empty_cutoffs(self):
        ds = make_dataset([set()], [{0}], 2)
        with pytest.raises(ValueError):
            evaluate(one_hot_table([[0, 1]]), ds, cutoffs=[])


class TestReport:
    def test_csv_round_trip(self):
        rep = RankingReport({5: 0.1, 10: 1 / 3}, {5: 0.2, 10: 2 / 7}, {5: 0.3, 10: math.pi / 4}, 9)
        text = rep.to_csv()
        assert text.splitlines()[0] == "metric,K,value"
        assert len(text.splitlines()) == 7
        back = RankingReport.from_csv(text, 9)
        assert back == rep

    def test_json(self):
        import json

        rep = RankingReport({5: 0.5}, {5: 0.25}, {5: 0.75}, 3)
        assert json.loads(rep.to_json()) == {
            "num_evaluated_users": 3, "precision": {"5": 0.5}, "recall": {"5": 0.25}, "ndcg": {"5": 0.75}}
