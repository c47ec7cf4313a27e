import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfct.augment import (
    interest_center,
    label_negative,
    lemma2_exact_distribution,
    lemma2_monte_carlo,
    relative_rank,
    sample_negative_pair,
)
from cfct.encoder import EmbeddingTable, init_embeddings


def enumerate_pairs(scores, alpha):
    """Independent oracle: walk every unordered pair and apply the labeling rule."""
    n = len(scores)
    p = [0.0] * n
    pairs = list(itertools.combinations(range(n), 2))
    for a, b in pairs:
        if scores[a] == scores[b]:
            p[a] += 0.5
            p[b] += 0.5
        else:
            hi, lo = (a, b) if scores[a] > scores[b] else (b, a)
            p[hi] += alpha
            p[lo] += 1 - alpha
    return np.array(p) / len(pairs)


class TestInterestCenter:
    def test_single_item_is_exact(self):
        t = init_embeddings(1, 5, 3, seed=0)
        c = interest_center(t, {2}, 1, np.random.default_rng(0))
        assert np.array_equal(c.vec, t.item_vecs[2])

    def test_mean_of_two(self):
        t = EmbeddingTable(np.ones((1, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]))
        c = interest_center(t, {0, 1}, 2, np.random.default_rng(0))
        assert np.array_equal(c.vec, [0.5, 0.5])

    def test_clamps_to_available(self):
        t = init_embeddings(1, 10, 4, seed=0)
        c = interest_center(t, {1, 4, 7}, 8, np.random.default_rng(0))
        assert sorted(c.source_items) == [1, 4, 7]
        assert np.allclose(c.vec, t.item_vecs[[1, 4, 7]].mean(axis=0))

    def test_shared_vector_idempotent(self):
        v = np.array([0.3, -1.7, 2.2])
        t = EmbeddingTable(np.ones((1, 3)), np.tile(v, (6, 1)))
        c = interest_center(t, set(range(6)), 4, np.random.default_rng(1))
        assert np.array_equal(c.vec, v)

    def test_no_positives(self):
        with pytest.raises(ValueError, match="no positives"):
            interest_center(init_embeddings(1, 3, 2, 0), set(), 2, np.random.default_rng(0))

    def test_sampling_without_replacement_is_uniform(self):
        t = init_embeddings(1, 6, 2, seed=0)
        rng = np.random.default_rng(3)
        counts = np.zeros(6)
        trials = 20_000
        for _ in range(trials):
            c = interest_center(t, range(6), 2, rng)
            assert len(set(c.source_items)) == 2
            counts[c.source_items] += 1
        p = 2 / 6
        assert np.all(np.abs(counts / trials - p) < 4 * math.sqrt(p * (1 - p) / trials))


class TestNegativePair:
    def test_forced_pair(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert set(sample_negative_pair({0}, 3, rng)) == {1, 2}

    def test_too_few_negatives(self):
        with pytest.raises(ValueError):
            sample_negative_pair({0}, 2, np.random.default_rng(0))

    def test_never_positive(self):
        rng = np.random.default_rng(1)
        pos = set(range(0, 50, 3))
        for _ in range(500):
            j, jp = sample_negative_pair(pos, 50, rng)
            assert j != jp and j not in pos and jp not in pos

    def test_unordered_pairs_uniform(self):
        n, trials = 100, 100_000
        rng = np.random.default_rng(2024)
        counts = {}
        for _ in range(trials):
            j, jp = sample_negative_pair(np.zeros(0, dtype=np.int64), n, rng)
            key = (min(j, jp), max(j, jp))
            counts[key] = counts.get(key, 0) + 1
        p = 1 / math.comb(n, 2)
        sd = math.sqrt(trials * p * (1 - p))
        full = np.array([counts.get(k, 0) for k in itertools.combinations(range(n), 2)])
        # 4950 cells: a handful of chance breaches of a 4 sigma band is expected
        # (about 0.7 under the exact binomial tail); six or more has p < 1e-4
        outside = int(np.sum(np.abs(full - trials * p) > 4 * sd))
        assert outside <= 5
        chi2 = float(((full - trials * p) ** 2 / (trials * p)).sum())
        df = full.size - 1
        assert abs(chi2 - df) < 5 * math.sqrt(2 * df)


class TestLabelNegative:
    def test_alpha_one_takes_max(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = label_negative(0.9, 0.1, 1.0, rng, candidates=(4, 7))
            assert c.selected == 4 and c.took_max

    def test_alpha_zero_takes_min(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert label_negative(0.9, 0.1, 0.0, rng, candidates=(4, 7)).selected == 7

    def test_half_is_fair(self):
        rng = np.random.default_rng(9)
        trials = 100_000
        hits = sum(label_negative(0.9, 0.1, 0.5, rng).selected == 0 for _ in range(trials))
        assert abs(hits / trials - 0.5) <= 4 * math.sqrt(0.25 / trials)

    def test_tie_is_fair(self):
        rng = np.random.default_rng(4)
        trials = 20_000
        hits = sum(label_negative(0.3, 0.3, 1.0, rng).selected == 0 for _ in range(trials))
        assert abs(hits / trials - 0.5) <= 4 * math.sqrt(0.25 / trials)

    def test_selected_is_candidate(self):
        c = label_negative(0.2, 0.4, 0.7, np.random.default_rng(0), candidates=(10, 11))
        assert c.selected in c.candidates

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            label_negative(0.0, 1.0, 1.5, np.random.default_rng(0))


class TestRankSelectionExact:
    def test_three_items_alpha_one(self):
        assert np.allclose(lemma2_exact_distribution([0.1, 0.5, 0.9], 1.0), [0, 1 / 3, 2 / 3], atol=1e-15)

    def test_three_items_alpha_075(self):
        assert np.allclose(lemma2_exact_distribution([0.1, 0.5, 0.9], 0.75), [1 / 6, 1 / 3, 1 / 2], atol=1e-15)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=25), st.floats(0, 1))
    def test_matches_pair_walk(self, scores, alpha):
        exact = lemma2_exact_distribution(scores, alpha)
        assert np.allclose(exact, enumerate_pairs(scores, alpha), atol=1e-13)
        assert abs(exact.sum() - 1.0) < 1e-12

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=25))
    def test_half_is_uniform(self, scores):
        assert np.allclose(lemma2_exact_distribution(scores, 0.5), 1 / len(scores), atol=1e-14)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=25, unique=True), st.floats(0.5, 1.0))
    def test_monotone_in_rank(self, scores, alpha):
        s = np.array(scores)
        p = lemma2_exact_distribution(s, alpha)[np.argsort(s)]
        assert np.all(np.diff(p) >= -1e-15)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=40, unique=True), st.floats(0, 1))
    def test_affine_in_rank(self, scores, alpha):
        s = np.array(scores)
        n = s.size
        r = relative_rank(s)
        # rank among the other items is k = n*r - 1, so P = [alpha*k + (1-alpha)*(n-1-k)] / C(n,2)
        k = n * r - 1
        expected = (alpha * k + (1 - alpha) * (n - 1 - k)) / math.comb(n, 2)
        assert np.allclose(lemma2_exact_distribution(s, alpha), expected, atol=1e-13)

    def test_too_small(self):
        with pytest.raises(ValueError):
            lemma2_exact_distribution([1.0], 0.7)


def test_relative_rank():
    r = relative_rank([0.2, 0.9, -1.0])
    assert np.allclose(r, [2 / 3, 1.0, 1 / 3])
    assert relative_rank([1.0, 1.0]).tolist() == [1.0, 1.0]


@pytest.fixture(scope="module")
def scores():
    return np.random.default_rng(0).permutation(np.linspace(-1, 1, 100))


class TestRankSelectionMonteCarlo:
    def test_alpha_one(self, scores):
        rep = lemma2_monte_carlo(scores, 1.0, 1_000_000, np.random.default_rng(1))
        assert rep.r2 >= 0.99
        assert np.all(rep.binomial_z() <= 5)
        low = rep.slope / scores.size + rep.intercept
        assert abs(low) < 4 * max(rep.slope_stderr, 1e-5)

    def test_alpha_half_flat(self, scores):
        rep = lemma2_monte_carlo(scores, 0.5, 1_000_000, np.random.default_rng(2))
        assert abs(rep.slope_t) < 4
        assert np.all(rep.binomial_z() <= 5)

    def test_csv(self, scores, tmp_path):
        rep = lemma2_monte_carlo(scores[:10], 0.75, 10_000, np.random.default_rng(3))
        rep.write_csv(tmp_path / "l2.csv")
        lines = (tmp_path / "l2.csv").read_text().splitlines()
        assert lines[0] == "item_id,score,relative_rank,exact_prob,empirical_freq"
        assert len(lines) == 11
        row = lines[1].split(",")
        assert float(row[1]) == scores[0] and float(row[3]) == rep.exact_prob[0]

    def test_needs_trials(self, scores):
        with pytest.raises(ValueError):
            lemma2_monte_carlo(scores, 0.7, 100, np.random.default_rng(0))


def _time_sampling(num_items, reps, rng):
    pos = np.sort(rng.choice(num_items, 50, replace=False))
    scores = rng.normal(size=num_items)
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(reps):
            j, jp = sample_negative_pair(pos, num_items, rng)
            label_negative(scores[j], scores[jp], 0.8, rng, (j, jp))
        best = min(best, time.perf_counter() - t0)
    return best


def test_sampling_cost_independent_of_catalog():
    rng = np.random.default_rng(0)
    _time_sampling(1000, 100, rng)
    small = _time_sampling(1_000, 5_000, rng)
    large = _time_sampling(100_000, 5_000, rng)
    assert large / small <= 1.5
