"""Positive feature augmentation and negative label augmentation.

Interest centers average a few sampled positives; labeled negatives come
from a two-candidate accept-reject draw that keeps the higher-scored item
with probability ``alpha``. The ``lemma2_*`` helpers check the resulting
selection distribution exactly (pair enumeration) and by simulation.

Samplers that the training kernels reuse are numba functions taking a
``numpy.random.Generator``; the public wrappers accept the same generator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .encoder import EmbeddingTable


@dataclass(frozen=True)
class InterestCenter:
    vec: np.ndarray
    source_items: np.ndarray


@dataclass(frozen=True)
class NegativeChoice:
    candidates: tuple[int, int]
    selected: int
    took_max: bool


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True, inline="always")
def randint(rng, n):
    """Uniform int in [0, n); an order of magnitude cheaper than rng.integers under numba."""
    k = int(rng.random() * n)
    return k if k < n else n - 1


@numba.njit(cache=True, inline="always")
def contains_sorted(arr, x):
    lo = 0
    hi = arr.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo < arr.shape[0] and arr[lo] == x


@numba.njit(cache=True)
def sample_distinct(rng, n, m, out):
    """Floyd's algorithm: m distinct ints from [0, n) into out[:m]."""
    filled = 0
    for j in range(n - m, n):
        t = randint(rng, j + 1)
        dup = False
        for k in range(filled):
            if out[k] == t:
                dup = True
                break
        out[filled] = j if dup else t
        filled += 1
    return filled


@numba.njit(cache=True)
def sample_negative(rng, pos_sorted, num_items):
    while True:
        j = randint(rng, num_items)
        if not contains_sorted(pos_sorted, j):
            return j


@numba.njit(cache=True)
def sample_negative_pair_kernel(rng, pos_sorted, num_items):
    j = sample_negative(rng, pos_sorted, num_items)
    while True:
        jp = sample_negative(rng, pos_sorted, num_items)
        if jp != j:
            return j, jp


@numba.njit(cache=True)
def label_kernel(rng, x_j, x_jp, alpha):
    """Return (pick_second, took_max)."""
    took_max = rng.random() < alpha
    if x_j == x_jp:
        return rng.random() < 0.5, took_max
    second_higher = x_jp > x_j
    return second_higher == took_max, took_max


# ---------------------------------------------------------------- public API


def _sorted_unique(items) -> np.ndarray:
    return np.unique(np.fromiter(items, dtype=np.int64)) if not isinstance(items, np.ndarray) \
        else np.unique(items.astype(np.int64))


def interest_center(table: EmbeddingTable, train_pos, M: int, rng: np.random.Generator) -> InterestCenter:
    """Mean embedding of min(M, |train_pos|) positives drawn without replacement.

    Backpropagating through the center hands each sampled item 1/M_eff of
    the center gradient.
    """
    pos = np.asarray(sorted(train_pos) if not isinstance(train_pos, np.ndarray) else train_pos, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("user has no positives")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    m = min(M, pos.size)
    slots = np.empty(m, dtype=np.int64)
    sample_distinct(rng, pos.size, m, slots)
    items = pos[slots]
    return InterestCenter(table.item_vecs[items].mean(axis=0), items)


def sample_negative_pair(train_pos, num_items: int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct items drawn uniformly from outside ``train_pos``."""
    pos = _sorted_unique(train_pos)
    in_range = int(np.count_nonzero((pos >= 0) & (pos < num_items)))
    if num_items - in_range < 2:
        raise ValueError(f"need at least 2 negatives, catalog has {num_items - in_range}")
    j, jp = sample_negative_pair_kernel(rng, pos, num_items)
    return int(j), int(jp)


def label_negative(x_j: float, x_jp: float, alpha: float, rng: np.random.Generator,
                   candidates: tuple[int, int] = (0, 1)) -> NegativeChoice:
    """Label one of two candidates as the negative.

    With probability ``alpha`` the higher-scored candidate wins, otherwise
    the lower-scored one. Exact ties are broken by a fair coin.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    second, took_max = label_kernel(rng, float(x_j), float(x_jp), float(alpha))
    return NegativeChoice(tuple(candidates), candidates[1] if second else candidates[0], bool(took_max))


def relative_rank(scores) -> np.ndarray:
    """r_j = (1/n) * #{l : s_l <= s_j}; the top item gets 1."""
    s = np.asarray(scores, dtype=np.float64)
    return np.searchsorted(np.sort(s), s, side="right") / s.size


def lemma2_exact_distribution(scores, alpha: float) -> np.ndarray:
    """Exact selection probability of every item, by enumerating all pairs."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n < 2:
        raise ValueError("need at least 2 items")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    prob = np.zeros(n)
    n_pairs = n * (n - 1) / 2
    for a in range(n - 1):
        other = s[a + 1:]
        # share of pair (a, b) that goes to a
        to_a = np.where(s[a] > other, alpha, np.where(s[a] < other, 1.0 - alpha, 0.5))
        prob[a] += to_a.sum()
        prob[a + 1:] += 1.0 - to_a
    return prob / n_pairs


@dataclass(frozen=True)
class Lemma2Report:
    scores: np.ndarray
    relative_rank: np.ndarray
    exact_prob: np.ndarray
    empirical_freq: np.ndarray
    trials: int
    slope: float
    intercept: float
    r2: float
    slope_stderr: float

    @property
    def slope_t(self) -> float:
        return self.slope / self.slope_stderr if self.slope_stderr > 0 else float("inf")

    def binomial_z(self) -> np.ndarray:
        """Per-item |empirical - exact| in binomial standard deviations."""
        sd = np.sqrt(self.exact_prob * (1.0 - self.exact_prob) / self.trials)
        dev = np.abs(self.empirical_freq - self.exact_prob)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, dev / np.where(sd > 0, sd, 1.0), np.where(dev > 0, np.inf, 0.0))
        return z

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "score", "relative_rank", "exact_prob", "empirical_freq"])
            for k in range(self.scores.size):
                w.writerow([k, repr(float(self.scores[k])), repr(float(self.relative_rank[k])),
                            repr(float(self.exact_prob[k])), repr(float(self.empirical_freq[k]))])


def affine_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    """Least-squares y = slope*x + intercept; returns (slope, intercept, R^2, slope stderr)."""
    n = x.size
    X = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    sxx = float(((x - x.mean()) ** 2).sum())
    stderr = np.sqrt(ss_res / (n - 2) / sxx) if n > 2 and sxx > 0 else 0.0
    return float(coef[0]), float(coef[1]), r2, float(stderr)


def simulate_selection(scores: np.ndarray, alpha: float, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Selection counts from ``trials`` independent pair draws plus labeling."""
    n = scores.size
    j = rng.integers(0, n, size=trials)
    jp = (j + 1 + rng.integers(0, n - 1, size=trials)) % n
    take_max = rng.random(trials) < alpha
    sj, sjp = scores[j], scores[jp]
    tie = sj == sjp
    second_higher = np.where(tie, rng.random(trials) < 0.5, sjp > sj)
    pick_second = np.where(tie, second_higher, second_higher == take_max)
    chosen = np.where(pick_second, jp, j)
    return np.bincount(chosen, minlength=n)


def lemma2_monte_carlo(scores, alpha: float, trials: int, rng: np.random.Generator) -> Lemma2Report:
    """Empirical selection frequencies and their affine fit against relative rank."""
    s = np.asarray(scores, dtype=np.float64)
    if trials < 10_000:
        raise ValueError("need at least 10^4 trials")
    if s.size < 2:
        raise ValueError("need at least 2 items")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    counts = np.zeros(s.size, dtype=np.int64)
    chunk = 1 << 20
    done = 0
    while done < trials:
        step = min(chunk, trials - done)
        counts += simulate_selection(s, alpha, step, rng)
        done += step
    freq = counts / trials
    rr = relative_rank(s)
    slope, intercept, r2, se = affine_fit(rr, freq)
    return Lemma2Report(s, rr, lemma2_exact_distribution(s, alpha), freq, trials, slope, intercept, r2, se)
