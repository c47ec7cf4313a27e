"""SGD training loops for the interest-center objective and the baselines.

One epoch is one pass over the training interactions in shuffled order.
Each interaction anchors one step: baselines contrast the interaction's
item against uniform negatives; the proposed objective contrasts the
user's interest center against a labeled negative. Updates are sparse
SGD with weight decay applied to the touched rows only.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import augment
from .augment import (InterestCenter, NegativeChoice, label_kernel, randint, sample_distinct,
                      sample_negative, sample_negative_pair_kernel)
from .encoder import DegenerateEmbeddingError, EmbeddingTable, init_embeddings
from .ingest import InteractionDataset
from .losses import LOSS_KINDS, bpr_core, debiased_core, infonce_core

log = logging.getLogger(__name__)

BPR, INFONCE, DCL, HCL, PROPOSED = range(5)
KIND_CODES = {name: code for code, name in enumerate(LOSS_KINDS)}


@dataclass
class HyperParams:
    d: int = 64
    M: int = 4
    alpha: float = 1.0
    tau: float = 0.2
    N: int = 8
    beta: float = 1.0
    tau_plus: float = 0.1
    K: int = 1
    lr: float = 0.05
    l2: float = 1e-4
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    loss_kind: str = "bpr"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        checks = [
            (self.d >= 1, "d must be >= 1"),
            (self.M >= 1, "M must be >= 1"),
            (0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"),
            (self.tau > 0, "tau must be > 0"),
            (self.N >= 1, "N must be >= 1"),
            (self.beta >= 0, "beta must be >= 0"),
            (0.0 <= self.tau_plus < 1.0, "tau_plus must lie in [0, 1)"),
            (self.K >= 1, "K must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.l2 >= 0, "l2 must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def similarity(self) -> str:
        return "cosine" if self.loss_kind == "proposed" else "dot"

    @property
    def num_negatives(self) -> int:
        return 1 if self.loss_kind == "bpr" else self.N

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class AugmentedTriple:
    user: int
    center: InterestCenter
    neg_choice: NegativeChoice


@dataclass
class TrainReport:
    mean_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    checkpoint: str | None = None

    def to_jsonl(self) -> str:
        rows = [json.dumps({"epoch": e + 1, "mean_loss": l, "seconds": s})
                for e, (l, s) in enumerate(zip(self.mean_loss, self.seconds))]
        return "".join(r + "\n" for r in rows)

    def write_jsonl(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


# ---------------------------------------------------------------- gradient kernels


@numba.njit(cache=True, inline="always", fastmath={"reassoc", "contract"})
def _dot(a, b):
    s = 0.0
    for k in range(a.shape[0]):
        s += a[k] * b[k]
    return s


@numba.njit(cache=True)
def _cos_tau(a, b, tau):
    na = np.sqrt(_dot(a, a))
    nb = np.sqrt(_dot(b, b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding")
    return _dot(a, b) / (na * nb * tau)


FAST = {"reassoc", "contract"}


@numba.njit(cache=True, fastmath=FAST)
def proposed_grads(U, V, u, pos_items, q, tau, gu, gpos, gq):
    """Loss and gradients of -log sigmoid(cos(u,p)/tau - cos(u,q)/tau).

    ``p`` is the mean of ``V[pos_items]``; each sampled positive receives
    1/m of the center gradient. Gradients are written (not added) into gu,
    gpos (one row per positive) and gq.
    """
    d = U.shape[1]
    m = pos_items.shape[0]
    center = np.empty(d)
    inv_m = 1.0 / m
    row = V[pos_items[0]]
    for k in range(d):
        center[k] = row[k]
    for r in range(1, m):
        row = V[pos_items[r]]
        for k in range(d):
            center[k] += row[k]
    uvec = U[u]
    qvec = V[q]
    uu = 0.0
    cc = 0.0
    qq = 0.0
    uc = 0.0
    uq = 0.0
    for k in range(d):
        c = center[k] * inv_m
        center[k] = c
        a = uvec[k]
        b = qvec[k]
        uu += a * a
        cc += c * c
        qq += b * b
        uc += a * c
        uq += a * b
    if uu == 0.0 or cc == 0.0 or qq == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding")
    nu = np.sqrt(uu)
    nc = np.sqrt(cc)
    nq = np.sqrt(qq)
    cos_c = uc / (nu * nc)
    cos_q = uq / (nu * nq)
    value, g_up, g_uq = bpr_core(cos_c / tau, cos_q / tau)
    a1 = g_up / (tau * nu * nc)
    a2 = g_uq / (tau * nu * nq)
    u_self = (a1 * cos_c * nc + a2 * cos_q * nq) / nu
    c_u = a1 * inv_m
    c_self = a1 * cos_c * nu / nc * inv_m
    q_self = a2 * cos_q * nu / nq
    for k in range(d):
        a = uvec[k]
        gu[k] = a1 * center[k] + a2 * qvec[k] - u_self * a
        gq[k] = a2 * a - q_self * qvec[k]
    for r in range(m):
        for k in range(d):
            gpos[r, k] = c_u * uvec[k] - c_self * center[k]
    return value


@numba.njit(cache=True, fastmath=FAST)
def baseline_grads(U, V, kind, u, i, negs, extra, tau_plus, beta, log_floor, gu, gi, gneg, gextra):
    """Loss and gradients for the dot-product baselines. Gradients are written into the buffers."""
    uvec = U[u]
    n = negs.shape[0]
    x_pos = _dot(uvec, V[i])
    x_negs = np.empty(n)
    for r in range(n):
        x_negs[r] = _dot(uvec, V[negs[r]])
    dn = np.zeros(n)
    ke = extra.shape[0]
    de = np.zeros(ke)
    if kind == BPR:
        value, dp, dn0 = bpr_core(x_pos, x_negs[0])
        dn[0] = dn0
    elif kind == INFONCE:
        value, dp = infonce_core(x_pos, x_negs, dn)
    else:
        x_extra = np.empty(ke)
        for r in range(ke):
            x_extra[r] = _dot(uvec, V[extra[r]])
        b = beta if kind == HCL else 0.0
        value, dp = debiased_core(x_pos, x_negs, x_extra, tau_plus, b, log_floor,
                                  np.ones(n), False, dn, de)
    d = U.shape[1]
    for k in range(d):
        gu[k] = dp * V[i, k]
        gi[k] = dp * uvec[k]
    for r in range(n):
        for k in range(d):
            gu[k] += dn[r] * V[negs[r], k]
            gneg[r, k] = dn[r] * uvec[k]
    for r in range(ke):
        for k in range(d):
            gu[k] += de[r] * V[extra[r], k]
            gextra[r, k] = de[r] * uvec[k]
    return value


@numba.njit(cache=True, fastmath=FAST)
def _candidate_stats(U, V, u, j, jp):
    """Squared norms and dot products of user u with items j and jp in one pass."""
    uu = 0.0
    jj = 0.0
    pp = 0.0
    uj = 0.0
    up = 0.0
    for k in range(U.shape[1]):
        a = U[u, k]
        b = V[j, k]
        c = V[jp, k]
        uu += a * a
        jj += b * b
        pp += c * c
        uj += a * b
        up += a * c
    if uu == 0.0 or jj == 0.0 or pp == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding")
    return uu, jj, pp, uj, up


@numba.njit(cache=True, fastmath=FAST)
def _proposed_update(U, V, u, pos_items, q, uu, qq, uq, tau, lr, l2, center):
    """SGD step on the proposed loss given the user/negative statistics.

    Works on the summed center s = m * c so no scaled copy is written.
    Every coordinate is updated from pre-step values only; with a single
    positive the center aliases that item's row, so all rows are updated
    in one pass.
    """
    d = U.shape[1]
    m = pos_items.shape[0]
    inv_m = 1.0 / m
    uvec = U[u]
    qvec = V[q]
    ss = 0.0
    us = 0.0
    if m == 1:
        cvec = V[pos_items[0]]
        for k in range(d):
            c = cvec[k]
            ss += c * c
            us += uvec[k] * c
    else:
        cvec = center
        row = V[pos_items[0]]
        for k in range(d):
            cvec[k] = row[k]
        for r in range(1, m - 1):
            row = V[pos_items[r]]
            for k in range(d):
                cvec[k] += row[k]
        # the last row is added in the same pass that accumulates the statistics
        row = V[pos_items[m - 1]]
        for k in range(d):
            c = cvec[k] + row[k]
            cvec[k] = c
            ss += c * c
            us += uvec[k] * c
    cc = ss * inv_m * inv_m
    if uu == 0.0 or cc == 0.0 or qq == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding")
    nu = np.sqrt(uu)
    nc = np.sqrt(cc)
    nq = np.sqrt(qq)
    cos_c = us * inv_m / (nu * nc)
    cos_q = uq / (nu * nq)
    value, g_up, g_uq = bpr_core(cos_c / tau, cos_q / tau)
    a1 = g_up / (tau * nu * nc)
    a2 = g_uq / (tau * nu * nq)
    u_self = (a1 * cos_c * nc + a2 * cos_q * nq) / nu
    q_self = a2 * cos_q * nu / nq
    c_u = a1 * inv_m  # also the user-gradient coefficient on the summed center
    c_self = a1 * cos_c * nu / nc * inv_m * inv_m
    if m == 1:
        for k in range(d):
            a = uvec[k]
            b = qvec[k]
            c = cvec[k]
            g = c_u * c + a2 * b - u_self * a
            qvec[k] = b - lr * (a2 * a - q_self * b + l2 * b)
            cvec[k] = c - lr * (c_u * a - c_self * c + l2 * c)
            uvec[k] = a - lr * (g + l2 * a)
        return value
    for r in range(m):
        row = V[pos_items[r]]
        for k in range(d):
            row[k] -= lr * (c_u * uvec[k] - c_self * cvec[k] + l2 * row[k])
    for k in range(d):
        a = uvec[k]
        b = qvec[k]
        g = c_u * cvec[k] + a2 * b - u_self * a
        qvec[k] = b - lr * (a2 * a - q_self * b + l2 * b)
        uvec[k] = a - lr * (g + l2 * a)
    return value


@numba.njit(cache=True, fastmath=FAST)
def proposed_sgd_step(U, V, u, pos_items, q, tau, lr, l2, center):
    """Fused proposed_grads + SGD update for unbatched training."""
    uu = 0.0
    qq = 0.0
    uq = 0.0
    for k in range(U.shape[1]):
        a = U[u, k]
        b = V[q, k]
        uu += a * a
        qq += b * b
        uq += a * b
    return _proposed_update(U, V, u, pos_items, q, uu, qq, uq, tau, lr, l2, center)


@numba.njit(cache=True, fastmath=FAST)
def bpr_sgd_step(U, V, u, i, j, lr, l2):
    """Fused BPR gradient + SGD update for unbatched training."""
    uvec = U[u]
    ivec = V[i]
    jvec = V[j]
    xi = 0.0
    xj = 0.0
    for k in range(U.shape[1]):
        xi += uvec[k] * ivec[k]
        xj += uvec[k] * jvec[k]
    value, gp, gn = bpr_core(xi, xj)
    for k in range(U.shape[1]):
        a = uvec[k]
        b = ivec[k]
        c = jvec[k]
        uvec[k] = a - lr * (gp * b + gn * c + l2 * a)
        ivec[k] = b - lr * (gp * a + l2 * b)
        jvec[k] = c - lr * (gn * a + l2 * c)
    return value


@numba.njit(cache=True, inline="always")
def _apply_row(W, row, g, lr, l2):
    for k in range(W.shape[1]):
        W[row, k] -= lr * (g[k] + l2 * W[row, k])


@numba.njit(cache=True)
def _merge_rows(rows, grads, count):
    """Sum gradients of repeated rows in rows[:count]; return the new count."""
    out = 0
    for r in range(count):
        found = -1
        for s in range(out):
            if rows[s] == rows[r]:
                found = s
                break
        if found >= 0:
            for k in range(grads.shape[1]):
                grads[found, k] += grads[r, k]
        else:
            if out != r:
                rows[out] = rows[r]
                for k in range(grads.shape[1]):
                    grads[out, k] = grads[r, k]
            out += 1
    return out


@numba.njit(cache=True, nogil=True)
def run_epoch_kernel(kind, U, V, indptr, indices, anchor_users, anchor_items, num_items,
                     M, alpha, tau, N, beta, tau_plus, K, lr, l2, batch_size, rng):
    """One pass over the anchors; returns the summed pre-update loss."""
    d = U.shape[1]
    log_floor = -1.0 / tau
    n_item_rows = (M + 1) if kind == PROPOSED else (1 + N + K)
    cap = batch_size * n_item_rows
    buf_urows = np.empty(batch_size, dtype=np.int64)
    buf_ugrad = np.empty((batch_size, d))
    buf_irows = np.empty(cap, dtype=np.int64)
    buf_igrad = np.empty((cap, d))
    step_rows = np.empty(n_item_rows, dtype=np.int64)
    step_grad = np.empty((n_item_rows, d))
    slots = np.empty(M, dtype=np.int64)
    pos_items = np.empty(M, dtype=np.int64)
    negs = np.empty(N, dtype=np.int64)
    extra = np.empty(K, dtype=np.int64)
    gu = np.empty(d)
    center = np.empty(d)
    total = 0.0
    nu = 0
    ni = 0
    n_anchor = anchor_users.shape[0]
    for t in range(n_anchor):
        u = anchor_users[t]
        pos = indices[indptr[u]:indptr[u + 1]]
        if kind == PROPOSED:
            m = min(M, pos.shape[0])
            sample_distinct(rng, pos.shape[0], m, slots)
            for r in range(m):
                pos_items[r] = pos[slots[r]]
            j, jp = sample_negative_pair_kernel(rng, pos, num_items)
            uu, jj, pp, uj, up = _candidate_stats(U, V, u, j, jp)
            nu_ = np.sqrt(uu)
            second, _ = label_kernel(rng, uj / (nu_ * np.sqrt(jj) * tau), up / (nu_ * np.sqrt(pp) * tau), alpha)
            if batch_size == 1:
                if second:
                    total += _proposed_update(U, V, u, pos_items[:m], jp, uu, pp, up, tau, lr, l2, center)
                else:
                    total += _proposed_update(U, V, u, pos_items[:m], j, uu, jj, uj, tau, lr, l2, center)
                continue
            q = jp if second else j
            value = proposed_grads(U, V, u, pos_items[:m], q, tau, gu, step_grad[:m], step_grad[m])
            for r in range(m):
                step_rows[r] = pos_items[r]
            step_rows[m] = q
            count = m + 1
        else:
            i = anchor_items[t]
            if kind == BPR and batch_size == 1:
                total += bpr_sgd_step(U, V, u, i, sample_negative(rng, pos, num_items), lr, l2)
                continue
            n = 1 if kind == BPR else N
            for r in range(n):
                negs[r] = sample_negative(rng, pos, num_items)
            ke = 0
            if kind == DCL or kind == HCL:
                extra[0] = i
                for r in range(1, K):
                    extra[r] = pos[randint(rng, pos.shape[0])]
                ke = K
            gi = step_grad[0]
            value = baseline_grads(U, V, kind, u, i, negs[:n], extra[:ke], tau_plus, beta, log_floor,
                                   gu, gi, step_grad[1:1 + n], step_grad[1 + n:1 + n + ke])
            step_rows[0] = i
            for r in range(n):
                step_rows[1 + r] = negs[r]
            for r in range(ke):
                step_rows[1 + n + r] = extra[r]
            count = _merge_rows(step_rows, step_grad, 1 + n + ke)
        total += value
        if batch_size == 1:
            _apply_row(U, u, gu, lr, l2)
            for r in range(count):
                _apply_row(V, step_rows[r], step_grad[r], lr, l2)
            continue
        buf_urows[nu] = u
        buf_ugrad[nu, :] = gu
        nu += 1
        for r in range(count):
            buf_irows[ni] = step_rows[r]
            buf_igrad[ni, :] = step_grad[r]
            ni += 1
        if nu == batch_size or t == n_anchor - 1:
            for r in range(nu):
                _apply_row(U, buf_urows[r], buf_ugrad[r], lr, l2)
            for r in range(ni):
                _apply_row(V, buf_irows[r], buf_igrad[r], lr, l2)
            nu = 0
            ni = 0
    return total


# ---------------------------------------------------------------- public steps


def _apply(W: np.ndarray, row: int, grad: np.ndarray, hp: HyperParams) -> None:
    W[row] -= hp.lr * (grad + hp.l2 * W[row])


def proposed_step_grads(table: EmbeddingTable, triple: AugmentedTriple, hp: HyperParams):
    """Loss plus gradients (user, sampled positives, negative) without updating."""
    d = table.dim
    pos = np.asarray(triple.center.source_items, dtype=np.int64)
    gu, gpos, gq = np.empty(d), np.empty((pos.size, d)), np.empty(d)
    value = proposed_grads(table.user_vecs, table.item_vecs, triple.user, pos,
                           triple.neg_choice.selected, hp.tau, gu, gpos, gq)
    return value, gu, gpos, gq


def train_step_proposed(table: EmbeddingTable, triple: AugmentedTriple, hp: HyperParams) -> float:
    """One SGD step on the interest-center loss; returns the pre-update loss."""
    value, gu, gpos, gq = proposed_step_grads(table, triple, hp)
    _apply(table.user_vecs, triple.user, gu, hp)
    for item, g in zip(triple.center.source_items, gpos):
        _apply(table.item_vecs, int(item), g, hp)
    _apply(table.item_vecs, triple.neg_choice.selected, gq, hp)
    return float(value)


def baseline_step_grads(table: EmbeddingTable, u: int, i: int, negs, hp: HyperParams, extra=None):
    kind = KIND_CODES[hp.loss_kind]
    if kind == PROPOSED:
        raise ValueError("use train_step_proposed for the proposed loss")
    negs = np.asarray(negs, dtype=np.int64)
    if kind == BPR and negs.size != 1:
        raise ValueError("bpr takes exactly one negative")
    if negs.size < 1:
        raise ValueError("need at least one negative")
    if kind in (DCL, HCL):
        extra = np.array([i], dtype=np.int64) if extra is None else np.asarray(extra, dtype=np.int64)
    else:
        extra = np.zeros(0, dtype=np.int64)
    d = table.dim
    gu, gi = np.empty(d), np.empty(d)
    gneg, gextra = np.empty((negs.size, d)), np.empty((extra.size, d))
    value = baseline_grads(table.user_vecs, table.item_vecs, kind, u, i, negs, extra,
                           hp.tau_plus, hp.beta, -1.0 / hp.tau, gu, gi, gneg, gextra)
    return value, gu, gi, gneg, gextra, extra


def train_step_baseline(table: EmbeddingTable, u: int, i: int, negs, hp: HyperParams, extra=None) -> float:
    """One SGD step for bpr/infonce/dcl/hcl; returns the pre-update loss.

    Rows hit more than once in a step (repeated negatives) get their
    gradients summed and a single weight-decay contraction.
    """
    value, gu, gi, gneg, gextra, extra = baseline_step_grads(table, u, i, negs, hp, extra)
    item_grads: dict[int, np.ndarray] = {}
    for row, g in [(i, gi), *zip(np.asarray(negs).tolist(), gneg), *zip(extra.tolist(), gextra)]:
        item_grads[row] = item_grads[row] + g if row in item_grads else g.copy()
    _apply(table.user_vecs, u, gu, hp)
    for row, g in item_grads.items():
        _apply(table.item_vecs, row, g, hp)
    return float(value)


def sample_triple(table: EmbeddingTable, dataset: InteractionDataset, u: int, hp: HyperParams,
                  rng: np.random.Generator) -> AugmentedTriple:
    """Draw the augmented (user, center, labeled negative) instance for ``u``."""
    pos = dataset.train_pos[u]
    center = augment.interest_center(table, pos, hp.M, rng)
    j, jp = augment.sample_negative_pair(pos, dataset.num_items, rng)
    uvec = table.user_vecs[u]
    x_j = float(_cos_tau(uvec, table.item_vecs[j], hp.tau))
    x_jp = float(_cos_tau(uvec, table.item_vecs[jp], hp.tau))
    choice = augment.label_negative(x_j, x_jp, hp.alpha, rng, candidates=(j, jp))
    return AugmentedTriple(u, center, choice)


# ---------------------------------------------------------------- training loop


def _epoch(kind, table, indptr, indices, users, items, num_items, hp, rng):
    return run_epoch_kernel(kind, table.user_vecs, table.item_vecs, indptr, indices, users, items,
                            num_items, hp.M, hp.alpha, hp.tau, hp.num_negatives, hp.beta, hp.tau_plus,
                            hp.K, hp.lr, hp.l2, hp.batch_size, rng)


def run_training(dataset: InteractionDataset, hp: HyperParams, parallel: bool = False,
                 workers: int | None = None, table: EmbeddingTable | None = None,
                 epoch_callback=None) -> tuple[EmbeddingTable, TrainReport]:
    """Train embeddings for ``hp.epochs`` epochs.

    Sequential mode is bit-deterministic given ``hp.seed``. Parallel mode
    splits every epoch into disjoint shards handled by threads that write
    to the shared tables without locks.
    """
    hp.validate()
    kind = KIND_CODES[hp.loss_kind]
    if table is None:
        table = init_embeddings(dataset.num_users, dataset.num_items, hp.d, hp.seed)
    indptr, indices = dataset.train_csr()
    users, items = dataset.train_pairs()
    need = 2 if kind == PROPOSED else 1
    short = np.flatnonzero(dataset.num_items - np.diff(indptr) < need)
    if short.size:
        raise ValueError(f"user {int(short[0])} has fewer than {need} negative items")
    seq = np.random.SeedSequence([hp.seed, 1])
    rng = np.random.default_rng(seq)
    report = TrainReport()
    n_workers = workers or 4
    if parallel:
        shard_rngs = [np.random.default_rng(s) for s in seq.spawn(n_workers)]
        pool = ThreadPoolExecutor(n_workers)
    try:
        for epoch in range(hp.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(users.size)
            eu, ei = users[order], items[order]
            if parallel:
                shards = np.array_split(np.arange(eu.size), n_workers)
                futures = [pool.submit(_epoch, kind, table, indptr, indices, eu[s], ei[s],
                                       dataset.num_items, hp, r) for s, r in zip(shards, shard_rngs)]
                total = sum(f.result() for f in futures)
            else:
                total = _epoch(kind, table, indptr, indices, eu, ei, dataset.num_items, hp, rng)
            mean_loss = total / max(eu.size, 1)
            report.mean_loss.append(float(mean_loss))
            report.seconds.append(time.perf_counter() - t0)
            if not np.isfinite(mean_loss) or not table.is_finite():
                raise FloatingPointError(f"non-finite values after epoch {epoch + 1}")
            log.info("epoch %d loss %.5f (%.2fs)", epoch + 1, mean_loss, report.seconds[-1])
            if epoch_callback is not None:
                epoch_callback(epoch + 1, table, report)
    finally:
        if parallel:
            pool.shutdown()
    return table, report
