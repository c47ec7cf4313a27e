"""Contrastive ranking losses on precomputed scores, with analytic gradients.

Each public loss returns a :class:`LossValue` carrying the loss and its
partial derivatives with respect to every input score. The numeric work
lives in ``*_core`` functions compiled with numba so the training kernels
share the exact same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

DEFAULT_TAU = 0.2
DEFAULT_TAU_PLUS = 0.1


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_pos: float
    grad_negs: np.ndarray
    grad_extra_pos: np.ndarray = field(default_factory=lambda: np.zeros(0))


@numba.njit(cache=True, inline="always")
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@numba.njit(cache=True, inline="always")
def _softplus(z):
    return max(z, 0.0) + np.log1p(np.exp(-abs(z)))


@numba.njit(cache=True)
def _logsumexp(x):
    m = x[0]
    for k in range(1, x.shape[0]):
        if x[k] > m:
            m = x[k]
    s = 0.0
    for k in range(x.shape[0]):
        s += np.exp(x[k] - m)
    return m + np.log(s)


@numba.njit(cache=True)
def bpr_core(x_pos, x_neg):
    z = x_neg - x_pos
    s = _sigmoid(z)
    return _softplus(z), -s, s


@numba.njit(cache=True)
def infonce_core(x_pos, x_negs, grad_negs):
    """Fill ``grad_negs`` in place; return (value, grad_pos)."""
    n = x_negs.shape[0]
    m = x_pos
    for k in range(n):
        if x_negs[k] > m:
            m = x_negs[k]
    s = 0.0
    for k in range(n):
        s += np.exp(x_negs[k] - m)
    if m == x_pos:
        value = np.log1p(s)
        total = 1.0 + s
    else:
        total = np.exp(x_pos - m) + s
        value = (m - x_pos) + np.log(total)
    for k in range(n):
        grad_negs[k] = np.exp(x_negs[k] - m) / total
    return value, np.exp(x_pos - m) / total - 1.0


@numba.njit(cache=True)
def debiased_core(x_pos, x_negs, x_extra, tau_plus, beta, log_floor, weights, use_weights,
                  grad_negs, grad_extra):
    """Debiased InfoNCE with optional hardness reweighting.

    The negative term is N * phi with
    phi = max((A - tau_plus * B) / (1 - tau_plus), e^log_floor), where A is
    the (reweighted) mean of exp(neg scores) and B the mean of exp(extra
    positive scores). The floor only applies when tau_plus > 0.
    beta = 0 without weights gives plain DCL. Fills the two gradient
    buffers in place; returns (value, grad_pos).
    """
    n = x_negs.shape[0]
    k_extra = x_extra.shape[0]
    tmp = np.empty(n)
    dlogA = np.empty(n)

    if use_weights:
        for k in range(n):
            tmp[k] = x_negs[k] + np.log(weights[k])
        log_a = _logsumexp(tmp) - np.log(n)
        lse = _logsumexp(tmp)
        for k in range(n):
            dlogA[k] = np.exp(tmp[k] - lse)
    else:
        for k in range(n):
            tmp[k] = (beta + 1.0) * x_negs[k]
        lse1 = _logsumexp(tmp)
        for k in range(n):
            dlogA[k] = (beta + 1.0) * np.exp(tmp[k] - lse1)
        if beta != 0.0:
            for k in range(n):
                tmp[k] = beta * x_negs[k]
            lse0 = _logsumexp(tmp)
            for k in range(n):
                dlogA[k] -= beta * np.exp(tmp[k] - lse0)
        else:
            lse0 = np.log(n)
        log_a = lse1 - lse0

    log_b = _logsumexp(x_extra) - np.log(k_extra)

    d_phi_a = 1.0
    d_phi_b = 0.0
    if tau_plus == 0.0:
        log_phi = log_a
    else:
        c = max(log_a, log_b)
        t = np.exp(log_a - c) - tau_plus * np.exp(log_b - c)
        clamped = True
        if t > 0.0:
            log_phi = c + np.log(t) - np.log1p(-tau_plus)
            if log_phi > log_floor:
                clamped = False
                d_phi_a = np.exp(log_a - c) / t
                d_phi_b = -tau_plus * np.exp(log_b - c) / t
        if clamped:
            log_phi = log_floor
            d_phi_a = 0.0
            d_phi_b = 0.0

    z = np.log(n) + log_phi - x_pos
    w = _sigmoid(z)
    value = _softplus(z)
    for k in range(n):
        grad_negs[k] = w * d_phi_a * dlogA[k]
    if k_extra > 0:
        lse_e = _logsumexp(x_extra)
        for k in range(k_extra):
            grad_extra[k] = w * d_phi_b * np.exp(x_extra[k] - lse_e)
    return value, -w


def _as_scores(x, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a flat list of scores")
    return arr


def loss_bpr(x_pos: float, x_neg: float) -> LossValue:
    value, gp, gn = bpr_core(float(x_pos), float(x_neg))
    return LossValue(value, gp, np.array([gn]))


def loss_infonce(x_pos: float, x_negs) -> LossValue:
    negs = _as_scores(x_negs, "x_negs")
    if negs.size == 0:
        raise ValueError("InfoNCE needs at least one negative score")
    grad = np.empty_like(negs)
    value, gp = infonce_core(float(x_pos), negs, grad)
    return LossValue(value, gp, grad)


def _debiased(x_pos, x_negs, x_extra_pos, tau_plus, beta, tau, weights):
    negs = _as_scores(x_negs, "x_negs")
    extra = _as_scores(x_extra_pos, "x_extra_pos")
    if negs.size == 0:
        raise ValueError("need at least one negative score")
    if extra.size == 0:
        raise ValueError("need at least one extra positive score")
    if not 0.0 <= tau_plus < 1.0:
        raise ValueError(f"tau_plus must lie in [0, 1), got {tau_plus}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    use_weights = weights is not None
    w = np.ones_like(negs) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != negs.shape or (w <= 0).any():
        raise ValueError("weights must be positive, one per negative")
    gn = np.empty_like(negs)
    ge = np.empty_like(extra)
    value, gp = debiased_core(float(x_pos), negs, extra, float(tau_plus), float(beta), -1.0 / tau,
                              w, use_weights, gn, ge)
    return LossValue(value, gp, gn, ge)


def loss_dcl(x_pos: float, x_negs, x_extra_pos, tau_plus: float = DEFAULT_TAU_PLUS,
             tau: float = DEFAULT_TAU) -> LossValue:
    """Debiased contrastive loss.

    ``x_extra_pos`` holds the K positive scores used to estimate the
    positive-class term. ``tau`` only sets the estimator floor e^(-1/tau).
    """
    return _debiased(x_pos, x_negs, x_extra_pos, tau_plus, 0.0, tau, None)


def hcl_weights(x_negs, beta: float) -> np.ndarray:
    """Hardness weights e^(beta*x) normalized to mean one."""
    negs = _as_scores(x_negs, "x_negs")
    z = beta * negs
    w = np.exp(z - z.max())
    return w / w.mean()


def loss_hcl(x_pos: float, x_negs, x_extra_pos, beta: float = 1.0, tau_plus: float = DEFAULT_TAU_PLUS,
             tau: float = DEFAULT_TAU, weights=None) -> LossValue:
    """Hard-negative debiased contrastive loss.

    By default the weights depend on the scores and the gradient includes
    their derivative. Passing ``weights`` (e.g. from :func:`hcl_weights`)
    holds them fixed.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return _debiased(x_pos, x_negs, x_extra_pos, tau_plus, beta, tau, weights)


def loss_proposed(x_up: float, x_uq: float) -> LossValue:
    """Interest-center loss: -log sigmoid(x_up - x_uq).

    Same algebra as BPR. ``x_up`` is the user/interest-center score and
    ``x_uq`` the score of the labeled negative, both cosine / tau.
    """
    return loss_bpr(x_up, x_uq)


LOSS_KINDS = ("bpr", "infonce", "dcl", "hcl", "proposed")
