"""Slate click model: scoring, likelihood and analytic gradients.

A slate of size ``K`` gets ``K + 1`` log-scores::

    log theta_0 = y @ phi                       (phi_scalar for the bias-only variant)
    log theta_l = logaddexp(u @ Psi[s_l] + gamma_l, alpha_l),   u = Gamma @ z

and feedback is categorical over the normalized scores.  The reward-only
variant collapses the item categories into a single "interaction" category;
the rank-only variant drops ``theta_0`` and is fit on successful slates only.

The scalar functions are straightforward reference implementations; the
``batch_*`` functions are the vectorized paths used for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Context,
    LogBatch,
    LogRecord,
    ModelParams,
    Slate,
    Variant,
    log_add_exp,
    logsumexp,
)


class RankOnlyError(ValueError):
    pass


# --------------------------------------------------------------------------
# Per-record reference path


def score_no_interaction(params: ModelParams, context: Context) -> float:
    if params.variant is Variant.RANK_ONLY:
        raise ValueError("rank-only variant has no no-interaction score")
    if params.variant is Variant.BIAS_ONLY:
        return params.phi_scalar
    if context.y.shape != params.phi.shape:
        raise ValueError(f"y has shape {context.y.shape}, phi has shape {params.phi.shape}")
    return float(context.y @ params.phi)


def user_embedding(params: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.dim_z:
        raise ValueError(f"z has length {z.shape[-1]}, Gamma expects {params.dim_z}")
    return z @ params.Gamma.T


def score_item(params: ModelParams, z: np.ndarray, item: int, position: int) -> float:
    """log theta for ``item`` shown at 0-based ``position``."""
    if not 0 <= item < params.num_items:
        raise IndexError(f"item {item} outside catalog of {params.num_items}")
    if not 0 <= position < params.k_max:
        raise IndexError(f"position {position} outside [0, {params.k_max})")
    rel = float(user_embedding(params, z) @ params.Psi[item])
    return log_add_exp(rel + float(params.gamma[position]), float(params.alpha[position]))


def score_slate(params: ModelParams, context: Context, slate: Slate) -> np.ndarray:
    """Log-score vector for the variant's categories."""
    if len(slate) != context.slate_size:
        raise ValueError("slate length differs from context slate size")
    items = np.array([score_item(params, context.z, a, pos) for pos, a in enumerate(slate)])
    if params.variant is Variant.RANK_ONLY:
        return items
    head = score_no_interaction(params, context)
    if params.variant is Variant.REWARD_ONLY:
        return np.array([head, float(logsumexp(items))])
    return np.concatenate([[head], items])


def _observed_category(params: ModelParams, record: LogRecord) -> int:
    c = record.feedback.index
    if params.variant is Variant.RANK_ONLY:
        if c == 0:
            raise RankOnlyError("rank-only requires successful slates")
        return c - 1
    if params.variant is Variant.REWARD_ONLY:
        return int(c > 0)
    return c


def log_likelihood(params: ModelParams, record: LogRecord) -> float:
    scores = score_slate(params, record.context, record.slate)
    c = _observed_category(params, record)
    return float(scores[c] - logsumexp(scores))


def click_probability(params: ModelParams, context: Context, slate: Slate) -> float:
    """P(R = 1 | x, s) = 1 - theta_0 / Z."""
    head = score_no_interaction(params, context)
    items = [score_item(params, context.z, a, pos) for pos, a in enumerate(slate)]
    return float(-math.expm1(head - log_add_exp(head, float(logsumexp(np.array(items))))))


# --------------------------------------------------------------------------
# Gradients


@dataclass
class ModelGrad:
    """Gradient with the layout of :class:`ModelParams`.

    ``Psi`` is stored sparsely as ``(Psi_rows, Psi_vals)``: only rows of items
    that appeared in a slate are present.  Entries are ``None`` where the
    variant has no such parameter (``phi`` for bias-only, both head
    parameters for rank-only).
    """

    phi: np.ndarray | None
    Gamma: np.ndarray
    Psi_rows: np.ndarray
    Psi_vals: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    phi_scalar: float | None

    def dense_Psi(self, num_items: int) -> np.ndarray:
        out = np.zeros((num_items, self.Psi_vals.shape[1]))
        out[self.Psi_rows] = self.Psi_vals
        return out


def grad_log_likelihood(params: ModelParams, record: LogRecord) -> ModelGrad:
    batch = LogBatch.from_records([record], k_max=params.k_max)
    _, grad = batch_loglik_and_grad(params, batch)
    return grad


# --------------------------------------------------------------------------
# Vectorized path


def _item_terms(params: ModelParams, batch: LogBatch):
    K = batch.k_max
    if K > params.k_max:
        raise ValueError(f"logs have slates of size {K} > model K_max {params.k_max}")
    mask = batch.mask
    S = np.where(mask, batch.slates, 0)
    U = user_embedding(params, batch.z)
    Psi_s = params.Psi[S]
    rel = np.einsum("nd,nkd->nk", U, Psi_s)
    a = rel + params.gamma[:K]
    alpha = np.broadcast_to(params.alpha[:K], a.shape)
    s = np.logaddexp(a, alpha)
    s = np.where(mask, s, -np.inf)
    return mask, S, U, Psi_s, a, s


def _head(params: ModelParams, batch: LogBatch) -> np.ndarray:
    if params.variant is Variant.BIAS_ONLY:
        return np.full(len(batch), params.phi_scalar)
    if batch.y.shape[1] != params.dim_y:
        raise ValueError(f"y has {batch.y.shape[1]} features, phi has {params.dim_y}")
    return batch.y @ params.phi


def batch_log_likelihood(params: ModelParams, batch: LogBatch) -> np.ndarray:
    """Per-record log-likelihood."""
    return _forward(params, batch)[0]


def _forward(params: ModelParams, batch: LogBatch):
    mask, S, U, Psi_s, a, s = _item_terms(params, batch)
    c = batch.clicks
    n = len(batch)
    rows = np.arange(n)
    if params.variant is Variant.RANK_ONLY:
        if np.any(c == 0):
            raise RankOnlyError("rank-only requires successful slates")
        lse = logsumexp(s, axis=1)
        ll = s[rows, c - 1] - lse
        return ll, (mask, S, U, Psi_s, a, s, None, lse)
    h = _head(params, batch)
    if params.variant is Variant.REWARD_ONLY:
        l1 = logsumexp(s, axis=1)
        lse = np.logaddexp(h, l1)
        ll = np.where(c > 0, l1, h) - lse
        return ll, (mask, S, U, Psi_s, a, s, h, lse, l1)
    lse = np.logaddexp(h, logsumexp(s, axis=1))
    picked = np.where(c > 0, s[rows, np.maximum(c - 1, 0)], h)
    return picked - lse, (mask, S, U, Psi_s, a, s, h, lse)


def batch_loglik_and_grad(params: ModelParams, batch: LogBatch) -> tuple[float, ModelGrad]:
    """Mean log-likelihood over ``batch`` and its exact gradient."""
    ll, cache = _forward(params, batch)
    mask, S, U, Psi_s, a, s = cache[:6]
    n = len(batch)
    K = batch.k_max
    c = batch.clicks
    rows = np.arange(n)
    onehot = np.zeros((n, K))
    hit = c > 0
    onehot[rows[hit], c[hit] - 1] = 1.0

    d_head = None
    if params.variant is Variant.RANK_ONLY:
        lse = cache[7]
        p_items = np.exp(s - lse[:, None])
        d_s = onehot - p_items
    else:
        h, lse = cache[6], cache[7]
        p0 = np.exp(h - lse)
        d_head = (~hit).astype(float) - p0
        if params.variant is Variant.REWARD_ONLY:
            l1 = cache[8]
            within = np.exp(s - l1[:, None])
            d_s = ((hit.astype(float)) - (1.0 - p0))[:, None] * within
        else:
            d_s = onehot - np.exp(s - lse[:, None])
    d_s = np.where(mask, d_s, 0.0)

    # d s / d a = sigmoid(a - alpha) = exp(a - s); remainder flows to alpha
    with np.errstate(invalid="ignore"):
        sig = np.where(mask, np.exp(a - np.where(mask, s, 0.0)), 0.0)
    d_rel = d_s * sig
    d_gamma = np.zeros(params.k_max)
    d_alpha = np.zeros(params.k_max)
    d_gamma[:K] = d_rel.sum(axis=0)
    d_alpha[:K] = (d_s - d_rel).sum(axis=0)

    d_U = np.einsum("nk,nkd->nd", d_rel, Psi_s)
    d_Gamma = d_U.T @ batch.z

    flat_items = S[mask]
    flat_vals = (d_rel[:, :, None] * U[:, None, :])[mask]
    rows_u, inv = np.unique(flat_items, return_inverse=True)
    vals = np.stack([np.bincount(inv, weights=flat_vals[:, j], minlength=rows_u.size)
                     for j in range(params.dim)], axis=1)

    d_phi = None
    d_phi_scalar = None
    if d_head is not None:
        if params.variant is Variant.BIAS_ONLY:
            d_phi_scalar = float(d_head.sum()) / n
        else:
            d_phi = (d_head @ batch.y) / n

    grad = ModelGrad(
        phi=d_phi,
        Gamma=d_Gamma / n,
        Psi_rows=rows_u,
        Psi_vals=vals / n,
        gamma=d_gamma / n,
        alpha=d_alpha / n,
        phi_scalar=d_phi_scalar,
    )
    return float(ll.mean()), grad


def batch_click_probability(params: ModelParams, y: np.ndarray, z: np.ndarray,
                            slates: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Analytic ``1 - theta_0 / Z`` for many (context, slate) pairs."""
    n = len(sizes)
    dummy = LogBatch(y, z, slates, sizes, np.zeros(n, dtype=np.int64),
                     np.ones(n), np.ones_like(slates, dtype=float))
    *_, s = _item_terms(params, dummy)
    h = _head(params, dummy)
    l_items = logsumexp(s, axis=1)
    lse = np.logaddexp(h, l_items)
    return -np.expm1(h - lse)


def init_params(num_items: int, dim: int, dim_y: int, dim_z: int, k_max: int,
                variant: Variant, rng: np.random.Generator, scale: float = 0.01) -> ModelParams:
    """Small-norm Normal init for embeddings, zeros for biases."""
    return ModelParams(
        phi=np.zeros(dim_y),
        Gamma=rng.normal(0.0, scale, size=(dim, dim_z)),
        Psi=rng.normal(0.0, scale, size=(num_items, dim)),
        gamma=np.zeros(k_max),
        alpha=np.zeros(k_max),
        variant=variant,
        phi_scalar=0.0,
    )
