"""Logging and learned slate policies, propensities and IPS-family estimators.

Sampling without replacement is done with the Gumbel-top-k trick: perturbing
log-weights with i.i.d. Gumbel noise and keeping the top ``K`` in order gives
exactly the sequential "draw, remove, renormalize" distribution.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .core import LogBatch, Slate, SupportViolation, logsumexp

DEFAULT_CLIP = 100.0


class PolicyKind(str, enum.Enum):
    UNIFORM = "uniform"
    TOPK_POP = "topkpop"
    FACTORED_SOFTMAX = "softmax"
    TOPK_SOFTMAX = "topk-softmax"


@dataclass(frozen=True)
class SoftmaxPolicyParams:
    """Factored softmax ``p(a | z) ∝ exp((Xi @ z) @ beta[a])``."""

    Xi: np.ndarray
    beta: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "Xi", np.asarray(self.Xi, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.beta.ndim != 2 or self.Xi.ndim != 2 or self.beta.shape[1] != self.Xi.shape[0]:
            raise ValueError(f"incompatible shapes Xi {self.Xi.shape}, beta {self.beta.shape}")

    @property
    def num_items(self) -> int:
        return self.beta.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"Xi": self.Xi, "beta": self.beta}


@dataclass(frozen=True)
class PolicySpec:
    kind: PolicyKind
    num_items: int
    params: SoftmaxPolicyParams | None = None
    popularity_weights: np.ndarray | None = None
    # slate propensity as a plain product of item probabilities (default), or
    # the without-replacement (Plackett-Luce) probability
    renormalize: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.TOPK_POP:
            if self.popularity_weights is None:
                raise ValueError("top-K pop policy requires popularity weights")
            w = np.asarray(self.popularity_weights, dtype=float)
            if w.shape != (self.num_items,) or np.any(w < 0):
                raise ValueError("popularity weights must be a non-negative vector of length P")
            if not w.sum() > 0:
                raise ValueError("popularity weights are all zero")
            object.__setattr__(self, "popularity_weights", w)
        if self.kind in (PolicyKind.FACTORED_SOFTMAX, PolicyKind.TOPK_SOFTMAX):
            if self.params is None:
                raise ValueError(f"{self.kind.value} policy requires softmax parameters")
            if self.params.num_items != self.num_items:
                raise ValueError("policy parameters do not match catalog size")

    @classmethod
    def uniform(cls, num_items: int) -> "PolicySpec":
        return cls(PolicyKind.UNIFORM, num_items)

    @classmethod
    def topk_pop(cls, weights: np.ndarray) -> "PolicySpec":
        w = np.asarray(weights, dtype=float)
        return cls(PolicyKind.TOPK_POP, len(w), popularity_weights=w)

    @classmethod
    def softmax(cls, params: SoftmaxPolicyParams, topk: bool = False) -> "PolicySpec":
        kind = PolicyKind.TOPK_SOFTMAX if topk else PolicyKind.FACTORED_SOFTMAX
        return cls(kind, params.num_items, params=params)

    def item_logprobs(self, z: np.ndarray) -> np.ndarray:
        """Per-item log-probabilities of a single draw; shape ``(n, P)`` for batched ``z``."""
        z = np.asarray(z, dtype=float)
        batched = z.ndim == 2
        Z = z if batched else z[None, :]
        if self.kind is PolicyKind.UNIFORM:
            out = np.full((Z.shape[0], self.num_items), -math.log(self.num_items))
        elif self.kind is PolicyKind.TOPK_POP:
            w = self.popularity_weights
            with np.errstate(divide="ignore"):
                lw = np.log(w) - math.log(w.sum())
            out = np.broadcast_to(lw, (Z.shape[0], self.num_items))
        else:
            logits = softmax_logits(self.params, Z)
            out = logits - logsumexp(logits, axis=1)[:, None]
        return out if batched else out[0]


# --------------------------------------------------------------------------
# Softmax policy


def softmax_logits(params: SoftmaxPolicyParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != params.Xi.shape[1]:
        raise ValueError(f"z has length {z.shape[-1]}, Xi expects {params.Xi.shape[1]}")
    return (z @ params.Xi.T) @ params.beta.T


def softmax_item_probs(params: SoftmaxPolicyParams, z: np.ndarray) -> np.ndarray:
    """Full-catalog softmax; costs O(P d) per context."""
    logits = softmax_logits(params, z)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def topk_correction(item_probs: np.ndarray, K: int | np.ndarray) -> np.ndarray:
    """Top-K off-policy multiplier ``K * (1 - p)^(K - 1)``."""
    p = np.asarray(item_probs, dtype=float)
    K = np.asarray(K)
    return K * (1.0 - p) ** (K - 1)


# --------------------------------------------------------------------------
# Sampling


def gumbel_topk(logw: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Ordered without-replacement draws, one row per row of ``logw``."""
    logw = np.atleast_2d(logw)
    keys = logw + rng.gumbel(size=logw.shape)
    keys[~np.isfinite(logw)] = -np.inf
    if k < logw.shape[1]:
        part = np.argpartition(-keys, k - 1, axis=1)[:, :k]
    else:
        part = np.broadcast_to(np.arange(logw.shape[1]), keys.shape).copy()
    order = np.argsort(-np.take_along_axis(keys, part, axis=1), axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1)


def sequential_log_prob(logw: np.ndarray, slate: np.ndarray) -> float:
    """Log-probability of an ordered slate under draw-remove-renormalize."""
    w = np.exp(logw - logw.max())
    remaining = w.sum()
    out = 0.0
    for a in slate:
        out += math.log(w[a]) - math.log(remaining)
        remaining -= w[a]
    return out


def _log_falling(P: int, k: np.ndarray) -> np.ndarray:
    """log(P (P-1) ... (P-k+1)) elementwise."""
    k = np.asarray(k, dtype=float)
    return gammaln(P + 1.0) - gammaln(P - k + 1.0)


def slate_log_propensity(policy: PolicySpec, z: np.ndarray, slate: Slate | np.ndarray) -> float:
    items = np.asarray(slate.items if isinstance(slate, Slate) else slate, dtype=np.int64)
    P = policy.num_items
    if policy.kind is PolicyKind.UNIFORM:
        return -float(_log_falling(P, np.array(len(items))))
    logp = policy.item_logprobs(z)
    if policy.kind is PolicyKind.TOPK_POP or policy.renormalize:
        return sequential_log_prob(logp, items)
    return float(logp[items].sum())


def marginal_propensities(policy: PolicySpec, z: np.ndarray, slate: Slate | np.ndarray) -> np.ndarray:
    """Per-position item marginals; closed form for uniform, ``p(a|z)`` otherwise.

    For top-K pop this is the usual approximation ``w_a / sum(w)``.
    """
    items = np.asarray(slate.items if isinstance(slate, Slate) else slate, dtype=np.int64)
    return np.exp(policy.item_logprobs(z)[items])


def sample_slate(policy: PolicySpec, z: np.ndarray, k: int,
                 rng: np.random.Generator) -> tuple[Slate, float, np.ndarray]:
    """Draw a slate of ``k`` distinct items with its slate and marginal propensities."""
    if k > policy.num_items:
        raise ValueError(f"slate size {k} exceeds catalog size {policy.num_items}")
    logp = policy.item_logprobs(z)
    if np.isfinite(logp).sum() < k:
        raise ValueError("not enough items with positive probability")
    items = gumbel_topk(logp, k, rng)[0]
    slate = Slate(tuple(int(a) for a in items))
    return slate, math.exp(slate_log_propensity(policy, z, items)), marginal_propensities(policy, z, items)


def sample_slates(policy: PolicySpec, Z: np.ndarray, sizes: np.ndarray, rng: np.random.Generator,
                  chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`sample_slate` over rows of ``Z``.

    Returns ``(slates, prop_slate, prop_marginal)`` with ``-1``/``1`` padding
    beyond each row's size.
    """
    n = len(sizes)
    sizes = np.asarray(sizes, dtype=np.int64)
    k_max = int(sizes.max())
    P = policy.num_items
    if k_max > P:
        raise ValueError(f"slate size {k_max} exceeds catalog size {P}")
    slates = np.full((n, k_max), -1, dtype=np.int64)
    log_prop = np.zeros(n)
    marg = np.ones((n, k_max))
    pos = np.arange(k_max)[None, :]
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        logp = policy.item_logprobs(Z[lo:hi])
        if np.isfinite(logp[0]).sum() < k_max:
            raise ValueError("not enough items with positive probability")
        top = gumbel_topk(logp, k_max, rng)
        m = pos < sizes[lo:hi, None]
        slates[lo:hi] = np.where(m, top, -1)
        lp_items = np.take_along_axis(logp, top, axis=1)
        marg[lo:hi] = np.where(m, np.exp(lp_items), 1.0)
        if policy.kind is PolicyKind.UNIFORM:
            log_prop[lo:hi] = -_log_falling(P, sizes[lo:hi])
        elif policy.kind is PolicyKind.TOPK_POP or policy.renormalize:
            # draw-remove-renormalize: denominators shrink by the mass already drawn
            p_items = np.exp(lp_items)
            drawn = np.cumsum(p_items, axis=1) - p_items
            with np.errstate(divide="ignore"):
                terms = lp_items - np.log1p(-np.minimum(drawn, 1.0))
            log_prop[lo:hi] = np.where(m, terms, 0.0).sum(axis=1)
        else:
            log_prop[lo:hi] = np.where(m, lp_items, 0.0).sum(axis=1)
    return slates, np.exp(log_prop), marg


# --------------------------------------------------------------------------
# Estimators


def _check_support(logs: LogBatch) -> None:
    if np.any(~(logs.prop_slate > 0)) or np.any(~(logs.prop_marginal[logs.mask] > 0)):
        raise SupportViolation("support violation: logged propensity must be positive")


def learned_log_propensities(policy: PolicySpec, logs: LogBatch) -> tuple[np.ndarray, np.ndarray]:
    """``(log pi(s_i|z_i), log pi(s_il, l|z_i))`` for every logged record."""
    n, K = logs.slates.shape
    mask = logs.mask
    S = np.where(mask, logs.slates, 0)
    log_slate = np.zeros(n)
    log_marg = np.zeros((n, K))
    for lo in range(0, n, 4096):
        hi = min(lo + 4096, n)
        logp = policy.item_logprobs(logs.z[lo:hi])
        lp = np.take_along_axis(logp, S[lo:hi], axis=1)
        m = mask[lo:hi]
        log_marg[lo:hi] = np.where(m, lp, 0.0)
        if policy.kind is PolicyKind.UNIFORM:
            log_slate[lo:hi] = -_log_falling(policy.num_items, logs.sizes[lo:hi])
        elif policy.kind is PolicyKind.TOPK_POP or policy.renormalize:
            p = np.where(m, np.exp(lp), 0.0)
            drawn = np.cumsum(p, axis=1) - p
            with np.errstate(divide="ignore"):
                log_slate[lo:hi] = np.where(m, lp - np.log1p(-np.minimum(drawn, 1.0)), 0.0).sum(axis=1)
        else:
            log_slate[lo:hi] = log_marg[lo:hi].sum(axis=1)
    return log_slate, log_marg


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int

    def __float__(self) -> float:
        return self.value


def _finish(terms: np.ndarray, weights: np.ndarray | None, self_normalized: bool) -> Estimate:
    n = len(terms)
    if self_normalized:
        denom = weights.sum()
        value = float(terms.sum() / denom) if denom > 0 else 0.0
        # delta-method standard error
        resid = (terms - value * weights) / (denom / n if denom > 0 else 1.0)
        return Estimate(value, float(resid.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf, n)
    value = float(terms.mean())
    return Estimate(value, float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf, n)


def ips_terms(policy: PolicySpec, logs: LogBatch, clip: float | None = DEFAULT_CLIP) -> tuple[np.ndarray, np.ndarray]:
    _check_support(logs)
    log_pi, _ = learned_log_propensities(policy, logs)
    w = np.exp(log_pi - np.log(logs.prop_slate))
    if clip is not None:
        w = np.minimum(w, clip)
    return logs.rewards * w, w


def estimate_ips(policy: PolicySpec, logs: LogBatch, clip: float | None = DEFAULT_CLIP,
                 self_normalized: bool = False) -> Estimate:
    """Slate-level inverse propensity estimate of the policy value."""
    terms, w = ips_terms(policy, logs, clip)
    return _finish(terms, w, self_normalized)


def iips_terms(policy: PolicySpec, logs: LogBatch, clip: float | None = DEFAULT_CLIP) -> tuple[np.ndarray, np.ndarray]:
    _check_support(logs)
    _, log_marg = learned_log_propensities(policy, logs)
    w = np.exp(log_marg - np.log(logs.prop_marginal))
    if clip is not None:
        w = np.minimum(w, clip)
    n = len(logs)
    clicked = logs.clicks > 0
    terms = np.zeros(n)
    rows = np.flatnonzero(clicked)
    terms[rows] = w[rows, logs.clicks[rows] - 1]
    # self-normalization weight: average item-level weight on the shown slate
    w_norm = np.where(logs.mask, w, 0.0).sum(axis=1) / logs.sizes
    return terms, w_norm


def estimate_iips(policy: PolicySpec, logs: LogBatch, clip: float | None = DEFAULT_CLIP,
                  self_normalized: bool = False) -> Estimate:
    """Item-position inverse propensity estimate of the policy value."""
    terms, w = iips_terms(policy, logs, clip)
    return _finish(terms, w, self_normalized)
