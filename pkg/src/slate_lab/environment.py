"""Synthetic ground-truth environment: oracle construction, logged-data
generation and a paired simulated A/B test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Context, LogBatch, ModelParams, Variant, sample_categorical_rows, spawn_rng
from .decision import DecisionRule
from .model import batch_click_probability, user_embedding
from .policy import PolicyKind, PolicySpec, sample_slates


@dataclass
class OracleConfig:
    """Sizes and sampling distributions for a synthetic problem.

    Each ``(mu, var)`` pair is the mean and (diagonal, isotropic) variance of
    the Normal the corresponding parameter is drawn from.
    """

    num_items: int = 1000
    dim: int = 16
    dim_y: int = 8
    k_max: int = 4
    num_topics: int = 32
    phi: tuple[float, float] = (0.0, 1.0)
    Psi: tuple[float, float] = (0.0, 1.0)
    Gamma: tuple[float, float] = (0.0, 1.0)
    gamma: tuple[float, float] = (0.0, 1.0)
    alpha: tuple[float, float] = (0.0, 1.0)
    y: tuple[float, float] = (0.0, 1.0)
    topic_poisson_rate: float = 3.0
    seed: int = 42

    def __post_init__(self) -> None:
        for name in ("phi", "Psi", "Gamma", "gamma", "alpha", "y"):
            mu, var = getattr(self, name)
            if var < 0:
                raise ValueError(f"variance of {name} must be >= 0")
            setattr(self, name, (float(mu), float(var)))
        if self.num_topics < 1:
            raise ValueError("num_topics must be >= 1")
        if self.num_items < 2 or self.k_max < 1 or self.k_max > self.num_items:
            raise ValueError("need 1 <= k_max <= num_items and num_items >= 2")
        if self.topic_poisson_rate < 0:
            raise ValueError("topic_poisson_rate must be >= 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("phi", "Psi", "Gamma", "gamma", "alpha", "y"):
            out[name] = list(out[name])
        return out


@dataclass(frozen=True)
class OracleEnv:
    config: OracleConfig
    params: ModelParams = field(repr=False)

    @property
    def num_items(self) -> int:
        return self.params.num_items

    @property
    def k_max(self) -> int:
        return self.params.k_max

    def popularity_weights(self) -> np.ndarray:
        """Item weights for the top-K pop logging policy: ``||Psi_a||``."""
        return np.linalg.norm(self.params.Psi, axis=1)

    def logging_policy(self, kind: PolicyKind | str) -> PolicySpec:
        kind = PolicyKind(kind)
        if kind is PolicyKind.UNIFORM:
            return PolicySpec.uniform(self.num_items)
        if kind is PolicyKind.TOPK_POP:
            return PolicySpec.topk_pop(self.popularity_weights())
        raise ValueError(f"{kind.value} is not a logging policy")


def _normal(rng: np.random.Generator, spec: tuple[float, float], size) -> np.ndarray:
    mu, var = spec
    return mu + math.sqrt(var) * rng.standard_normal(size)


def build_oracle(config: OracleConfig) -> OracleEnv:
    rng = spawn_rng(config.seed, "oracle")
    c = config
    params = ModelParams(
        phi=_normal(rng, c.phi, c.dim_y),
        Gamma=_normal(rng, c.Gamma, (c.dim, c.num_topics)),
        Psi=_normal(rng, c.Psi, (c.num_items, c.dim)),
        gamma=_normal(rng, c.gamma, c.k_max),
        alpha=_normal(rng, c.alpha, c.k_max),
        variant=Variant.FULL,
    )
    for a in params.arrays().values():
        a.setflags(write=False)
    return OracleEnv(config, params)


@dataclass
class Users:
    y: np.ndarray
    z: np.ndarray
    sizes: np.ndarray

    def __len__(self) -> int:
        return len(self.sizes)


def sample_users(env: OracleEnv, n: int, rng: np.random.Generator) -> Users:
    c = env.config
    y = _normal(rng, c.y, (n, c.dim_y))
    n_topics = np.minimum(1 + rng.poisson(c.topic_poisson_rate, size=n), c.num_topics)
    # distinct uniform topics: the first n_topics entries of a random ranking
    ranks = np.argsort(rng.random((n, c.num_topics)), axis=1)
    z = (ranks < n_topics[:, None]).astype(float)
    sizes = rng.integers(1, c.k_max + 1, size=n)
    return Users(y, z, sizes)


def sample_user(env: OracleEnv, rng: np.random.Generator) -> Context:
    u = sample_users(env, 1, rng)
    return Context(u.y[0], u.z[0], int(u.sizes[0]))


def oracle_logits(env: OracleEnv, users: Users, slates: np.ndarray) -> np.ndarray:
    """``(n, 1 + K)`` log-scores of the true model; padded positions are ``-inf``."""
    p = env.params
    k = slates.shape[1]
    mask = np.arange(k)[None, :] < users.sizes[:, None]
    S = np.where(mask, slates, 0)
    rel = np.einsum("nd,nkd->nk", user_embedding(p, users.z), p.Psi[S])
    s = np.logaddexp(rel + p.gamma[:k], p.alpha[:k])
    s = np.where(mask, s, -np.inf)
    return np.concatenate([(users.y @ p.phi)[:, None], s], axis=1)


def generate_logs(env: OracleEnv, policy: PolicySpec, n: int, rng: np.random.Generator) -> LogBatch:
    """Run ``policy`` against the oracle and record slates, feedback and propensities."""
    if policy.kind not in (PolicyKind.UNIFORM, PolicyKind.TOPK_POP):
        raise ValueError("logging policy must be uniform or top-K pop")
    users = sample_users(env, n, rng)
    slates, prop, marg = sample_slates(policy, users.z, users.sizes, rng)
    clicks = sample_categorical_rows(oracle_logits(env, users, slates), rng)
    batch = LogBatch(users.y, users.z, slates, users.sizes, clicks, prop, marg,
                     meta={"logging_policy": policy.kind.value})
    return batch


def analytic_reward(env: OracleEnv, users: Users, slates: np.ndarray) -> np.ndarray:
    """Per-impression ``1 - theta_0 / Z`` under the true parameters."""
    return batch_click_probability(env.params, users.y, users.z, slates, users.sizes)


@dataclass(frozen=True)
class ABResult:
    name: str
    mean: float
    ci_low: float
    ci_high: float
    std: float
    n: int


def summarize(name: str, rewards: np.ndarray, z: float = 1.96) -> ABResult:
    n = len(rewards)
    mean = float(rewards.mean())
    std = float(rewards.std(ddof=1)) if n > 1 else 0.0
    half = z * std / math.sqrt(n) if n > 1 else 0.0
    return ABResult(name, mean, mean - half, mean + half, std, n)


def check_slates(slates: np.ndarray, sizes: np.ndarray, num_items: int, name: str) -> None:
    k = slates.shape[1]
    mask = np.arange(k)[None, :] < sizes[:, None]
    if slates.shape[0] != len(sizes) or k < sizes.max():
        raise ValueError(f"rule {name!r} returned slates of the wrong shape")
    vals = slates[mask]
    if np.any(vals < 0) or np.any(vals >= num_items):
        raise ValueError(f"rule {name!r} returned an item outside the catalog")
    srt = np.sort(np.where(mask, slates, -1 - np.arange(k)[None, :]), axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise ValueError(f"rule {name!r} returned a slate with repeated items")


def run_abtest(env: OracleEnv, rules: Sequence[DecisionRule], n_test: int = 100_000, seed: int = 42,
               chunk: int = 20_000, return_rewards: bool = False):
    """Paired A/B test: every rule sees the same user stream.

    Stochastic rules each receive a generator seeded identically, so two
    copies of the same rule produce identical results.
    """
    user_rng = spawn_rng(seed, "abtest-users")
    rule_rngs = [spawn_rng(seed, "abtest-rule") for _ in rules]
    per_rule: list[list[np.ndarray]] = [[] for _ in rules]
    for lo in range(0, n_test, chunk):
        users = sample_users(env, min(chunk, n_test - lo), user_rng)
        for j, rule in enumerate(rules):
            slates = rule.decide_batch(users.y, users.z, users.sizes, rule_rngs[j])
            slates = slates[:, : int(users.sizes.max())]
            check_slates(slates, users.sizes, env.num_items, rule.name)
            per_rule[j].append(analytic_reward(env, users, slates))
    rewards = [np.concatenate(r) for r in per_rule]
    results = [summarize(rule.name, r) for rule, r in zip(rules, rewards)]
    return (results, rewards) if return_rewards else results
