"""Session-completion simulation.

Each user's interaction list is split into a visible part (the context) and a
hidden part.  A slate is rewarded according to how many hidden items it
contains, with per-position weights ``w`` and a no-click weight ``w0``::

    p0 = w0 K / (w0 K + sum_l w_l b_l),    p_k = w_k b_k / (w0 K + sum_l w_l b_l)

where ``b_l`` flags whether the l-th slate item is hidden for the user.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, Feedback, LogBatch, Slate, sample_categorical_rows
from .decision import DecisionRule
from .environment import ABResult, check_slates, summarize
from .policy import PolicySpec, sample_slates

_HASH_MULT = 2654435761  # Knuth multiplicative hash


@dataclass
class InteractionDataset:
    """Per-user item lists over a catalog of contiguous item indices."""

    user_items: list[np.ndarray]
    num_items: int
    user_ids: list[str] | None = None
    item_ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.user_items = [np.asarray(items, dtype=np.int64) for items in self.user_items]
        for items in self.user_items:
            if items.size and (items.min() < 0 or items.max() >= self.num_items):
                raise DataError("item index outside catalog")

    @property
    def num_users(self) -> int:
        return len(self.user_items)

    @property
    def counts(self) -> np.ndarray:
        """Total occurrences of every item across users."""
        if not self.user_items:
            return np.zeros(self.num_items, dtype=np.int64)
        return np.bincount(np.concatenate(self.user_items), minlength=self.num_items)


def load_interactions(path: str | Path) -> InteractionDataset:
    """Read ``user_id,item_id[,timestamp]`` rows (header optional).

    With timestamps, each user's list is ordered by time; otherwise file order
    is kept.  Ids are arbitrary strings mapped to contiguous indices in order
    of first appearance.
    """
    users: dict[str, list[tuple[float, int, int]]] = {}
    item_index: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() in ("user_id", "user"):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected user_id,item_id[,timestamp]")
            u, a = row[0].strip(), row[1].strip()
            try:
                ts = float(row[2]) if len(row) > 2 and row[2].strip() else float(lineno)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[2]!r}") from None
            idx = item_index.setdefault(a, len(item_index))
            users.setdefault(u, []).append((ts, lineno, idx))
    if not users:
        raise DataError(f"{path}: no interactions")
    user_ids = list(users)
    lists = [np.array([i for _, _, i in sorted(users[u])], dtype=np.int64) for u in user_ids]
    item_ids = [None] * len(item_index)
    for k, v in item_index.items():
        item_ids[v] = k
    return InteractionDataset(lists, len(item_index), user_ids, item_ids)


@dataclass
class SessionSplit:
    view: list[np.ndarray]
    hide: list[np.ndarray]
    num_items: int
    counts: np.ndarray
    dropped: int = 0
    user_ids: list[str] | None = None

    @property
    def num_users(self) -> int:
        return len(self.view)

    def hidden_sets(self) -> list[frozenset[int]]:
        return [frozenset(int(a) for a in h) for h in self.hide]


def split_sessions(dataset: InteractionDataset, hide_fraction: float, rng: np.random.Generator) -> SessionSplit:
    """Randomly split every user's distinct items into visible and hidden parts.

    Users with fewer than two distinct items are dropped (count in ``dropped``).
    """
    if dataset.num_users == 0:
        raise DataError("empty dataset")
    if not 0.0 < hide_fraction < 1.0:
        raise ValueError("hide_fraction must lie in (0, 1)")
    view, hide, kept_ids = [], [], []
    dropped = 0
    for u, items in enumerate(dataset.user_items):
        distinct = np.unique(items)
        n = distinct.size
        if n < 2:
            dropped += 1
            continue
        n_hide = min(max(int(math.floor(hide_fraction * n + 0.5)), 1), n - 1)
        perm = rng.permutation(n)
        hide.append(np.sort(distinct[perm[:n_hide]]))
        view.append(np.sort(distinct[perm[n_hide:]]))
        if dataset.user_ids is not None:
            kept_ids.append(dataset.user_ids[u])
    if not view:
        raise DataError("no user has at least two distinct interactions")
    return SessionSplit(view, hide, dataset.num_items, dataset.counts, dropped,
                        kept_ids if dataset.user_ids is not None else None)


@dataclass(frozen=True)
class SessionBiases:
    w0: float
    w: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        if not self.w0 > 0 or np.any(self.w <= 0):
            raise ValueError("session weights must be positive")

    @property
    def k_max(self) -> int:
        return self.w.size


def draw_biases(k_max: int, rng: np.random.Generator, w0_floor: float = 0.1) -> SessionBiases:
    """``w0 ~ N(3, 9)`` truncated to ``> w0_floor``; ``w_l`` uniform on ``{1..16}``."""
    while True:
        w0 = float(rng.normal(3.0, 3.0))
        if w0 > w0_floor:
            break
    return SessionBiases(w0, rng.integers(1, 17, size=k_max).astype(float))


def hit_vector(slate: Sequence[int] | Slate, hidden: frozenset[int] | set[int]) -> np.ndarray:
    items = slate.items if isinstance(slate, Slate) else slate
    return np.array([1.0 if int(a) in hidden else 0.0 for a in items])


def session_probs(hits: np.ndarray, biases: SessionBiases) -> np.ndarray:
    """Category probabilities ``(p0, p1, ..., pK)`` for hit vector(s) ``hits``."""
    b = np.atleast_2d(np.asarray(hits, dtype=float))
    k = b.shape[1]
    if k > biases.k_max:
        raise ValueError(f"slate size {k} exceeds K_max {biases.k_max}")
    sizes = np.full(b.shape[0], k)
    return _probs(b, sizes, biases).reshape(np.asarray(hits).shape[:-1] + (k + 1,))


def _probs(b: np.ndarray, sizes: np.ndarray, biases: SessionBiases) -> np.ndarray:
    k = b.shape[1]
    item_w = biases.w[:k] * b
    head = biases.w0 * sizes
    denom = head + item_w.sum(axis=1)
    return np.concatenate([head[:, None], item_w], axis=1) / denom[:, None]


def session_reward(hits: np.ndarray, sizes: np.ndarray, biases: SessionBiases) -> np.ndarray:
    """Analytic success probability ``1 - p0`` per impression."""
    b = np.asarray(hits, dtype=float)
    item = (biases.w[: b.shape[1]] * b).sum(axis=1)
    return item / (biases.w0 * np.asarray(sizes) + item)


def session_feedback(slate: Slate | Sequence[int], hidden: frozenset[int] | set[int],
                     biases: SessionBiases, rng: np.random.Generator) -> Feedback:
    b = hit_vector(slate, hidden)
    p = session_probs(b, biases)
    idx = int(sample_categorical_rows(_safe_log(p)[None, :], rng)[0])
    return Feedback.from_index(idx, len(b))


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def encode_context(items: np.ndarray, num_items: int, dim_z: int) -> np.ndarray:
    """Multi-hot encoding of visible items, hashed into ``dim_z`` buckets when
    the catalog is larger than ``dim_z``."""
    z = np.zeros(dim_z)
    items = np.asarray(items, dtype=np.int64)
    if num_items <= dim_z:
        z[items] = 1.0
    else:
        np.add.at(z, (items * _HASH_MULT) % (2**32) % dim_z, 1.0)
    return z


def context_matrix(split: SessionSplit, dim_z: int) -> np.ndarray:
    return np.stack([encode_context(v, split.num_items, dim_z) for v in split.view])


def _hits(slates: np.ndarray, users: np.ndarray, split: SessionSplit) -> np.ndarray:
    """Hidden-item indicator for every slate cell (padding gives 0)."""
    hidden = split.hidden_sets()
    out = np.zeros(slates.shape)
    for i, (u, row) in enumerate(zip(users, slates)):
        h = hidden[u]
        for j, a in enumerate(row):
            if a >= 0 and int(a) in h:
                out[i, j] = 1.0
    return out


def generate_session_logs(split: SessionSplit, biases: SessionBiases, n: int, rng: np.random.Generator,
                          dim_z: int = 64, policy: PolicySpec | None = None) -> LogBatch:
    """Log ``n`` impressions of a popularity-proportional logging policy."""
    if not np.any(split.counts > 0):
        raise DataError("item counts are all zero")
    policy = policy or PolicySpec.topk_pop(split.counts.astype(float))
    k_max = biases.k_max
    if np.count_nonzero(split.counts) < k_max:
        raise DataError("fewer popular items than the maximum slate size")
    Zall = context_matrix(split, dim_z)
    users = rng.integers(0, split.num_users, size=n)
    sizes = rng.integers(1, k_max + 1, size=n)
    Z = Zall[users]
    slates, prop, marg = sample_slates(policy, Z, sizes, rng)
    b = _hits(slates, users, split)
    probs = _probs(b, sizes, biases)
    clicks = sample_categorical_rows(_safe_log(probs), rng)
    batch = LogBatch(np.zeros((n, 0)), Z, slates, sizes, clicks, prop, marg,
                     meta={"logging_policy": "topkpop", "users": users})
    return batch


def run_session_abtest(split: SessionSplit, biases: SessionBiases, rules: Sequence[DecisionRule],
                       n_test: int, rng_seed: int = 42, dim_z: int = 64,
                       return_rewards: bool = False):
    """Paired A/B test on the session-completion simulator."""
    from .core import spawn_rng

    user_rng = spawn_rng(rng_seed, "session-abtest-users")
    rule_rngs = [spawn_rng(rng_seed, "session-abtest-rule") for _ in rules]
    Zall = context_matrix(split, dim_z)
    users = user_rng.integers(0, split.num_users, size=n_test)
    sizes = user_rng.integers(1, biases.k_max + 1, size=n_test)
    Z = Zall[users]
    y = np.zeros((n_test, 0))
    rewards = []
    for rule, r in zip(rules, rule_rngs):
        slates = rule.decide_batch(y, Z, sizes, r)[:, : int(sizes.max())]
        check_slates(slates, sizes, split.num_items, rule.name)
        rewards.append(session_reward(_hits(slates, users, split), sizes, biases))
    results: list[ABResult] = [summarize(rule.name, rw) for rule, rw in zip(rules, rewards)]
    return (results, rewards) if return_rewards else results


def synthetic_interactions(num_users: int, num_items: int, rng: np.random.Generator,
                           mean_length: float = 8.0, zipf: float = 1.1) -> InteractionDataset:
    """Small Zipf-popular interaction dataset for tests and demos."""
    ranks = np.arange(1, num_items + 1, dtype=float)
    pop = ranks ** -zipf
    pop /= pop.sum()
    lists = []
    for _ in range(num_users):
        k = max(2, int(rng.poisson(mean_length)))
        lists.append(rng.choice(num_items, size=k, p=pop))
    return InteractionDataset(lists, num_items)


def counts_from_lists(lists: Sequence[Sequence[int]]) -> Counter:
    return Counter(int(a) for lst in lists for a in lst)
