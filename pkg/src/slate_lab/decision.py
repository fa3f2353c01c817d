"""Serving-time slate construction.

For the rank/reward model the best slate is found without enumerating slates:
retrieve the ``K`` items with the largest ``u @ Psi[a]`` and put the j-th best
item in the position with the j-th largest multiplicative bias.  Retrieval
goes through a :class:`MipsIndex`; :class:`ExactIndex` is a linear scan and
:class:`IVFIndex` an inverted-file approximation with a calibrated recall.
"""

from __future__ import annotations

import enum
import math
from functools import lru_cache
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .core import ModelParams, Slate, spawn_rng
from .model import user_embedding
from .policy import SoftmaxPolicyParams, gumbel_topk, softmax_logits


class MipsIndex(Protocol):
    recall_target: float

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[int, float]]: ...

    def top_k_batch(self, queries: np.ndarray, k: int) -> np.ndarray: ...


class ExactIndex:
    """Linear scan with partial selection; exact top-k."""

    recall_target = 1.0

    def __init__(self, embeddings: np.ndarray):
        self.embeddings = np.asarray(embeddings, dtype=float)

    @property
    def num_items(self) -> int:
        return self.embeddings.shape[0]

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        scores = self.embeddings @ np.asarray(query, dtype=float)
        idx = _vectorized_topk(scores[None, :], k)[0]
        return [(int(a), float(scores[a])) for a in idx]

    def top_k_batch(self, queries: np.ndarray, k: int, chunk: int = 4096) -> np.ndarray:
        Q = np.atleast_2d(queries)
        out = np.empty((Q.shape[0], min(k, self.num_items)), dtype=np.int64)
        for lo in range(0, Q.shape[0], chunk):
            hi = min(lo + chunk, Q.shape[0])
            out[lo:hi] = _vectorized_topk(Q[lo:hi] @ self.embeddings.T, k)
        return out


def _vectorized_topk(scores: np.ndarray, k: int) -> np.ndarray:
    n, P = scores.shape
    k = min(k, P)
    if k == P:
        return np.argsort(-scores, axis=1, kind="stable")
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(scores, part, axis=1)
    kth = vals.min(axis=1)
    tied = (scores == kth[:, None]).sum(axis=1) != (vals == kth[:, None]).sum(axis=1)
    # order by (-score, item) within the selected block
    key_order = np.argsort(part, axis=1, kind="stable")
    part = np.take_along_axis(part, key_order, axis=1)
    vals = np.take_along_axis(vals, key_order, axis=1)
    o = np.argsort(-vals, axis=1, kind="stable")
    out = np.take_along_axis(part, o, axis=1)
    for i in np.flatnonzero(tied):
        out[i] = np.argsort(-scores[i], kind="stable")[:k]
    return out


class IVFIndex:
    """Inverted-file inner-product index.

    Items are clustered with k-means; a query scans the ``n_probe`` clusters
    whose centroids have the largest inner product with it and reranks the
    candidates exactly.  ``n_probe`` is the smallest value whose measured
    recall@k on calibration queries reaches ``recall_target``.
    """

    def __init__(self, embeddings: np.ndarray, recall_target: float = 0.9, n_lists: int | None = None,
                 calibration_queries: np.ndarray | None = None, calibration_k: int = 8, seed: int = 0):
        if not 0.0 < recall_target <= 1.0:
            raise ValueError("recall target must lie in (0, 1]")
        self.embeddings = np.asarray(embeddings, dtype=float)
        self.recall_target = recall_target
        P, d = self.embeddings.shape
        n_lists = n_lists or max(1, int(round(math.sqrt(P))))
        rng = spawn_rng(seed, "ivf")
        if n_lists >= P:
            centroids, labels = self.embeddings.copy(), np.arange(P)
        else:
            centroids, labels = kmeans2(self.embeddings, n_lists, minit="++", seed=rng, iter=20)
        self.centroids = centroids
        self.lists = [np.flatnonzero(labels == c) for c in range(len(centroids))]
        self.lists = [lst for lst in self.lists if lst.size]
        self.centroids = np.stack([self.embeddings[lst].mean(axis=0) for lst in self.lists])
        if calibration_queries is None:
            calibration_queries = rng.normal(size=(256, d)) * self.embeddings.std(axis=0, keepdims=True)
        self.n_probe = self._calibrate(np.atleast_2d(calibration_queries), min(calibration_k, P))

    def _calibrate(self, queries: np.ndarray, k: int) -> int:
        exact = ExactIndex(self.embeddings).top_k_batch(queries, k)
        # small margin so held-out queries still meet the target
        target = min(1.0, self.recall_target + 0.02)
        for n_probe in range(1, len(self.lists) + 1):
            self.n_probe = n_probe
            got = self.top_k_batch(queries, k)
            hits = sum(len(set(a) & set(b)) for a, b in zip(got.tolist(), exact.tolist()))
            if hits / exact.size >= target:
                return n_probe
        return len(self.lists)

    def _candidates(self, q: np.ndarray, k: int) -> np.ndarray:
        c_scores = self.centroids @ q
        order = np.argsort(-c_scores, kind="stable")
        cand = []
        total = 0
        for j, c in enumerate(order):
            cand.append(self.lists[c])
            total += self.lists[c].size
            if j + 1 >= self.n_probe and total >= k:
                break
        return np.sort(np.concatenate(cand))

    def top_k(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        q = np.asarray(query, dtype=float)
        cand = self._candidates(q, k)
        scores = self.embeddings[cand] @ q
        o = np.argsort(-scores, kind="stable")[:k]
        return [(int(cand[i]), float(scores[i])) for i in o]

    def top_k_batch(self, queries: np.ndarray, k: int) -> np.ndarray:
        Q = np.atleast_2d(queries)
        return np.array([[a for a, _ in self.top_k(q, k)] for q in Q], dtype=np.int64).reshape(len(Q), -1)


def measured_recall(index: MipsIndex, embeddings: np.ndarray, queries: np.ndarray, k: int) -> float:
    exact = ExactIndex(embeddings).top_k_batch(queries, k)
    got = index.top_k_batch(queries, k)
    hits = sum(len(set(a) & set(b)) for a, b in zip(got.tolist(), exact.tolist()))
    return hits / exact.size


# --------------------------------------------------------------------------
# Decision rules


def position_order(gamma: np.ndarray, k: int) -> np.ndarray:
    """Positions ``0..k-1`` sorted by descending bias (ties: lower position first)."""
    g = np.asarray(gamma, dtype=float)[:k]
    if g.size < k:
        raise ValueError(f"need {k} position biases, have {g.size}")
    return np.argsort(-g, kind="stable")


@lru_cache(maxsize=1024)
def _cached_order(gamma_bytes: bytes, k: int) -> tuple[int, ...]:
    return tuple(int(i) for i in position_order(np.frombuffer(gamma_bytes), k))


def _arrange(top: np.ndarray, order: Sequence[int]) -> np.ndarray:
    out = np.empty(len(order), dtype=np.int64)
    out[np.asarray(order)] = top[: len(order)]
    return out


def build_slate(params: ModelParams, z: np.ndarray, k: int, index: MipsIndex | None = None) -> Slate:
    """Best slate of size ``k`` for user features ``z``."""
    if k > params.num_items:
        raise ValueError(f"slate size {k} exceeds catalog size {params.num_items}")
    index = index or ExactIndex(params.Psi)
    hits = [a for a, _ in index.top_k(user_embedding(params, z), k)]
    if len(set(hits)) < k:
        raise ValueError(f"index returned {len(set(hits))} distinct items, need {k}")
    order = _cached_order(np.ascontiguousarray(params.gamma[:k], dtype=float).tobytes(), k)
    return Slate(tuple(int(a) for a in _arrange(np.asarray(hits), order)))


def arrange_batch(top: np.ndarray, sizes: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Place ranked items into positions by descending ``gamma`` for each row."""
    n, k_max = top.shape
    out = np.full((n, k_max), -1, dtype=np.int64)
    for k in np.unique(sizes):
        rows = np.flatnonzero(sizes == k)
        order = position_order(gamma, int(k))
        out[np.ix_(rows, order)] = top[rows, :k]
    return out


def build_slates(params: ModelParams, Z: np.ndarray, sizes: np.ndarray,
                 index: MipsIndex | None = None) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.int64)
    index = index or ExactIndex(params.Psi)
    top = index.top_k_batch(user_embedding(params, Z), int(sizes.max()))
    if top.shape[1] < sizes.max():
        raise ValueError("index returned too few items")
    return arrange_batch(top, sizes, params.gamma)


class DecideMode(str, enum.Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


def policy_decide(params: SoftmaxPolicyParams, z: np.ndarray, k: int, index: MipsIndex | None = None,
                  mode: DecideMode | str = DecideMode.GREEDY, rng: np.random.Generator | None = None) -> Slate:
    mode = DecideMode(mode)
    if k > params.num_items:
        raise ValueError(f"slate size {k} exceeds catalog size {params.num_items}")
    if mode is DecideMode.GREEDY:
        index = index or ExactIndex(params.beta)
        hits = [a for a, _ in index.top_k(np.asarray(z, dtype=float) @ params.Xi.T, k)]
        if len(set(hits)) < k:
            raise ValueError(f"index returned {len(set(hits))} distinct items, need {k}")
        return Slate(tuple(hits))
    if rng is None:
        raise ValueError("sampling requires a random generator")
    return Slate(tuple(int(a) for a in gumbel_topk(softmax_logits(params, z)[None, :], k, rng)[0]))


def policy_decide_batch(params: SoftmaxPolicyParams, Z: np.ndarray, sizes: np.ndarray,
                        mode: DecideMode | str, rng: np.random.Generator | None = None,
                        index: MipsIndex | None = None, chunk: int = 4096) -> np.ndarray:
    mode = DecideMode(mode)
    sizes = np.asarray(sizes, dtype=np.int64)
    k_max = int(sizes.max())
    n = len(sizes)
    if mode is DecideMode.GREEDY:
        index = index or ExactIndex(params.beta)
        top = index.top_k_batch(Z @ params.Xi.T, k_max)
    else:
        if rng is None:
            raise ValueError("sampling requires a random generator")
        top = np.empty((n, k_max), dtype=np.int64)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            top[lo:hi] = gumbel_topk(softmax_logits(params, Z[lo:hi]), k_max, rng)
    return np.where(np.arange(k_max)[None, :] < sizes[:, None], top, -1)


# --------------------------------------------------------------------------
# Rules consumed by the A/B harnesses


class DecisionRule:
    """Maps batches of contexts ``(y, z, sizes)`` to padded slates."""

    name: str = "rule"

    def decide_batch(self, y: np.ndarray, z: np.ndarray, sizes: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ModelRule(DecisionRule):
    def __init__(self, params: ModelParams, name: str = "prr", index: MipsIndex | None = None):
        self.params = params
        self.name = name
        self.index = index or ExactIndex(params.Psi)

    def decide_batch(self, y, z, sizes, rng):
        return build_slates(self.params, z, sizes, self.index)


class PolicyRule(DecisionRule):
    def __init__(self, params: SoftmaxPolicyParams, name: str = "ips",
                 mode: DecideMode | str = DecideMode.SAMPLE, index: MipsIndex | None = None):
        self.params = params
        self.name = name
        self.mode = DecideMode(mode)
        self.index = index

    def decide_batch(self, y, z, sizes, rng):
        return policy_decide_batch(self.params, z, sizes, self.mode, rng, self.index)


class UniformRule(DecisionRule):
    def __init__(self, num_items: int, name: str = "uniform"):
        self.num_items = num_items
        self.name = name

    def decide_batch(self, y, z, sizes, rng):
        sizes = np.asarray(sizes)
        k_max = int(sizes.max())
        top = np.empty((len(sizes), k_max), dtype=np.int64)
        for lo in range(0, len(sizes), 4096):
            hi = min(lo + 4096, len(sizes))
            top[lo:hi] = gumbel_topk(np.zeros((hi - lo, self.num_items)), k_max, rng)
        return np.where(np.arange(k_max)[None, :] < sizes[:, None], top, -1)


class CallableRule(DecisionRule):
    """Wrap a per-context function ``(y, z, k) -> Slate | sequence``."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray, int], Slate | Sequence[int]], name: str = "callable"):
        self.fn = fn
        self.name = name

    def decide_batch(self, y, z, sizes, rng):
        sizes = np.asarray(sizes)
        out = np.full((len(sizes), int(sizes.max())), -1, dtype=np.int64)
        for i, k in enumerate(sizes):
            s = self.fn(y[i], z[i], int(k))
            items = s.items if isinstance(s, Slate) else tuple(s)
            out[i, : len(items)] = items
        return out
