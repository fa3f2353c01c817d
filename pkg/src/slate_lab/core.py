"""Domain types and numerically stable kernels shared across the package.

Items are 0-based indices into a catalog of ``P`` items.  A slate is an ordered
tuple of distinct items, and feedback is the one-hot vector
``(no_click, click_1, ..., click_K)``.  Per-record types are small frozen
dataclasses; bulk data travels as a columnar :class:`LogBatch`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

LOG_SCHEMA_VERSION = 1


class SlateLabError(Exception):
    """Base class for package errors."""


class DegenerateScoreError(SlateLabError, ValueError):
    pass


class SupportViolation(SlateLabError, ValueError):
    pass


class DataError(SlateLabError, ValueError):
    """Malformed or inconsistent input data."""


class NumericError(SlateLabError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class Variant(str, enum.Enum):
    FULL = "full"
    REWARD_ONLY = "reward"
    RANK_ONLY = "rank"
    BIAS_ONLY = "bias"


# --------------------------------------------------------------------------
# Kernels


def log_add_exp(a: float, b: float) -> float:
    """Return ``log(exp(a) + exp(b))`` without overflow."""
    if a == -math.inf and b == -math.inf:
        return -math.inf
    hi, lo = (a, b) if a >= b else (b, a)
    if hi == math.inf:
        return math.inf
    return hi + math.log1p(math.exp(lo - hi))


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-sum-exp along ``axis``; rows of all ``-inf`` give ``-inf``."""
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    return np.squeeze(out, axis=axis)


def softmax_normalize(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Map log-scores to a probability vector.

    Raises :class:`DegenerateScoreError` if no score is finite.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if np.any(np.isnan(s)) or np.any(s == np.inf):
        raise DegenerateScoreError("degenerate score vector")
    m = s.max()
    if not np.isfinite(m):
        raise DegenerateScoreError("degenerate score vector")
    e = np.exp(s - m)
    return e / e.sum()


def sample_categorical(p: Sequence[float] | np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total}, expected 1")
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    # guard against landing on a trailing zero-mass entry through rounding
    while p[min(idx, p.size - 1)] == 0.0 and idx > 0:
        idx -= 1
    return min(idx, p.size - 1)


def sample_categorical_rows(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row from row-wise log-probabilities (``-inf`` = masked)."""
    u = rng.random(logp.shape[0])
    p = np.exp(logp - logsumexp(logp, axis=1)[:, None])
    cdf = np.cumsum(p, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    # rounding can push past the last positive entry
    last_valid = logp.shape[1] - 1 - np.argmax(np.isfinite(logp[:, ::-1]), axis=1)
    return np.minimum(idx, last_valid)


def spawn_rng(seed: int, *key: int | str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    words = [_key_word(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(words)))


def _key_word(k: int | str) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    h = 2166136261
    for ch in str(k).encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Catalog:
    num_items: int
    embedding_dim: int

    def __post_init__(self) -> None:
        if self.num_items < 2:
            raise ValueError("catalog needs at least 2 items")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")


@dataclass(frozen=True)
class Context:
    y: np.ndarray
    z: np.ndarray
    slate_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(-1))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(-1))
        if self.slate_size < 1:
            raise ValueError("slate_size must be >= 1")


@dataclass(frozen=True)
class Slate:
    items: tuple[int, ...]

    def __post_init__(self) -> None:
        items = tuple(int(a) for a in self.items)
        if len(items) < 1:
            raise ValueError("empty slate")
        if len(set(items)) != len(items):
            raise ValueError(f"slate has repeated items: {items}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[int]:
        return iter(self.items)


@dataclass(frozen=True)
class Feedback:
    one_hot: tuple[int, ...]

    def __post_init__(self) -> None:
        oh = tuple(int(v) for v in self.one_hot)
        if len(oh) < 2 or sorted(set(oh)) not in ([0, 1], [1]) or sum(oh) != 1:
            raise ValueError(f"feedback must be one-hot, got {oh}")
        object.__setattr__(self, "one_hot", oh)

    @classmethod
    def from_index(cls, index: int, slate_size: int) -> "Feedback":
        oh = [0] * (slate_size + 1)
        oh[index] = 1
        return cls(tuple(oh))

    @property
    def index(self) -> int:
        """0 for no interaction, ``l`` for an interaction at position ``l`` (1-based)."""
        return self.one_hot.index(1)

    @property
    def reward(self) -> int:
        return 1 - self.one_hot[0]


@dataclass(frozen=True)
class LogRecord:
    context: Context
    slate: Slate
    feedback: Feedback
    slate_propensity: float
    marginal_propensities: tuple[float, ...]

    def __post_init__(self) -> None:
        k = len(self.slate)
        if self.context.slate_size != k:
            raise ValueError("context slate size does not match slate length")
        if len(self.feedback.one_hot) != k + 1:
            raise ValueError("feedback length must be slate length + 1")
        marg = tuple(float(p) for p in self.marginal_propensities)
        if len(marg) != k:
            raise ValueError("one marginal propensity per slate position required")
        if not (0.0 < self.slate_propensity <= 1.0) or any(not (0.0 < p <= 1.0) for p in marg):
            raise SupportViolation("propensities must lie in (0, 1]")
        object.__setattr__(self, "marginal_propensities", marg)


@dataclass(frozen=True)
class ModelParams:
    """Learnable parameters of the slate click model.

    ``Gamma`` maps user-interest features into the item embedding space
    (``u = Gamma @ z``); ``gamma``/``alpha`` are per-position multiplicative and
    additive biases in log-space.  ``phi_scalar`` is only read by the
    bias-only variant, which replaces ``y @ phi`` with a single constant.
    """

    phi: np.ndarray
    Gamma: np.ndarray
    Psi: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    variant: Variant = Variant.FULL
    phi_scalar: float = 0.0

    def __post_init__(self) -> None:
        for name in ("phi", "Gamma", "Psi", "gamma", "alpha"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "phi_scalar", float(self.phi_scalar))
        d, dz = self.Gamma.shape
        if self.Psi.ndim != 2 or self.Psi.shape[1] != d:
            raise ValueError(f"Psi must be P x {d}, got {self.Psi.shape}")
        if self.gamma.shape != self.alpha.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and alpha must be vectors of equal length")

    @property
    def num_items(self) -> int:
        return self.Psi.shape[0]

    @property
    def dim(self) -> int:
        return self.Psi.shape[1]

    @property
    def dim_y(self) -> int:
        return self.phi.shape[0]

    @property
    def dim_z(self) -> int:
        return self.Gamma.shape[1]

    @property
    def k_max(self) -> int:
        return self.gamma.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "phi": self.phi,
            "Gamma": self.Gamma,
            "Psi": self.Psi,
            "gamma": self.gamma,
            "alpha": self.alpha,
            "phi_scalar": np.array([self.phi_scalar]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], variant: Variant) -> "ModelParams":
        return cls(
            phi=arrays["phi"].copy(),
            Gamma=arrays["Gamma"].copy(),
            Psi=arrays["Psi"].copy(),
            gamma=arrays["gamma"].copy(),
            alpha=arrays["alpha"].copy(),
            variant=variant,
            phi_scalar=float(np.asarray(arrays["phi_scalar"]).reshape(-1)[0]),
        )

    def with_variant(self, variant: Variant) -> "ModelParams":
        return ModelParams(self.phi, self.Gamma, self.Psi, self.gamma, self.alpha, variant, self.phi_scalar)


# --------------------------------------------------------------------------
# Columnar logs


@dataclass
class LogBatch:
    """Column store for logged impressions.

    ``slates`` is ``(n, K_max)`` with ``-1`` padding beyond each record's size;
    ``clicks`` holds the one-hot index (0 = no interaction, ``l`` = position ``l``).
    Padded marginal propensities are 1.
    """

    y: np.ndarray
    z: np.ndarray
    slates: np.ndarray
    sizes: np.ndarray
    clicks: np.ndarray
    prop_slate: np.ndarray
    prop_marginal: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.sizes)

        def rows(a, dtype):
            a = np.asarray(a, dtype=dtype)
            # keep the column count of empty 2-d inputs
            return a.reshape(n, a.shape[1] if a.ndim == 2 else -1)

        self.y = rows(self.y, float)
        self.z = rows(self.z, float)
        self.slates = rows(self.slates, np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.clicks = np.asarray(self.clicks, dtype=np.int64)
        self.prop_slate = np.asarray(self.prop_slate, dtype=float)
        self.prop_marginal = rows(self.prop_marginal, float)

    def __len__(self) -> int:
        return len(self.sizes)

    @property
    def k_max(self) -> int:
        return self.slates.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.k_max)[None, :] < self.sizes[:, None]

    @property
    def rewards(self) -> np.ndarray:
        return (self.clicks > 0).astype(float)

    def subset(self, idx: np.ndarray) -> "LogBatch":
        return LogBatch(
            self.y[idx], self.z[idx], self.slates[idx], self.sizes[idx], self.clicks[idx],
            self.prop_slate[idx], self.prop_marginal[idx], dict(self.meta),
        )

    def successes(self) -> "LogBatch":
        return self.subset(np.flatnonzero(self.clicks > 0))

    def validate(self, num_items: int | None = None) -> None:
        """Check the one-hot, distinct-item and positivity invariants."""
        mask = self.mask
        if np.any(self.sizes < 1) or np.any(self.sizes > self.k_max):
            raise DataError("slate sizes out of range")
        if np.any(self.clicks < 0) or np.any(self.clicks > self.sizes):
            raise DataError("feedback index out of range")
        if np.any(self.slates[mask] < 0) or np.any(self.slates[~mask] != -1):
            raise DataError("slate padding inconsistent with sizes")
        if num_items is not None and np.any(self.slates[mask] >= num_items):
            raise DataError("item index out of catalog range")
        srt = np.sort(np.where(mask, self.slates, -np.arange(1, self.k_max + 1)[None, :] - 1), axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise DataError("slate contains repeated items")
        if np.any(~(self.prop_slate > 0)) or np.any(~(self.prop_marginal[mask] > 0)):
            raise SupportViolation("support violation: non-positive propensity")

    @classmethod
    def from_records(cls, records: Sequence[LogRecord], k_max: int | None = None) -> "LogBatch":
        n = len(records)
        if n == 0:
            raise DataError("no records")
        k_max = k_max or max(len(r.slate) for r in records)
        slates = np.full((n, k_max), -1, dtype=np.int64)
        marg = np.ones((n, k_max))
        for i, r in enumerate(records):
            k = len(r.slate)
            slates[i, :k] = r.slate.items
            marg[i, :k] = r.marginal_propensities
        return cls(
            y=np.stack([r.context.y for r in records]),
            z=np.stack([r.context.z for r in records]),
            slates=slates,
            sizes=np.array([len(r.slate) for r in records]),
            clicks=np.array([r.feedback.index for r in records]),
            prop_slate=np.array([r.slate_propensity for r in records]),
            prop_marginal=marg,
        )

    def record(self, i: int) -> LogRecord:
        k = int(self.sizes[i])
        return LogRecord(
            context=Context(self.y[i], self.z[i], k),
            slate=Slate(tuple(int(a) for a in self.slates[i, :k])),
            feedback=Feedback.from_index(int(self.clicks[i]), k),
            slate_propensity=float(self.prop_slate[i]),
            marginal_propensities=tuple(float(p) for p in self.prop_marginal[i, :k]),
        )

    def records(self) -> Iterator[LogRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @classmethod
    def concatenate(cls, batches: Sequence["LogBatch"]) -> "LogBatch":
        k_max = max(b.k_max for b in batches)

        def pad(a: np.ndarray, fill: float) -> np.ndarray:
            if a.shape[1] == k_max:
                return a
            out = np.full((a.shape[0], k_max), fill, dtype=a.dtype)
            out[:, : a.shape[1]] = a
            return out

        return cls(
            y=np.concatenate([b.y for b in batches]),
            z=np.concatenate([b.z for b in batches]),
            slates=np.concatenate([pad(b.slates, -1) for b in batches]),
            sizes=np.concatenate([b.sizes for b in batches]),
            clicks=np.concatenate([b.clicks for b in batches]),
            prop_slate=np.concatenate([b.prop_slate for b in batches]),
            prop_marginal=np.concatenate([pad(b.prop_marginal, 1.0) for b in batches]),
        )


# --------------------------------------------------------------------------
# JSONL serialization


def _row_to_json(batch: LogBatch, i: int) -> str:
    k = int(batch.sizes[i])
    fb = [0] * (k + 1)
    fb[int(batch.clicks[i])] = 1
    obj = {
        "v": LOG_SCHEMA_VERSION,
        "y": batch.y[i].tolist(),
        "z": batch.z[i].tolist(),
        "slate": batch.slates[i, :k].tolist(),
        "feedback": fb,
        "prop_slate": float(batch.prop_slate[i]),
        "prop_marginal": batch.prop_marginal[i, :k].tolist(),
    }
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(logs: LogBatch | Iterable[LogRecord], path: str | Path) -> None:
    if not isinstance(logs, LogBatch):
        logs = LogBatch.from_records(list(logs))
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(logs)):
            fh.write(_row_to_json(logs, i))
            fh.write("\n")


def read_jsonl(path: str | Path) -> LogBatch:
    ys, zs, slates, fbs, ps, pms = [], [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if obj.get("v") != LOG_SCHEMA_VERSION:
                raise DataError(f"{path}:{lineno}: unsupported schema version {obj.get('v')!r}")
            try:
                fb = Feedback(tuple(obj["feedback"]))
                slate = Slate(tuple(obj["slate"]))
                ys.append(obj["y"])
                zs.append(obj["z"])
                slates.append(list(slate.items))
                fbs.append(fb)
                ps.append(float(obj["prop_slate"]))
                pms.append([float(p) for p in obj["prop_marginal"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if len(fb.one_hot) != len(slate) + 1 or len(pms[-1]) != len(slate):
                raise DataError(f"{path}:{lineno}: inconsistent field lengths")
    if not slates:
        raise DataError(f"{path}: no records")
    n = len(slates)
    k_max = max(len(s) for s in slates)
    S = np.full((n, k_max), -1, dtype=np.int64)
    PM = np.ones((n, k_max))
    for i, (s, pm) in enumerate(zip(slates, pms)):
        S[i, : len(s)] = s
        PM[i, : len(pm)] = pm
    batch = LogBatch(
        y=np.array(ys, dtype=float).reshape(n, -1),
        z=np.array(zs, dtype=float).reshape(n, -1),
        slates=S,
        sizes=np.array([len(s) for s in slates]),
        clicks=np.array([fb.index for fb in fbs]),
        prop_slate=np.array(ps),
        prop_marginal=PM,
    )
    batch.validate()
    return batch
