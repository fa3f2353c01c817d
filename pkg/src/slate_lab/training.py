"""Mini-batch training: maximum likelihood for the rank/reward model and
gradient ascent on IPS-style objectives for factored softmax policies."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import LogBatch, ModelParams, NumericError, Variant, spawn_rng
from .model import batch_loglik_and_grad, init_params
from .policy import SoftmaxPolicyParams, topk_correction


class Objective(str, enum.Enum):
    IPS = "ips"
    IIPS = "iips"
    TOPK_IIPS = "topk-iips"


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 100
    batch_size: int = 516
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    clip_M: float | None = 100.0
    dim: int = 16
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class SparseRows:
    """Row-sparse gradient for an embedding table."""

    rows: np.ndarray
    values: np.ndarray


class Adam:
    """Adam with bias correction.

    Dense gradients update every entry.  A :class:`SparseRows` gradient only
    touches the listed rows (moments of other rows are left as they are), so
    the per-step cost does not grow with the table size.
    """

    def __init__(self, lr: float = 0.005, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | SparseRows]) -> None:
        for name, g in grads.items():
            vals = g.values if isinstance(g, SparseRows) else g
            if not np.all(np.isfinite(vals)):
                bad = np.argwhere(~np.isfinite(np.asarray(vals)))[0]
                if isinstance(g, SparseRows):
                    bad = (int(g.rows[bad[0]]), *bad[1:])
                raise NumericError(f"non-finite gradient at {name}{list(map(int, bad))}")

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if isinstance(g, SparseRows):
                # one gather and one scatter per table
                r = g.rows
                mr = self.beta1 * m[r] + (1.0 - self.beta1) * g.values
                vr = self.beta2 * v[r] + (1.0 - self.beta2) * (g.values * g.values)
                m[r] = mr
                v[r] = vr
                p[r] -= self.lr * (mr / bc1) / (np.sqrt(vr / bc2) + self.eps)
            else:
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | SparseRows]) -> None:
    optimizer.step(params, grads)


@dataclass
class EpochStat:
    epoch: int
    loss: float
    wall_ms: float
    n_records: int


@dataclass
class TrainResult:
    params: ModelParams | SoftmaxPolicyParams
    trace: list[EpochStat] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.trace]

    @property
    def total_ms(self) -> float:
        return sum(e.wall_ms for e in self.trace)


def _epochs(logs: LogBatch, config: TrainConfig, step: Callable[[LogBatch], float],
            on_epoch: Callable[[int], None] | None) -> list[EpochStat]:
    rng = spawn_rng(config.seed, "shuffle")
    n = len(logs)
    trace = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        shuffled = logs.subset(rng.permutation(n))
        total = 0.0
        for lo in range(0, n, config.batch_size):
            mb = shuffled.subset(slice(lo, min(lo + config.batch_size, n)))
            loss = step(mb)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            total += loss * len(mb)
        trace.append(EpochStat(epoch, total / n, (time.perf_counter() - t0) * 1e3, n))
        if on_epoch is not None:
            on_epoch(epoch)
    return trace


def train_prr(logs: LogBatch, variant: Variant | str, config: TrainConfig, num_items: int,
              k_max: int | None = None, init: ModelParams | None = None,
              on_epoch: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Fit a model variant by maximizing the mean log-likelihood of ``logs``."""
    variant = Variant(variant)
    if len(logs) == 0:
        raise ValueError("no training records")
    if variant is Variant.RANK_ONLY:
        logs = logs.successes()
        if len(logs) == 0:
            raise ValueError("rank-only training needs at least one successful slate")
    k_max = k_max or logs.k_max
    if init is None:
        init = init_params(num_items, config.dim, logs.y.shape[1], logs.z.shape[1], k_max,
                           variant, spawn_rng(config.seed, "init"), config.init_scale)
    arrays = {k: v.copy() for k, v in init.arrays().items()}
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def current() -> ModelParams:
        # shares memory with ``arrays``; cheap to rebuild every step
        return ModelParams(arrays["phi"], arrays["Gamma"], arrays["Psi"], arrays["gamma"],
                           arrays["alpha"], variant, float(arrays["phi_scalar"][0]))

    def step(mb: LogBatch) -> float:
        ll, g = batch_loglik_and_grad(current(), mb)
        grads: dict[str, np.ndarray | SparseRows] = {
            "Gamma": -g.Gamma,
            "Psi": SparseRows(g.Psi_rows, -g.Psi_vals),
            "gamma": -g.gamma,
            "alpha": -g.alpha,
        }
        if g.phi is not None:
            grads["phi"] = -g.phi
        if g.phi_scalar is not None:
            grads["phi_scalar"] = np.array([-g.phi_scalar])
        opt.step(arrays, grads)
        return -ll

    cb = None if on_epoch is None else (lambda e: on_epoch(e, ModelParams.from_arrays(arrays, variant)))
    trace = _epochs(logs, config, step, cb)
    return TrainResult(ModelParams.from_arrays(arrays, variant), trace)


# --------------------------------------------------------------------------
# Policy learning


def policy_objective_and_grad(params: SoftmaxPolicyParams, mb: LogBatch, objective: Objective,
                              clip: float | None) -> tuple[float, dict[str, np.ndarray]]:
    """Mini-batch estimator value and its gradient w.r.t. ``Xi`` and ``beta``.

    Logged propensities are constants; clipped weights carry no gradient.
    """
    n = len(mb)
    mask = mb.mask
    S = np.where(mask, mb.slates, 0)
    rows = np.arange(n)
    U = mb.z @ params.Xi.T
    # the (n, P) block dominates the cost, so it is reused in place:
    # logits -> exp(logits - max) -> gradient w.r.t. logits
    block = U @ params.beta.T
    raw_s = np.take_along_axis(block, S, axis=1)
    m = block.max(axis=1, keepdims=True)
    block -= m
    np.exp(block, out=block)
    log_total = np.log(block.sum(axis=1))
    lp_s = raw_s - (m[:, 0] + log_total)[:, None]

    row_coef = np.zeros(n)
    if objective is Objective.IPS:
        log_pi = np.where(mask, lp_s, 0.0).sum(axis=1)
        w = np.exp(log_pi - np.log(mb.prop_slate))
        r = mb.rewards
        live = r > 0
        w_val = w
        if clip is not None:
            live &= w < clip
            w_val = np.minimum(w, clip)
        value = float((r * w_val).sum() / n)
        coef = np.where(live, r * w, 0.0)
        # d pi(s) / d logits = pi(s) * (indicator of s - K p)
        row_coef = coef * mb.sizes
        block *= (-row_coef * np.exp(-log_total) / n)[:, None]
        for pos in range(mask.shape[1]):
            block[rows, S[:, pos]] += np.where(mask[:, pos], coef, 0.0) / n
    else:
        hit = np.flatnonzero(mb.clicks > 0)
        pos = mb.clicks[hit] - 1
        items = S[hit, pos]
        w = np.exp(lp_s[hit, pos] - np.log(mb.prop_marginal[hit, pos]))
        w_val = np.minimum(w, clip) if clip is not None else w
        value = float(w_val.sum() / n)
        coef = np.where(w < clip, w, 0.0) if clip is not None else w.copy()
        if objective is Objective.TOPK_IIPS:
            coef = coef * topk_correction(np.exp(lp_s[hit, pos]), mb.sizes[hit])
        row_coef[hit] = coef
        block *= (-row_coef * np.exp(-log_total) / n)[:, None]
        block[hit, items] += coef / n

    d_beta = block.T @ U
    d_U = block @ params.beta
    d_Xi = d_U.T @ mb.z
    return value, {"Xi": d_Xi, "beta": d_beta}


def init_policy(num_items: int, dim: int, dim_z: int, rng: np.random.Generator,
                scale: float = 0.01) -> SoftmaxPolicyParams:
    return SoftmaxPolicyParams(rng.normal(0.0, scale, size=(dim, dim_z)),
                               rng.normal(0.0, scale, size=(num_items, dim)))


def train_policy(logs: LogBatch, objective: Objective | str, config: TrainConfig, num_items: int,
                 init: SoftmaxPolicyParams | None = None,
                 on_epoch: Callable[[int, SoftmaxPolicyParams], None] | None = None) -> TrainResult:
    """Maximize an IPS-family estimate over a factored softmax policy.

    The trace reports the negated objective as the loss.
    """
    objective = Objective(objective)
    if len(logs) == 0:
        raise ValueError("no training records")
    logs.validate()
    if init is None:
        init = init_policy(num_items, config.dim, logs.z.shape[1], spawn_rng(config.seed, "init"),
                           config.init_scale)
    arrays = {"Xi": init.Xi.copy(), "beta": init.beta.copy()}
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    def step(mb: LogBatch) -> float:
        value, g = policy_objective_and_grad(SoftmaxPolicyParams(arrays["Xi"], arrays["beta"]),
                                             mb, objective, config.clip_M)
        opt.step(arrays, {k: -v for k, v in g.items()})
        return -value

    cb = None if on_epoch is None else (
        lambda e: on_epoch(e, SoftmaxPolicyParams(arrays["Xi"].copy(), arrays["beta"].copy())))
    trace = _epochs(logs, config, step, cb)
    return TrainResult(SoftmaxPolicyParams(arrays["Xi"].copy(), arrays["beta"].copy()), trace)
