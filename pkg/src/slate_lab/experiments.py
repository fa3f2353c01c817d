"""Sweep and timing harnesses behind the ``sweep`` and ``bench`` commands."""

from __future__ import annotations

import csv
import fcntl
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import LogBatch, Variant, spawn_rng
from .decision import DecisionRule, ModelRule, PolicyRule
from .environment import OracleEnv, build_oracle, generate_logs, run_abtest
from .io import config_hash, oracle_config
from .training import Objective, TrainConfig, TrainResult, train_policy, train_prr

PRR_METHODS = {"prr": Variant.FULL, "prr-reward": Variant.REWARD_ONLY,
               "prr-rank": Variant.RANK_ONLY, "prr-bias": Variant.BIAS_ONLY}
POLICY_METHODS = {"ips": Objective.IPS, "iips": Objective.IIPS, "topk-iips": Objective.TOPK_IIPS}
METHODS = tuple(PRR_METHODS) + tuple(POLICY_METHODS)

SWEEP_FIELDS = ["cell_id", "num_items", "k_max", "logging_policy", "method", "mean_reward",
                "ci_low", "ci_high", "n_train", "n_test", "train_wall_ms", "seed", "config_hash",
                "status", "error"]
BENCH_FIELDS = ["num_items", "method", "epoch", "wall_ms", "n_records", "n", "k_max", "dim",
                "seed", "config_hash"]
TIMING_COLUMNS = {"train_wall_ms", "wall_ms"}


def train_config(cfg: dict, method: str) -> TrainConfig:
    base = {k: v for k, v in cfg.get("train", {}).items() if k != "per_method"}
    base.update(cfg.get("train", {}).get("per_method", {}).get(method, {}))
    base.setdefault("seed", cfg.get("seed", 42))
    return TrainConfig(**base)


def train_method(method: str, logs: LogBatch, cfg: dict, num_items: int, k_max: int) -> TrainResult:
    tc = train_config(cfg, method)
    if method in PRR_METHODS:
        return train_prr(logs, PRR_METHODS[method], tc, num_items, k_max=k_max)
    if method in POLICY_METHODS:
        return train_policy(logs, POLICY_METHODS[method], tc, num_items)
    raise ValueError(f"unknown method {method!r}")


def method_rule(method: str, result: TrainResult, cfg: dict) -> DecisionRule:
    if method in PRR_METHODS:
        return ModelRule(result.params, name=method)
    return PolicyRule(result.params, name=method, mode=cfg.get("abtest", {}).get("policy_decide", "sample"))


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# --------------------------------------------------------------------------
# Sweep


@dataclass(frozen=True)
class Cell:
    num_items: int
    k_max: int
    logging_policy: str

    @property
    def cell_id(self) -> str:
        return f"P{self.num_items}-K{self.k_max}-{self.logging_policy}"


def sweep_cells(cfg: dict) -> list[Cell]:
    sw = cfg["sweep"]
    return [Cell(p, k, lp) for lp in sw["logging_policies"] for p in sw["num_items"] for k in sw["k_max"]]


def run_cell(cfg: dict, cell: Cell) -> list[dict]:
    """Build the oracle, log, train every method and A/B test them on one
    paired user stream.  Failures become rows with ``status=failed``."""
    seed = cfg["seed"]
    sw = cfg["sweep"]
    n_train = sw["n_train"]
    n_test = cfg["abtest"]["n_test"]
    chash = config_hash(cfg)
    base = {"cell_id": cell.cell_id, "num_items": cell.num_items, "k_max": cell.k_max,
            "logging_policy": cell.logging_policy, "n_train": n_train, "n_test": n_test,
            "seed": seed, "config_hash": chash}

    def failed(method: str, exc: BaseException, ms: float = 0.0) -> dict:
        return {**base, "method": method, "mean_reward": "", "ci_low": "", "ci_high": "",
                "train_wall_ms": _fmt(ms), "status": "failed",
                "error": f"{type(exc).__name__}: {exc}".replace("\n", " ")}

    try:
        env = build_oracle(oracle_config(cfg, num_items=cell.num_items, k_max=cell.k_max))
        logs = generate_logs(env, env.logging_policy(cell.logging_policy), n_train,
                             spawn_rng(seed, "logs", cell.cell_id))
    except Exception as exc:  # noqa: BLE001 - the whole cell is reported as failed
        return [failed(m, exc) for m in sw["methods"]]

    rules: list[DecisionRule] = []
    timings: dict[str, float] = {}
    rows: dict[str, dict] = {}
    for m in sw["methods"]:
        t0 = time.perf_counter()
        try:
            res = train_method(m, logs, cfg, cell.num_items, cell.k_max)
            rules.append(method_rule(m, res, cfg))
            timings[m] = (time.perf_counter() - t0) * 1e3
        except Exception as exc:  # noqa: BLE001
            rows[m] = failed(m, exc, (time.perf_counter() - t0) * 1e3)
    try:
        results = run_abtest(env, rules, n_test, seed) if rules else []
        for rule, r in zip(rules, results):
            rows[rule.name] = {**base, "method": rule.name, "mean_reward": _fmt(r.mean),
                               "ci_low": _fmt(r.ci_low), "ci_high": _fmt(r.ci_high),
                               "train_wall_ms": _fmt(timings[rule.name]), "status": "ok", "error": ""}
    except Exception as exc:  # noqa: BLE001
        for rule in rules:
            rows[rule.name] = failed(rule.name, exc, timings[rule.name])
    return [rows[m] for m in sw["methods"]]


def _append_rows(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    """Append under an exclusive lock so concurrent writers never interleave."""
    with open(path, "a", newline="", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            if fh.tell() == 0:
                csv.DictWriter(fh, fields).writeheader()
            csv.DictWriter(fh, fields).writerows(rows)
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _done_cells(path: Path, chash: str, methods: Iterable[str]) -> set[str]:
    if not path.exists() or path.stat().st_size == 0:
        return set()
    seen: dict[str, set[str]] = {}
    for row in read_csv(path):
        if row.get("config_hash") == chash and row.get("status") == "ok":
            seen.setdefault(row["cell_id"], set()).add(row["method"])
    need = set(methods)
    return {c for c, ms in seen.items() if need <= ms}


def worker_count(n_tasks: int) -> int:
    env = os.environ.get("SLATE_LAB_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def _cell_task(args):
    cfg, cell = args
    return run_cell(cfg, cell)


def run_sweep(cfg: dict, out: str | Path, progress=None) -> list[dict]:
    """Run every grid cell not already completed in ``out`` and append rows.

    Returns all rows of ``out`` belonging to this configuration.
    """
    out = Path(out)
    chash = config_hash(cfg)
    done = _done_cells(out, chash, cfg["sweep"]["methods"])
    todo = [c for c in sweep_cells(cfg) if c.cell_id not in done]
    workers = worker_count(len(todo))
    if workers == 1:
        for cell in todo:
            rows = run_cell(cfg, cell)
            _append_rows(out, rows, SWEEP_FIELDS)
            if progress:
                progress(cell, rows)
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            for cell, rows in zip(todo, pool.map(_cell_task, [(cfg, c) for c in todo])):
                _append_rows(out, rows, SWEEP_FIELDS)
                if progress:
                    progress(cell, rows)
    return [r for r in read_csv(out) if r["config_hash"] == chash] if out.exists() else []


# --------------------------------------------------------------------------
# Timing benchmark


def run_bench(cfg: dict, out: str | Path | None = None) -> list[dict]:
    """Per-epoch training time of each method across catalog sizes."""
    b = cfg["bench"]
    seed = cfg["seed"]
    chash = config_hash(cfg)
    rows = []
    for P in b["num_items"]:
        env = build_oracle(oracle_config(cfg, num_items=P, k_max=b["k_max"]))
        logs = generate_logs(env, env.logging_policy(b["logging_policy"]), b["n"],
                             spawn_rng(seed, "bench-logs", P))
        for m in b["methods"]:
            tc = train_config(cfg, m)
            tc.epochs = b["epochs"]
            if m in PRR_METHODS:
                res = train_prr(logs, PRR_METHODS[m], tc, P, k_max=b["k_max"])
            else:
                res = train_policy(logs, POLICY_METHODS[m], tc, P)
            for e in res.trace:
                rows.append({"num_items": P, "method": m, "epoch": e.epoch, "wall_ms": _fmt(e.wall_ms),
                             "n_records": e.n_records, "n": b["n"], "k_max": b["k_max"], "dim": tc.dim,
                             "seed": seed, "config_hash": chash})
    if out is not None:
        out = Path(out)
        if out.exists():
            out.unlink()
        _append_rows(out, rows, BENCH_FIELDS)
    return rows


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float
    mean: float


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Ordinary least squares of ``y`` on ``x`` with the slope's standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, icpt])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    dof = max(len(x) - 2, 1)
    sxx = float(((x - x.mean()) ** 2).sum())
    se = math.sqrt(float((resid ** 2).sum()) / dof / sxx) if sxx > 0 else math.inf
    return LinearFit(float(slope), float(icpt), r2, se, float(y.mean()))


def bench_fit(rows: Sequence[dict], method: str, skip_first_epoch: bool = False) -> LinearFit:
    pts = [(float(r["num_items"]), float(r["wall_ms"])) for r in rows
           if r["method"] == method and not (skip_first_epoch and int(r["epoch"]) == 1)]
    return linear_fit([p for p, _ in pts], [t for _, t in pts])


def flat_in_catalog_size(fit: LinearFit, p_range: float, rel_tol: float = 0.25, z: float = 3.0) -> bool:
    """Whether a timing fit is indistinguishable from constant: the slope is
    within ``z`` standard errors of zero, or the fitted change across the
    catalog range is below ``rel_tol`` of the mean time."""
    return abs(fit.slope) <= z * fit.slope_se or abs(fit.slope) * p_range <= rel_tol * fit.mean


def strip_timing(rows: Iterable[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]


def oracle_for_cell(cfg: dict, cell: Cell) -> OracleEnv:
    return build_oracle(oracle_config(cfg, num_items=cell.num_items, k_max=cell.k_max))
