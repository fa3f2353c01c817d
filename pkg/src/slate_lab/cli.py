"""Command-line entry point (``slate-lab``)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .core import (DataError, DegenerateScoreError, LogBatch, ModelParams, NumericError, SupportViolation,
                   Variant, read_jsonl, spawn_rng, write_jsonl)
from .decision import ExactIndex, IVFIndex, ModelRule, PolicyRule, UniformRule, build_slates, policy_decide_batch
from .environment import build_oracle, generate_logs, run_abtest
from .experiments import METHODS, PRR_METHODS, bench_fit, flat_in_catalog_size, run_bench, run_sweep
from .policy import SoftmaxPolicyParams
from .session import (SessionBiases, SessionSplit, draw_biases, generate_session_logs, load_interactions,
                      run_session_abtest, split_sessions)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _resolve(args) -> dict:
    cfg = sio.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _write_rows(path: str | Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        w.writerows(rows)


def _sidecar(out: str, label: str) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}.{label}.bin")


# --------------------------------------------------------------------------
# Synthetic pipeline


def cmd_gen_synthetic(args, cfg) -> None:
    env = build_oracle(sio.oracle_config(cfg))
    policy = args.policy or cfg["logging_policy"]
    logs = generate_logs(env, env.logging_policy(policy), args.n, spawn_rng(cfg["seed"], "logs", policy))
    write_jsonl(logs, args.out)
    env_out = args.env_out or _sidecar(args.out, "oracle")
    sio.save_container(sio.oracle_container(env), env_out)
    print(f"wrote {len(logs)} records to {args.out}; oracle to {env_out}; "
          f"click rate {logs.rewards.mean():.4f}")


def _num_items(args, logs: LogBatch, cfg: dict) -> int:
    if args.num_items:
        return args.num_items
    if args.env:
        return sio.load_container(args.env).dims["P"]
    return int(logs.slates.max()) + 1


def cmd_train(args, cfg) -> None:
    logs = read_jsonl(args.logs)
    P = _num_items(args, logs, cfg)
    logs.validate(P)
    method = args.method
    cfg = dict(cfg)
    if args.epochs is not None:
        cfg["train"] = {**cfg["train"], "epochs": args.epochs}
    every = args.checkpoint_every
    out = Path(args.out)

    def ckpt(epoch, params):
        if every and epoch % every == 0:
            sio.save_params(params, out.with_name(f"{out.stem}.epoch{epoch}{out.suffix}"),
                            {"method": method, "epoch": epoch})

    from .experiments import POLICY_METHODS, train_config
    from .training import train_policy, train_prr

    tc = train_config(cfg, method)
    if method in PRR_METHODS:
        variant = PRR_METHODS[method]
        if variant is Variant.FULL and logs.y.shape[1] == 0:
            variant = Variant.BIAS_ONLY
            print("no engagement features: training the bias-only variant")
        res = train_prr(logs, variant, tc, P, k_max=args.k_max, on_epoch=ckpt if every else None)
    else:
        res = train_policy(logs, POLICY_METHODS[method], tc, P, on_epoch=ckpt if every else None)
    sio.save_params(res.params, out, {"method": method, "seed": cfg["seed"], "config_hash": sio.config_hash(cfg)})
    trace = args.trace or out.with_suffix(".trace.csv")
    _write_rows(trace, [{"epoch": e.epoch, "loss": repr(e.loss), "wall_ms": f"{e.wall_ms:.3f}"} for e in res.trace],
                ["epoch", "loss", "wall_ms"])
    print(f"trained {method} on {len(logs)} records; final loss {res.trace[-1].loss if res.trace else float('nan'):.6f}")


def _index(kind: str, recall: float, emb: np.ndarray, seed: int):
    if kind == "exact":
        return ExactIndex(emb)
    return IVFIndex(emb, recall_target=recall, seed=seed)


def cmd_decide(args, cfg) -> None:
    params = sio.load_params(args.model)
    ys, zs, ks = [], [], []
    with open(args.contexts, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ys.append(obj.get("y", []))
                zs.append(obj["z"])
                ks.append(int(obj.get("k", obj.get("slate_size"))))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{args.contexts}:{lineno}: {exc}") from None
    if not zs:
        raise DataError(f"{args.contexts}: no contexts")
    Z = np.asarray(zs, dtype=float)
    sizes = np.asarray(ks, dtype=np.int64)
    kind = args.index or cfg["decide"]["index"]
    recall = args.recall if args.recall is not None else cfg["decide"]["recall"]
    if isinstance(params, ModelParams):
        if Z.shape[1] != params.dim_z:
            raise DataError(f"contexts have d_z={Z.shape[1]}, model expects {params.dim_z}")
        slates = build_slates(params, Z, sizes, _index(kind, recall, params.Psi, cfg["seed"]))
    else:
        idx = _index(kind, recall, params.beta, cfg["seed"])
        slates = policy_decide_batch(params, Z, sizes, args.mode, spawn_rng(cfg["seed"], "decide"), idx)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row, k in zip(slates, sizes):
            fh.write(json.dumps({"slate": [int(a) for a in row[:k]]}) + "\n")
    print(f"wrote {len(sizes)} slates to {args.out}")


def _rules(model_paths: str, cfg: dict, num_items: int):
    rules = []
    for path in [p for p in model_paths.split(",") if p]:
        c = sio.load_container(path, ("prr", "policy"))
        name = c.meta.get("method") or Path(path).stem
        params = sio.container_to_params(c)
        if params.num_items != num_items:
            raise DataError(f"{path}: model has {params.num_items} items, environment {num_items}")
        if isinstance(params, SoftmaxPolicyParams):
            rules.append(PolicyRule(params, name=name, mode=cfg["abtest"]["policy_decide"]))
        else:
            rules.append(ModelRule(params, name=name))
    return rules


AB_FIELDS = ["rule", "mean_reward", "ci_low", "ci_high", "std", "n_test", "seed", "config_hash"]


def _ab_rows(results, cfg) -> list[dict]:
    chash = sio.config_hash(cfg)
    return [{"rule": r.name, "mean_reward": repr(r.mean), "ci_low": repr(r.ci_low), "ci_high": repr(r.ci_high),
             "std": repr(r.std), "n_test": r.n, "seed": cfg["seed"], "config_hash": chash} for r in results]


def cmd_abtest(args, cfg) -> None:
    env = sio.container_to_oracle(sio.load_container(args.env, "oracle"))
    rules = _rules(args.models, cfg, env.num_items)
    if args.uniform:
        rules.append(UniformRule(env.num_items))
    if not rules:
        raise DataError("no decision rules given")
    n = args.n or cfg["abtest"]["n_test"]
    results = run_abtest(env, rules, n, cfg["seed"])
    _write_rows(args.out, _ab_rows(results, cfg), AB_FIELDS)
    for r in results:
        print(f"{r.name:>12s}  {r.mean:.5f}  [{r.ci_low:.5f}, {r.ci_high:.5f}]")


# --------------------------------------------------------------------------
# Session pipeline


def _save_split(split: SessionSplit, biases: SessionBiases, path: str | Path, meta: dict) -> None:
    def csr(lists):
        ptr = np.concatenate([[0], np.cumsum([len(x) for x in lists])]).astype(np.int64)
        return ptr, (np.concatenate(lists) if lists else np.zeros(0)).astype(np.int64)

    vp, vi = csr(split.view)
    hp, hi = csr(split.hide)
    arrays = {"view_ptr": vp, "view_items": vi, "hide_ptr": hp, "hide_items": hi,
              "counts": np.asarray(split.counts, dtype=np.int64), "w0": np.array([biases.w0]), "w": biases.w}
    dims = {"P": split.num_items, "U": split.num_users, "K_max": biases.k_max}
    sio.save_container(sio.Container("session", arrays, dims, None, {**meta, "dropped": split.dropped}), path)


def _load_split(path: str | Path) -> tuple[SessionSplit, SessionBiases, sio.Container]:
    c = sio.load_container(path, "session")
    a = c.arrays

    def lists(ptr, items):
        return [items[ptr[i]:ptr[i + 1]] for i in range(len(ptr) - 1)]

    split = SessionSplit(lists(a["view_ptr"], a["view_items"]), lists(a["hide_ptr"], a["hide_items"]),
                         int(c.dims["P"]), a["counts"], int(c.meta.get("dropped", 0)))
    return split, SessionBiases(float(a["w0"][0]), a["w"]), c


def cmd_session_prep(args, cfg) -> None:
    ds = load_interactions(args.input)
    hide = args.hide if args.hide is not None else cfg["session"]["hide_fraction"]
    k_max = args.k_max or cfg["session"]["k_max"]
    split = split_sessions(ds, hide, spawn_rng(cfg["seed"], "session-split"))
    biases = draw_biases(k_max, spawn_rng(cfg["seed"], "session-biases"))
    source = {"source": Path(args.input).name,
              "source_sha256": hashlib.sha256(Path(args.input).read_bytes()).hexdigest()}
    _save_split(split, biases, args.out, {**source, "hide_fraction": hide,
                                          "dim_z": cfg["session"]["dim_z"], "seed": cfg["seed"]})
    print(f"{split.num_users} users kept, {split.dropped} dropped (fewer than 2 distinct items); "
          f"{split.num_items} items; w0={biases.w0:.4f}")


def cmd_session_gen(args, cfg) -> None:
    split, biases, c = _load_split(args.split)
    n = args.n or cfg["session"]["n_train"]
    dim_z = int(c.meta.get("dim_z", cfg["session"]["dim_z"]))
    logs = generate_session_logs(split, biases, n, spawn_rng(cfg["seed"], "session-logs"), dim_z=dim_z)
    write_jsonl(logs, args.out)
    print(f"wrote {len(logs)} records to {args.out}; success rate {logs.rewards.mean():.4f}")


def cmd_session_abtest(args, cfg) -> None:
    split, biases, c = _load_split(args.split)
    rules = _rules(args.models, cfg, split.num_items)
    if args.uniform:
        rules.append(UniformRule(split.num_items))
    if not rules:
        raise DataError("no decision rules given")
    n = args.n or cfg["abtest"]["n_test"]
    dim_z = int(c.meta.get("dim_z", cfg["session"]["dim_z"]))
    results = run_session_abtest(split, biases, rules, n, cfg["seed"], dim_z=dim_z)
    _write_rows(args.out, _ab_rows(results, cfg), AB_FIELDS)
    for r in results:
        print(f"{r.name:>12s}  {r.mean:.5f}  [{r.ci_low:.5f}, {r.ci_high:.5f}]")


# --------------------------------------------------------------------------
# Sweeps, timing, plots


def cmd_sweep(args, cfg) -> None:
    def progress(cell, rows):
        ok = sum(r["status"] == "ok" for r in rows)
        print(f"{cell.cell_id}: {ok}/{len(rows)} methods ok", flush=True)

    rows = run_sweep(cfg, args.out, progress)
    print(f"{len(rows)} rows in {args.out}")


def cmd_bench(args, cfg) -> None:
    rows = run_bench(cfg, args.out)
    ps = cfg["bench"]["num_items"]
    for m in cfg["bench"]["methods"]:
        fit = bench_fit(rows, m)
        flat = flat_in_catalog_size(fit, max(ps) - min(ps))
        print(f"{m:>10s}: slope {fit.slope * 1000:.4f} ms per 1000 items, R2 {fit.r2:.3f}, "
              f"mean {fit.mean:.1f} ms/epoch, flat={flat}")


def cmd_plot(args, cfg) -> None:
    from .plotting import plot_csv

    plot_csv(args.input, args.out)
    print(f"wrote {args.out}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slate-lab", description="Slate recommendation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML/JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output path")
        p.set_defaults(func=fn)
        return p

    p = add("gen-synthetic", cmd_gen_synthetic, "sample an oracle and log a logging policy against it")
    p.add_argument("--policy", choices=["uniform", "topkpop"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--env-out", help="where to store the oracle (default: <out>.oracle.bin)")

    p = add("train", cmd_train, "train a model or policy on logged data")
    p.add_argument("--logs", required=True)
    p.add_argument("--method", choices=METHODS, default="prr")
    p.add_argument("--num-items", type=int)
    p.add_argument("--env", help="oracle container, used for the catalog size")
    p.add_argument("--k-max", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = add("decide", cmd_decide, "build slates for a JSONL file of contexts")
    p.add_argument("--model", required=True)
    p.add_argument("--contexts", required=True)
    p.add_argument("--index", choices=["exact", "approx"])
    p.add_argument("--recall", type=float)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy",
                   help="for policies: top-k items or a without-replacement sample")

    p = add("abtest", cmd_abtest, "paired simulated A/B test against an oracle")
    p.add_argument("--env", required=True)
    p.add_argument("--models", default="")
    p.add_argument("--n", type=int)
    p.add_argument("--uniform", action="store_true", help="also evaluate a uniform random rule")

    p = add("session-prep", cmd_session_prep, "split an interaction CSV into visible and hidden parts")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--hide", type=float)
    p.add_argument("--k-max", type=int)

    p = add("session-gen", cmd_session_gen, "log the popularity policy on a session split")
    p.add_argument("--split", required=True)
    p.add_argument("--n", type=int)

    p = add("session-abtest", cmd_session_abtest, "paired A/B test on a session split")
    p.add_argument("--split", required=True)
    p.add_argument("--models", default="")
    p.add_argument("--n", type=int)
    p.add_argument("--uniform", action="store_true")

    add("sweep", cmd_sweep, "train and A/B test every method over a grid (resumable)")
    add("bench", cmd_bench, "per-epoch training time across catalog sizes")

    p = add("plot", cmd_plot, "render a sweep or bench CSV as SVG")
    p.add_argument("--in", dest="input", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        args.func(args, cfg)
    except sio.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SupportViolation, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateScoreError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
