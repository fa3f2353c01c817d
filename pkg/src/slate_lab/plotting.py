"""SVG figures from sweep or bench CSV files."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from .core import DataError
from .experiments import read_csv


def plot_csv(path: str | Path, out: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(path)
    if not rows:
        raise DataError(f"{path}: no rows")
    if "mean_reward" in rows[0] and "cell_id" in rows[0]:
        fig = _sweep_figure(plt, rows)
    elif "wall_ms" in rows[0] and "epoch" in rows[0]:
        fig = _bench_figure(plt, rows)
    else:
        raise DataError(f"{path}: neither a sweep nor a bench table")
    fig.savefig(out, format="svg")
    plt.close(fig)


def _sweep_figure(plt, rows):
    rows = [r for r in rows if r["status"] == "ok"]
    policies = sorted({r["logging_policy"] for r in rows})
    sizes = sorted({int(r["num_items"]) for r in rows})
    fig, axes = plt.subplots(len(policies), len(sizes), squeeze=False,
                             figsize=(4 * len(sizes), 3 * len(policies)), sharey="row")
    for i, lp in enumerate(policies):
        for j, P in enumerate(sizes):
            ax = axes[i][j]
            series = defaultdict(list)
            for r in rows:
                if r["logging_policy"] == lp and int(r["num_items"]) == P:
                    series[r["method"]].append((int(r["k_max"]), float(r["mean_reward"]),
                                                float(r["ci_low"]), float(r["ci_high"])))
            for method, pts in sorted(series.items()):
                pts.sort()
                ks = [p[0] for p in pts]
                ax.errorbar(ks, [p[1] for p in pts], yerr=[[p[1] - p[2] for p in pts], [p[3] - p[1] for p in pts]],
                            marker="o", capsize=2, label=method)
            ax.set_title(f"{lp}, P={P}")
            ax.set_xlabel("max slate size")
            if j == 0:
                ax.set_ylabel("A/B reward")
    axes[0][0].legend(fontsize="small")
    fig.tight_layout()
    return fig


def _bench_figure(plt, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(lambda: defaultdict(list))
    for r in rows:
        series[r["method"]][int(r["num_items"])].append(float(r["wall_ms"]))
    for method, by_p in sorted(series.items()):
        ps = sorted(by_p)
        ax.plot(ps, [sum(by_p[p]) / len(by_p[p]) for p in ps], marker="o", label=method)
    ax.set_xlabel("catalog size")
    ax.set_ylabel("ms per epoch")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig
