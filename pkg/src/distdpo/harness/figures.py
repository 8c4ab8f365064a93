"""PNG renderings of run and comparison plot data (matplotlib, Agg backend)."""
from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DPI = 120


def _save(fig, path):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def _by_setting(rows):
    groups = defaultdict(list)
    for r in rows:
        groups[r["setting"] or "run"].append(r)
    return groups


def winner_loser(rows, path):
    """Winner and loser score running means against iteration, one panel per setting."""
    groups = _by_setting(rows)
    fig, axes = plt.subplots(1, len(groups), figsize=(4.5 * len(groups), 3.4), squeeze=False)
    for ax, (setting, rs) in zip(axes[0], sorted(groups.items())):
        it = [r["iteration"] for r in rs]
        ax.plot(it, [r["winner_score"] for r in rs], ".", ms=2, alpha=0.25, color="tab:blue")
        ax.plot(it, [r["loser_score"] for r in rs], ".", ms=2, alpha=0.25, color="tab:red")
        ax.plot(it, [r["winner_running_mean"] for r in rs], color="tab:blue", label="winner")
        ax.plot(it, [r["loser_running_mean"] for r in rs], color="tab:red", label="loser")
        ax.set_title(setting)
        ax.set_xlabel("iteration")
        ax.set_ylabel("preference score")
        ax.legend(frameon=False)
    _save(fig, path)


def heldout_curve(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for setting, rs in sorted(_by_setting(rows).items()):
        ax.plot([r["iteration"] for r in rs], [r["heldout_cd"] for r in rs], "o-",
                label=setting)
    ax.set_xlabel("iteration")
    ax.set_ylabel("held-out CD")
    ax.legend(frameon=False)
    _save(fig, path)


def results_bars(rows, path, metric="cd"):
    labels = [f"{r['model']} {r['setting']} nfe={r['nfe']}".replace("  ", " ") for r in rows]
    values = [float(r[metric]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(rows) + 2), 3.6))
    ax.bar(range(len(rows)), values, color="tab:gray")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(metric.upper())
    _save(fig, path)


def comparison_bars(deltas, path):
    """Percentage change per metric and row key for a compare report."""
    rows = [d for d in deltas if d["percent"] == d["percent"]]  # drop NaN
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(rows) + 2), 3.6))
    ax.bar(range(len(rows)), [d["percent"] for d in rows],
           color=["tab:green" if d["percent"] <= 0 else "tab:red" for d in rows])
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([f"{d['key']} {d['metric']}" for d in rows], rotation=45, ha="right",
                       fontsize=7)
    ax.set_ylabel("change (%)")
    _save(fig, path)


def render_run(out, results, wl_rows, heldout_rows) -> list[str]:
    """Render whatever plot data a run produced; returns paths relative to ``out``."""
    made = []
    if results:
        results_bars(results, os.path.join(out, "figures", "results_cd.png"))
        made.append("figures/results_cd.png")
    if wl_rows:
        winner_loser(wl_rows, os.path.join(out, "figures", "winner_loser.png"))
        made.append("figures/winner_loser.png")
    if heldout_rows:
        heldout_curve(heldout_rows, os.path.join(out, "figures", "heldout_cd.png"))
        made.append("figures/heldout_cd.png")
    return made
