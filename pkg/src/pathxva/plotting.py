"""Figures for the report path of the CLI.

Imported only when figures are requested; the numerical core never needs
matplotlib.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _series(rows, *keys):
    out = defaultdict(list)
    for r in rows:
        out[tuple(r[k] for k in keys)].append(r)
    return out


def plot_profiles(rows: list, out_dir, tag: str = "") -> list:
    """One figure per metric: mean with 5-95% and 25-75% bands, one colour per run."""
    out_dir = Path(out_dir)
    paths = []
    by_metric = _series(rows, "metric")
    for (metric,), mrows in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for (scheme, j), rr in sorted(_series(mrows, "scheme", "j").items()):
            rr = sorted(rr, key=lambda r: float(r["time"]))
            t = [float(r["time"]) for r in rr]
            label = scheme if scheme == "explicit" else f"{scheme} j={j}"
            line, = ax.plot(t, [float(r["mean"]) for r in rr], label=label)
            c = line.get_color()
            ax.fill_between(t, [float(r["q05"]) for r in rr], [float(r["q95"]) for r in rr],
                            color=c, alpha=0.12, lw=0)
            ax.fill_between(t, [float(r["q25"]) for r in rr], [float(r["q75"]) for r in rr],
                            color=c, alpha=0.25, lw=0)
        ax.set_xlabel("time (years)")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} profile")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"profile_{metric.lower()}.png"
        fig.savefig(path, dpi=110, metadata={"Description": tag})
        plt.close(fig)
        paths.append(path)
    return paths


def plot_twin(rows: list, out_dir, tag: str = "") -> list:
    """Normalised twin RMSE against normalised training RMSE, per target."""
    out_dir = Path(out_dir)
    paths = []
    for (target,), rr in sorted(_series(rows, "target").items()):
        rr = sorted(rr, key=lambda r: float(r["time"]))
        t = [float(r["time"]) for r in rr]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(t, [float(r["twin_rmse_normalized"]) for r in rr], "o-", ms=3, label="twin estimate")
        ax.plot(t, [float(r["train_rmse_normalized"]) for r in rr], "s--", ms=3, label="training loss")
        ax.set_yscale("log")
        ax.set_xlabel("time (years)")
        ax.set_ylabel("relative L2 error")
        ax.set_title(f"{target.upper()} regression error")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"twin_{target}.png"
        fig.savefig(path, dpi=110, metadata={"Description": tag})
        plt.close(fig)
        paths.append(path)
    return paths
