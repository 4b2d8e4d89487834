"""Post-hoc learning curves from a metrics file: a CSV table and a PNG figure."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

WINDOW = 100
CSV_FIELDS = ("episode", "mean_return", "median_return", "f_off", "beta", "c_max", "mean_kl")


def moving_median(x, window: int = WINDOW) -> np.ndarray:
    """Trailing median; the first ``window - 1`` entries use the shorter prefix."""
    x = np.asarray(x, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    out = np.empty_like(x)
    if len(x) >= window:
        full = np.lib.stride_tricks.sliding_window_view(x, window)
        out[window - 1:] = np.median(full, axis=1)
    for k in range(min(window - 1, len(x))):
        out[k] = np.median(x[:k + 1])
    return out


def curves(records: list[dict], window: int = WINDOW) -> dict:
    cols = {
        "episode": np.array([r["episode"] for r in records], dtype=int),
        "mean_return": np.array([r["mean_return"] for r in records], dtype=float),
        "f_off": np.array([r["f_off"] for r in records], dtype=float),
        "beta": np.array([r["beta"] for r in records], dtype=float),
        "c_max": np.array([r["c_max"] for r in records], dtype=float),
        "mean_kl": np.array([r["mean_kl"] for r in records], dtype=float),
    }
    cols["median_return"] = moving_median(cols["mean_return"], window)
    return cols


def write_csv(cols: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for k in range(len(cols["episode"])):
            w.writerow([int(cols["episode"][k])] + [repr(float(cols[f][k])) for f in CSV_FIELDS[1:]])


def write_png(cols: dict, path: str | Path, title: str = "", window: int = WINDOW) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, figsize=(7, 7), sharex=True)
    ep = cols["episode"]
    ax = axes[0]
    ax.plot(ep, cols["mean_return"], color="0.8", lw=0.5, label="episode")
    ax.plot(ep, cols["median_return"], color="C0", lw=1.5, label=f"moving median ({window})")
    ax.set_ylabel("return")
    ax.legend(loc="upper left", frameon=False, fontsize=8)
    axes[1].plot(ep, cols["f_off"], color="C1")
    axes[1].set_ylabel(r"$f_{off}$")
    axes[2].plot(ep, cols["beta"], color="C2")
    axes[2].set_ylabel(r"$\beta$")
    axes[2].set_xlabel("episode")
    for ax in axes:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(metrics_path: str | Path, out_prefix: str | Path | None = None,
                 window: int = WINDOW) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` and ``<prefix>.png`` next to the metrics file by default."""
    from .trainer import read_metrics

    metrics_path = Path(metrics_path)
    records = read_metrics(metrics_path)
    if not records:
        raise ValueError(f"{metrics_path} holds no episode records")
    prefix = Path(out_prefix) if out_prefix else metrics_path.with_name(metrics_path.stem + "_curves")
    cols = curves(records, window)
    csv_path, png_path = prefix.with_suffix(".csv"), prefix.with_suffix(".png")
    write_csv(cols, csv_path)
    write_png(cols, png_path, title=metrics_path.parent.name, window=window)
    return csv_path, png_path
