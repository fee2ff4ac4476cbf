"""Figure rendering for bench and training reports (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_KIND_STYLE = {"dispatcher": ("tab:blue", "o"), "msa": ("tab:red", "s")}


def plot_step_times(records, path: str | Path, slopes: dict[str, float] | None = None) -> None:
    """Log-log plot of mean step seconds vs N, one series per layer kind."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    kinds = sorted({r.layer_kind for r in records if not r.failed})
    for kind in kinds:
        rows = sorted((r for r in records if r.layer_kind == kind and not r.failed),
                      key=lambda r: r.n)
        ns = [r.n for r in rows]
        ts = [r.mean_step_seconds for r in rows]
        errs = [r.stddev_seconds for r in rows]
        color, marker = _KIND_STYLE.get(kind, ("tab:gray", "x"))
        label = kind
        if slopes and kind in slopes:
            label = f"{kind} (slope {slopes[kind]:.2f})"
        ax.errorbar(ns, ts, yerr=errs, color=color, marker=marker, capsize=3, label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("input tokens N")
    ax.set_ylabel("seconds per training step")
    ax.set_title("Training step time vs sequence length")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_memory(peaks_by_kind: dict[str, dict[int, int]], path: str | Path,
                slopes: dict[str, float] | None = None) -> None:
    """Log-log plot of layer peak live tensor bytes vs N."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for kind, peaks in sorted(peaks_by_kind.items()):
        ns = sorted(peaks)
        color, marker = _KIND_STYLE.get(kind, ("tab:gray", "x"))
        label = kind
        if slopes and kind in slopes:
            label = f"{kind} (slope {slopes[kind]:.2f})"
        ax.plot(ns, [peaks[n] / 2**20 for n in ns], color=color, marker=marker, label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("input tokens N")
    ax.set_ylabel("peak live tensor MiB (layer forward+backward)")
    ax.set_title("Mixing-layer memory vs sequence length")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_loss_curve(losses, path: str | Path, smooth: int = 25) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = range(len(losses))
    ax.plot(steps, losses, alpha=0.35, color="tab:blue", label="per step")
    if len(losses) > smooth:
        smoothed = [sum(losses[max(0, i - smooth + 1):i + 1]) / (i - max(0, i - smooth + 1) + 1)
                    for i in steps]
        ax.plot(steps, smoothed, color="tab:blue", label=f"{smooth}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
