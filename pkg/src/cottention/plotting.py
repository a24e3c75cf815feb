"""Figures written next to the CSV reports."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

COLORS = {
    "softmax": "#c44e52",
    "cosine-bidir": "#8172b2",
    "cosine-causal": "#4c72b0",
    "cosine-stream": "#55a868",
}


def plot_sweep(records, path) -> None:
    """Log-log wall time and tracked peak memory against the swept axis."""
    by_impl = defaultdict(list)
    for r in records:
        if r.ok:
            by_impl[r.impl].append(r)
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        for impl, recs in by_impl.items():
            xs = [r.s if r.axis == "seq" else r.d for r in recs]
            color = COLORS.get(impl)
            ax_t.plot(xs, [r.wall_ns / 1e6 for r in recs], "o-", color=color, label=impl)
            ax_m.plot(xs, [r.peak_bytes / 2**20 for r in recs], "o-", color=color, label=impl)
        axis = records[0].axis if records else "seq"
        xlabel = "sequence length s" if axis == "seq" else "head dim d"
        for ax, ylabel in ((ax_t, "wall time (ms)"), (ax_m, "tracked peak (MiB)")):
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
        ax_t.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_stream(cos_bytes, kv_bytes, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        steps = range(1, len(cos_bytes) + 1)
        ax.plot(steps, [b / 1024 for b in cos_bytes], color=COLORS["cosine-stream"], label="cosine state")
        if kv_bytes is not None:
            ax.plot(steps, [b / 1024 for b in kv_bytes], color=COLORS["softmax"], label="softmax KV cache")
        ax.set_xlabel("tokens decoded")
        ax.set_ylabel("tracked peak per step (KiB)")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def plot_training(result, path) -> None:
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        ax_l.plot(result.loss, color="k")
        ax_l.set_yscale("log")
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("MSE loss")
        trace = list(zip(*result.m_trace))
        for h, values in enumerate(trace):
            ax_m.plot(values, label=f"head {h}")
        ax_m.set_xlabel("step")
        ax_m.set_ylabel("stabilization m")
        ax_m.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
