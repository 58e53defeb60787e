"""File-rendered companion figures for the delimited outputs.

Each renderer takes already-parsed rows and writes one PNG next to the
CSV it illustrates.  Rendering happens entirely off-screen (Agg); nothing
here opens a window or blocks.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import PreconditionError


def render_flops_figure(rows, out_path):
    """rows: iterable of (kind, length, gflops).  Log-log cost curves,
    one line per backbone kind."""
    by_kind = {}
    for kind, length, gflops in rows:
        by_kind.setdefault(kind, []).append((int(length), float(gflops)))
    if not by_kind:
        raise PreconditionError("no rows to plot")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for kind in sorted(by_kind):
        pts = sorted(by_kind[kind])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=kind)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=10)
    ax.set_xlabel("sequence length")
    ax.set_ylabel("forward GFLOPs")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_report_figure(eval_rows, out_path):
    """eval_rows: metrics.EvalRow list (MEAN excluded).  Per-utterance
    bars for the three signal metrics."""
    rows = [r for r in eval_rows if r.id != "MEAN"]
    if not rows:
        raise PreconditionError("no rows to plot")
    ids = [r.id for r in rows]
    panels = [
        ("SI-SNR (dB)", [r.si_snr_db for r in rows]),
        ("segSNR (dB)", [r.seg_snr_db for r in rows]),
        ("LSD (dB)", [r.lsd for r in rows]),
    ]
    fig, axes = plt.subplots(3, 1, figsize=(max(6.0, 0.5 * len(ids)), 7.5), sharex=True)
    x = range(len(ids))
    for ax, (label, vals) in zip(axes, panels):
        ax.bar(x, vals, color="#4878b0")
        ax.axhline(sum(vals) / len(vals), color="#b04848", linewidth=1.0, linestyle="--", label="mean")
        ax.set_ylabel(label)
        ax.grid(True, axis="y", alpha=0.3)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1].set_xticks(list(x))
    axes[-1].set_xticklabels(ids, rotation=45, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_training_figure(log_rows, out_path):
    """log_rows: train_se log rows [epoch, train_loss, val_loss, acc_q1..q4,
    patience_left].  Loss curves on top, per-quantizer accuracy below."""
    if not log_rows:
        raise PreconditionError("no rows to plot")
    epochs = [r[0] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.0, 6.0), sharex=True)
    ax1.plot(epochs, [r[1] for r in log_rows], label="train")
    ax1.plot(epochs, [r[2] for r in log_rows], label="val")
    ax1.set_ylabel("loss")
    ax1.grid(True, alpha=0.3)
    ax1.legend()
    n_acc = len(log_rows[0]) - 4
    for q in range(n_acc):
        ax2.plot(epochs, [r[3 + q] for r in log_rows], label=f"q{q + 1}")
    ax2.set_ylabel("token accuracy")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0.0, 1.0)
    ax2.grid(True, alpha=0.3)
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
