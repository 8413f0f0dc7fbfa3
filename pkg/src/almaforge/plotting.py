"""Figures for recipe metrics and parallel-size sweeps (written next to the JSON)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_metrics(report: dict, out_path) -> Path:
    """Stage-1 snapshots (val loss, zero-shot BLEU) and the stage-2 validation curve."""
    out_path = Path(out_path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    snaps = report.get("snapshots", [])
    ax = axes[0]
    if snaps:
        tokens = [s["tokens_seen"] for s in snaps]
        ax.plot(tokens, [s["val_loss"] for s in snaps], "o-", color="black", label="val loss")
        ax.set_xlabel("stage-1 tokens")
        ax.set_ylabel("translation val loss")
        twin = ax.twinx()
        for d in report.get("directions", []):
            twin.plot(tokens, [s["bleu_per_direction"].get(d) or 0.0 for s in snaps], "s--", label=f"BLEU {d}")
        twin.set_ylabel("BLEU before stage 2")
        twin.legend(loc="upper right", fontsize=8)
    else:
        ax.text(0.5, 0.5, "no stage-1 snapshots", ha="center", va="center", transform=ax.transAxes)
    ax.set_title("stage 1 snapshots")

    ax = axes[1]
    hist = report.get("stage2_result", {}).get("val_history", [])
    if hist:
        ax.plot([h[0] for h in hist], [h[1] for h in hist], "o-")
    ax.set_xlabel("stage-2 step")
    ax.set_ylabel("val loss")
    final = report.get("final", {}).get("bleu_per_direction", {})
    label = ", ".join(f"{d}: {v.get('bleu', 0):.1f}" for d, v in final.items() if isinstance(v, dict) and "bleu" in v)
    ax.set_title(f"stage 2 (final BLEU {label})" if label else "stage 2")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_sweep(report: dict, out_path) -> Path:
    """BLEU against parallel-data size, one line per (init, direction)."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for init, style in (("base", "o-"), ("scratch", "^--")):
        runs = [r for r in report["runs"] if r["init"] == init]
        if not runs:
            continue
        for d in report["directions"]:
            ax.plot([r["size"] for r in runs], [r["bleu"].get(d) or 0.0 for r in runs], style, label=f"{init} {d}")
    ax.set_xscale("log")
    ax.set_xlabel("parallel pairs")
    ax.set_ylabel("BLEU")
    ax.legend(fontsize=8)
    ax.set_title("parallel-data size sweep")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
