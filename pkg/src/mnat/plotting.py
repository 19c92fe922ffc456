"""Matplotlib figures written next to the text reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def similarity_histogram(bin_edges: Sequence[float], series: dict[str, Sequence[int]], path: str | Path,
                         title: str = "masked-token distribution similarity") -> Path:
    """Bar histogram of cosine similarities, one bar group per model."""
    fig, ax = plt.subplots(figsize=(6, 3.8))
    width = (bin_edges[1] - bin_edges[0]) / (len(series) + 1)
    for j, (label, counts) in enumerate(series.items()):
        total = max(sum(counts), 1)
        lefts = [e + j * width for e in bin_edges[:-1]]
        ax.bar(lefts, [c / total for c in counts], width=width, align="edge", label=label)
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("fraction of masked tokens")
    ax.set_xlim(bin_edges[0], bin_edges[-1])
    ax.set_title(title)
    ax.legend(frameon=False)
    return _finish(fig, path)


def training_curves(rows: Sequence[dict], path: str | Path) -> Path:
    """Loss terms per update, read from parsed training-log rows."""
    steps = [r["step"] for r in rows]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.5, 5.5), sharex=True)
    for key in ("nll1", "nll2", "nll3", "len", "total"):
        top.plot(steps, [r[key] for r in rows], label=key, lw=1)
    top.set_ylabel("loss")
    top.legend(frameon=False, ncol=5, fontsize=8)
    for key in ("kld1", "kld2"):
        bottom.plot(steps, [r[key] for r in rows], label=key, lw=1)
    bottom.set_xlabel("update")
    bottom.set_ylabel("symmetric KL")
    bottom.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def ngram_precisions(precisions: Sequence[float], bleu_score: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar([f"p{i}" for i in range(1, len(precisions) + 1)], precisions, color="0.4")
    ax.set_ylim(0, 1)
    ax.set_ylabel("modified precision")
    ax.set_title(f"BLEU {bleu_score:.2f}")
    return _finish(fig, path)
