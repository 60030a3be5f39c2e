"""Screening metrics, biomarker perplexity, and predicted-distribution exports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def top_k(n: int, top_fraction: float) -> int:
    # the small slack absorbs float error in products like 0.05 * 60
    return max(1, math.ceil(top_fraction * n - 1e-9))


def challenge_score(probs, labels, top_fraction: float = 0.05) -> float:
    """Fraction of all positives found among the ``ceil(top_fraction * N)`` highest-risk records.

    Ties in probability are broken by ascending record index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise MetricError("probs and labels must be 1-D and of equal length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise MetricError("score undefined: no positive labels")
    order = np.lexsort((np.arange(probs.size), -probs))
    k = top_k(probs.size, top_fraction)
    return int(np.sum(labels[order[:k]] == 1)) / n_pos


def auc_roc(probs, labels) -> float:
    """Mann-Whitney U over (positive, negative) pairs, ties counting one half."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = rankdata(probs)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def perplexity(logits, bins, mask, biomarkers=None) -> dict:
    """Per biomarker ``exp(mean NLL)`` over present pairs; ``logits`` is ``[n, B, T]``."""
    logits = np.asarray(logits, dtype=np.float64)
    bins = np.asarray(bins)
    mask = np.asarray(mask, dtype=bool)
    n, B, T = logits.shape
    names = list(biomarkers) if biomarkers is not None else [str(t) for t in range(T)]
    logp = log_softmax(logits, axis=1)
    out = {}
    for t, name in enumerate(names):
        rows = np.flatnonzero(mask[:, t])
        if rows.size == 0:
            log.warning("perplexity: no present pairs for %s; omitted", name)
            continue
        nll = -logp[rows, bins[rows, t], t]
        out[name] = float(np.exp(nll.mean()))
    return out


@dataclass
class EvalReport:
    challenge_score: float
    auc: float
    top_fraction: float = 0.05
    n_records: int = 0
    n_positive: int = 0
    perplexity: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"challenge_score {self.challenge_score:.6g}",
            f"auc {self.auc:.6g}",
            f"top_fraction {self.top_fraction:g}",
            f"n_records {self.n_records}",
            f"n_positive {self.n_positive}",
        ]
        for name, v in sorted(self.perplexity.items(), key=lambda kv: kv[1]):
            lines.append(f"perplexity[{name}] {v:.6g}")
        return "\n".join(lines)

    def write(self, out_prefix) -> None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        out_prefix.with_suffix(".txt").write_text(self.to_text() + "\n")
        out_prefix.with_suffix(".json").write_text(json.dumps(asdict(self), indent=2))


def evaluate(probs, labels, top_fraction: float = 0.05, perplexities=None) -> EvalReport:
    labels = np.asarray(labels)
    try:
        auc = auc_roc(probs, labels)
    except MetricError:
        auc = float("nan")
    return EvalReport(
        challenge_score=challenge_score(probs, labels, top_fraction),
        auc=auc,
        top_fraction=top_fraction,
        n_records=int(labels.size),
        n_positive=int(np.sum(labels == 1)),
        perplexity=dict(perplexities or {}),
    )


def emit_distribution_plot(logits, bins, mask, biomarker_subset, out_path,
                           biomarkers=None, record_ids=None) -> list[Path]:
    """Per biomarker: a CSV of per-record bin probabilities with the true bin, and an SVG plot.

    ``logits`` is ``[n, B, T]`` for the chosen records; ``biomarker_subset``
    lists names from ``biomarkers`` (or integer columns).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logits = np.asarray(logits, dtype=np.float64)
    bins = np.asarray(bins)
    mask = np.asarray(mask, dtype=bool)
    n, B, T = logits.shape
    names = list(biomarkers) if biomarkers is not None else [str(t) for t in range(T)]
    record_ids = list(record_ids) if record_ids is not None else [str(i) for i in range(n)]
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write distribution plots to {out}: {exc}") from exc
    probs = softmax(logits, axis=1)
    written = []
    for item in biomarker_subset:
        t = item if isinstance(item, int) else names.index(item)
        name = names[t]
        stem = "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")
        csv_path = out / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "bin", "probability", "true_bin"])
            for i in range(n):
                true_bin = int(bins[i, t]) if mask[i, t] else ""
                for b in range(B):
                    w.writerow([record_ids[i], b, repr(float(probs[i, b, t])), true_bin])
        fig, ax = plt.subplots(figsize=(5, 3))
        for i in range(n):
            (line,) = ax.plot(np.arange(B), probs[i, :, t], label=record_ids[i])
            if mask[i, t]:
                ax.axvline(bins[i, t], color=line.get_color(), linestyle="--", linewidth=1)
        ax.set_xlabel("percentile bin")
        ax.set_ylabel("probability")
        ax.set_title(name)
        ax.legend(fontsize="small")
        fig.tight_layout()
        svg_path = out / f"{stem}.svg"
        fig.savefig(svg_path)
        plt.close(fig)
        written += [csv_path, svg_path]
    return written
