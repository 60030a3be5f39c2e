"""Ten-segment, multi-model ensemble prediction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import FINETUNE, ECGNet, HeadMismatchError, load_checkpoint, model_from_checkpoint
from .preprocess import pad_to, standardize_array


@dataclass
class EnsemblePrediction:
    record_id: str
    probability: float
    per_model_per_segment: np.ndarray


def segment_starts(L: int, n: int = 10, w: int = 800) -> list[int]:
    """Evenly spaced starts ``round(i * (L - w) / (n - 1))``; all zero when ``L <= w``."""
    if L <= w or n == 1:
        return [0] * n
    slack = L - w
    return [int(round(i * slack / (n - 1))) for i in range(n)]


def _as_model(m) -> ECGNet:
    if isinstance(m, (str, Path)):
        m = load_checkpoint(m)
    if isinstance(m, dict):
        m = model_from_checkpoint(m)
    if m.head_kind != FINETUNE:
        raise HeadMismatchError(f"ensemble member carries a {m.head_kind} head")
    return m


def load_ensemble(models) -> list[ECGNet]:
    return [_as_model(m) for m in models]


@torch.no_grad()
def predict(record, models, n_segments: int = 10, w: int = 800, flat_eps: float = 1e-8) -> EnsemblePrediction:
    """Probability for one prepared record (400 Hz, selected leads).

    Sigmoid is applied per model and segment before averaging.
    """
    members = load_ensemble(models)
    signal = pad_to(np.asarray(record.signal, dtype=np.float64), w)
    starts = segment_starts(signal.shape[-1], n_segments, w)
    segs = np.stack([standardize_array(signal[:, s:s + w], flat_eps) for s in starts])
    probs = np.empty((len(members), len(starts)))
    for j, model in enumerate(members):
        model.eval()
        dtype = next(model.parameters()).dtype
        logits = model.forward_finetune(torch.as_tensor(segs, dtype=dtype))
        probs[j] = torch.sigmoid(logits).double().numpy()
    return EnsemblePrediction(record.record_id, float(probs.mean()), probs)


def predict_many(records, models, **kw) -> list[EnsemblePrediction]:
    members = load_ensemble(models)
    return [predict(r, members, **kw) for r in records]


def write_predictions(preds, path, threshold: float = 0.5) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "probability", "prediction"])
        for p in preds:
            w.writerow([p.record_id, repr(p.probability), int(p.probability >= threshold)])


def read_predictions(path) -> dict:
    with open(path, newline="") as fh:
        return {r["record_id"]: float(r["probability"]) for r in csv.DictReader(fh)}
