"""Percentile binning of lab values and the time-window join between ECGs and labs."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MISSING = -1
FORMAT_HEADER = "# percentile-binner v1"


class BinningError(ValueError):
    pass


@dataclass
class PercentileBinner:
    """Per-biomarker edges ``e_1..e_{B-1}``; value ``v`` falls in bin ``#{e_k < v}``."""

    n_bins: int
    edges: dict
    fitted_on: str = "train"

    def __post_init__(self):
        if self.n_bins < 2:
            raise BinningError("n_bins must be at least 2")
        for name, e in self.edges.items():
            e = np.asarray(e, dtype=np.float64)
            if e.shape != (self.n_bins - 1,):
                raise BinningError(f"{name}: expected {self.n_bins - 1} edges, got {e.shape}")
            if np.any(np.diff(e) < 0):
                raise BinningError(f"{name}: edges must be nondecreasing")
            self.edges[name] = e

    @property
    def biomarkers(self) -> tuple:
        return tuple(self.edges)

    @classmethod
    def fit(cls, values: dict, n_bins: int = 100, fitted_on: str = "train") -> "PercentileBinner":
        """Edge ``k`` is the smallest observed value whose empirical CDF reaches ``k / n_bins``."""
        edges = {}
        for name, vals in values.items():
            v = np.sort(np.asarray(vals, dtype=np.float64))
            if v.size == 0:
                raise BinningError(f"no values for biomarker {name}")
            if not np.all(np.isfinite(v)):
                raise BinningError(f"non-finite values for biomarker {name}")
            if v.size < n_bins:
                log.warning("%s: only %d values for %d bins", name, v.size, n_bins)
            n = v.size
            k = np.arange(1, n_bins)
            # smallest j (1-based) with j / n >= k / B, in exact integer arithmetic
            j = -((-k * n) // n_bins)
            edges[name] = v[j - 1]
        return cls(n_bins, edges, fitted_on)

    def assign(self, biomarker: str, value) -> int:
        try:
            e = self.edges[biomarker]
        except KeyError:
            raise BinningError(f"binner not fitted for {biomarker}") from None
        value = float(value)
        if not math.isfinite(value):
            raise BinningError(f"non-finite value for {biomarker}")
        return min(int(np.searchsorted(e, value, side="left")), self.n_bins - 1)

    def assign_many(self, biomarker: str, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise BinningError(f"non-finite value for {biomarker}")
        bins = np.searchsorted(self.edges[biomarker], values, side="left")
        return np.minimum(bins, self.n_bins - 1)

    def save(self, path) -> None:
        lines = [FORMAT_HEADER]
        for name, e in self.edges.items():
            lines.append("\t".join([name, str(self.n_bins)] + [repr(float(x)) for x in e]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "PercentileBinner":
        text = Path(path).read_text().splitlines()
        if not text or text[0].strip() != FORMAT_HEADER:
            raise BinningError(f"{path}: not a percentile-binner v1 file")
        edges, n_bins = {}, None
        for line in text[1:]:
            if not line.strip():
                continue
            name, b, *rest = line.split("\t")
            if n_bins is not None and int(b) != n_bins:
                raise BinningError(f"{path}: inconsistent bin counts")
            n_bins = int(b)
            edges[name] = np.array([float(x) for x in rest])
        if n_bins is None:
            raise BinningError(f"{path}: no biomarkers")
        return cls(n_bins, edges)

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "fitted_on": self.fitted_on,
                "edges": {k: v.tolist() for k, v in self.edges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PercentileBinner":
        return cls(d["n_bins"], {k: np.asarray(v) for k, v in d["edges"].items()}, d.get("fitted_on", "train"))


def fit(values: dict, n_bins: int = 100) -> PercentileBinner:
    return PercentileBinner.fit(values, n_bins)


def assign_bin(binner: PercentileBinner, biomarker: str, value) -> int:
    return binner.assign(biomarker, value)


@dataclass
class BiomarkerTargets:
    record_id: str
    bins: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not np.array_equal(self.mask, self.bins != MISSING):
            raise BinningError("mask must be false exactly where bins are MISSING")

    @property
    def T(self) -> int:
        return self.bins.size


def match_labs(ecgs, labs, biomarkers, window_h: float = 24.0):
    """Nearest lab value per (ECG, biomarker) within ``window_h`` hours.

    Returns ``(values, n_excluded)`` where ``values`` maps record_id to a
    float array (NaN when unmatched) and ECGs with nothing matched are dropped.
    Equal distances resolve to the earlier draw.
    """
    col = {name: k for k, name in enumerate(biomarkers)}
    by_patient = defaultdict(list)
    for lab in labs:
        if lab.biomarker in col:
            by_patient[lab.patient_id].append(lab)
    window = window_h * 3600
    values, excluded = {}, 0
    for ecg in ecgs:
        best = [None] * len(biomarkers)
        for lab in by_patient.get(ecg.patient_id, ()):
            d = abs(lab.drawn_at - ecg.acquired_at)
            if d > window:
                continue
            k = col[lab.biomarker]
            key = (d, lab.drawn_at)
            if best[k] is None or key < best[k][0]:
                best[k] = (key, lab.value)
        row = np.array([np.nan if b is None else b[1] for b in best])
        if np.all(np.isnan(row)):
            excluded += 1
            continue
        values[ecg.record_id] = row
    return values, excluded


def join(ecgs, labs, binner: PercentileBinner, window_h: float = 24.0) -> dict:
    """record_id -> BiomarkerTargets for ECGs with at least one lab inside the window."""
    biomarkers = binner.biomarkers
    values, excluded = match_labs(ecgs, labs, biomarkers, window_h)
    if excluded:
        log.info("join: %d ECGs without a lab within %g h excluded", excluded, window_h)
    return {rid: targets_from_values(rid, row, binner) for rid, row in values.items()}


def targets_from_values(record_id: str, row, binner: PercentileBinner) -> BiomarkerTargets:
    bins = np.full(len(row), MISSING, dtype=np.int64)
    for k, (name, v) in enumerate(zip(binner.biomarkers, row)):
        if not np.isnan(v):
            bins[k] = binner.assign(name, v)
    return BiomarkerTargets(record_id, bins, bins != MISSING)
