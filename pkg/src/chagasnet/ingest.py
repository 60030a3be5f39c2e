"""ECG records, lab results and Chagas labels: on-disk bundles and synthetic data.

The ``csv_bundle`` layout is::

    index.csv     record_id, patient_id, fs, acquired_at, lead_names, signal_file
    <signal_file> headerless little-endian float32 matrix, lead-major
    labs.csv      patient_id, biomarker, value, drawn_at
    labels.csv    record_id, patient_id, label, source

Timestamps are integer seconds since the epoch, UTC.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BIOMARKERS = (
    "Albumin",
    "Calcium, Total",
    "Creatinine",
    "Hematocrit",
    "Hemoglobin",
    "INR(PT)",
    "NTproBNP",
    "Potassium",
    "Red Blood Cells",
    "Troponin T",
    "Urea Nitrogen",
)

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
_CANONICAL = {name.lower(): name for name in STANDARD_LEADS}

LABEL_SOURCES = ("self_reported", "serology_confirmed")


class IngestError(Exception):
    pass


def canonical_lead(name: str) -> str:
    """Map a lead name to standard casing (``AVL`` -> ``aVL``); unknown names pass through."""
    return _CANONICAL.get(name.strip().lower(), name.strip())


def to_epoch_seconds(ts) -> int:
    """Integer UTC seconds from an int/float or a timezone-aware datetime."""
    if isinstance(ts, datetime):
        if ts.tzinfo is None or ts.tzinfo.utcoffset(ts) is None:
            raise ValueError("naive datetime rejected; timestamps must carry a UTC offset")
        return int(ts.timestamp())
    if isinstance(ts, (bool, np.bool_)):
        raise TypeError("boolean is not a timestamp")
    if isinstance(ts, (int, np.integer)):
        return int(ts)
    if isinstance(ts, (float, np.floating)):
        if not math.isfinite(ts) or ts != int(ts):
            raise ValueError(f"timestamp must be whole seconds, got {ts!r}")
        return int(ts)
    raise TypeError(f"unsupported timestamp type {type(ts).__name__}")


@dataclass
class ECGRecord:
    signal: np.ndarray
    lead_names: list[str]
    fs: float
    acquired_at: int
    patient_id: str
    record_id: str

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        if self.signal.ndim != 2:
            raise ValueError(f"signal must be 2-D [leads x samples], got shape {self.signal.shape}")
        self.lead_names = [canonical_lead(n) for n in self.lead_names]
        if len(self.lead_names) != self.signal.shape[0]:
            raise ValueError(
                f"{len(self.lead_names)} lead names for {self.signal.shape[0]} signal rows"
            )
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.signal.shape[1] < 1:
            raise ValueError("record has no samples")
        self.acquired_at = to_epoch_seconds(self.acquired_at)
        self.patient_id = str(self.patient_id)
        self.record_id = str(self.record_id)

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    def replace(self, **changes) -> "ECGRecord":
        kw = dict(
            signal=self.signal,
            lead_names=list(self.lead_names),
            fs=self.fs,
            acquired_at=self.acquired_at,
            patient_id=self.patient_id,
            record_id=self.record_id,
        )
        kw.update(changes)
        return ECGRecord(**kw)


@dataclass(frozen=True)
class LabResult:
    patient_id: str
    biomarker: str
    value: float
    drawn_at: int

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite lab value for {self.biomarker}")
        object.__setattr__(self, "drawn_at", to_epoch_seconds(self.drawn_at))


@dataclass(frozen=True)
class ChagasLabel:
    record_id: str
    patient_id: str
    label: float
    source: str = "self_reported"

    def __post_init__(self):
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label must lie in [0, 1], got {self.label}")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")


# ---------------------------------------------------------------------------
# csv_bundle reading / writing


def write_bundle(path, records, labs=(), labels=()) -> Path:
    path = Path(path)
    (path / "signals").mkdir(parents=True, exist_ok=True)
    with open(path / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "patient_id", "fs", "acquired_at", "lead_names", "signal_file"])
        for rec in records:
            rel = f"signals/{rec.record_id}.f32"
            np.ascontiguousarray(rec.signal, dtype="<f4").tofile(path / rel)
            w.writerow([rec.record_id, rec.patient_id, repr(float(rec.fs)), rec.acquired_at,
                        "|".join(rec.lead_names), rel])
    with open(path / "labs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "biomarker", "value", "drawn_at"])
        for lab in labs:
            w.writerow([lab.patient_id, lab.biomarker, repr(float(lab.value)), lab.drawn_at])
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "patient_id", "label", "source"])
        for lab in labels:
            w.writerow([lab.record_id, lab.patient_id, repr(float(lab.label)), lab.source])
    return path


def _read_csv_bundle(path: Path) -> list[ECGRecord]:
    index = path / "index.csv"
    if not index.exists():
        raise IngestError(f"no records found in {path} (missing index.csv)")
    records = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                leads = row["lead_names"].split("|")
                raw = np.fromfile(path / row["signal_file"], dtype="<f4")
                if raw.size == 0 or raw.size % len(leads):
                    raise ValueError(f"{raw.size} values do not split into {len(leads)} leads")
                records.append(
                    ECGRecord(
                        signal=raw.reshape(len(leads), -1),
                        lead_names=leads,
                        fs=float(row["fs"]),
                        acquired_at=int(row["acquired_at"]),
                        patient_id=row["patient_id"],
                        record_id=row["record_id"],
                    )
                )
            except (OSError, ValueError, KeyError) as exc:
                log.warning("skipping record %s: %s", row.get("record_id", "?"), exc)
    return records


def _read_wfdb(path: Path) -> list[ECGRecord]:
    try:
        import wfdb
    except ImportError as exc:  # optional extra
        raise IngestError("wfdb format requires the 'wfdb' package (pip install artifact[wfdb])") from exc
    records = []
    for hea in sorted(path.glob("*.hea")):
        name = str(hea.with_suffix(""))
        try:
            rec = wfdb.rdrecord(name)
            acquired = 0
            if rec.base_date is not None and rec.base_time is not None:
                from datetime import timezone
                acquired = datetime.combine(rec.base_date, rec.base_time, tzinfo=timezone.utc)
            comments = " ".join(rec.comments or [])
            patient = rec.record_name
            for token in comments.replace(",", " ").split():
                if token.lower().startswith("patient_id:") or token.lower().startswith("patient:"):
                    patient = token.split(":", 1)[1]
            records.append(
                ECGRecord(
                    signal=rec.p_signal.T.astype(np.float32),
                    lead_names=rec.sig_name,
                    fs=float(rec.fs),
                    acquired_at=acquired,
                    patient_id=patient,
                    record_id=rec.record_name,
                )
            )
        except Exception as exc:  # wfdb raises a wide range of errors on bad files
            log.warning("skipping record %s: %s", hea.stem, exc)
    return records


def read_records(path, format: str = "csv_bundle") -> list[ECGRecord]:
    path = Path(path)
    if not path.is_dir():
        raise IngestError(f"not a directory: {path}")
    if format == "csv_bundle":
        records = _read_csv_bundle(path)
    elif format == "wfdb":
        records = _read_wfdb(path)
    else:
        raise IngestError(f"unknown format {format!r}; expected 'csv_bundle' or 'wfdb'")
    if not records:
        raise IngestError(f"no records found in {path}")
    seen = set()
    for rec in records:
        if rec.record_id in seen:
            raise IngestError(f"duplicate record_id {rec.record_id}")
        seen.add(rec.record_id)
    return records


def read_labs(path) -> list[LabResult]:
    path = Path(path)
    if path.is_dir():
        path = path / "labs.csv"
    with open(path, newline="") as fh:
        return [
            LabResult(r["patient_id"], r["biomarker"], float(r["value"]), int(r["drawn_at"]))
            for r in csv.DictReader(fh)
        ]


def read_labels(path) -> list[ChagasLabel]:
    path = Path(path)
    if path.is_dir():
        path = path / "labels.csv"
    with open(path, newline="") as fh:
        return [
            ChagasLabel(r["record_id"], r["patient_id"], float(r["label"]),
                        r.get("source") or "self_reported")
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# synthetic data

#: frequency (Hz) of the component whose amplitude drives the Chagas label
CHAGAS_FREQ = 2.5
CHAGAS_THRESHOLD = 0.3


def biomarker_frequency(k: int) -> float:
    """Frequency (Hz) of the sinusoid planted for biomarker ``k``."""
    return 6.0 + 4.0 * k


@dataclass
class SyntheticConfig:
    n_patients: int = 64
    n_ecgs: int = 256
    n_biomarkers: int = len(BIOMARKERS)
    fs: float = 500.0
    duration_s: float = 10.0
    correlation_strength: float = 1.0
    seed: int = 0
    missing_fraction: float = 0.3
    serology_fraction: float = 0.1
    biomarkers: tuple = field(default=None)

    def __post_init__(self):
        for name in ("n_patients", "n_ecgs", "n_biomarkers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_ecgs < self.n_patients:
            raise ValueError("need at least one ECG per patient")
        if not (self.fs > 0 and self.duration_s > 0):
            raise ValueError("fs and duration_s must be positive")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ValueError("correlation_strength must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if biomarker_frequency(self.n_biomarkers - 1) >= min(self.fs, 400.0) / 2:
            raise ValueError("too many biomarkers for the sampling rate")
        if self.biomarkers is None:
            if self.n_biomarkers <= len(BIOMARKERS):
                self.biomarkers = BIOMARKERS[: self.n_biomarkers]
            else:
                self.biomarkers = tuple(f"marker{k}" for k in range(self.n_biomarkers))
        self.biomarkers = tuple(self.biomarkers)
        if len(self.biomarkers) != self.n_biomarkers:
            raise ValueError("len(biomarkers) must equal n_biomarkers")


def _beat_train(t, rate_hz, rng):
    """Crude P-QRS-T template repeated at ``rate_hz``; returns two limb-lead projections."""
    phase0 = rng.uniform(0, 1 / rate_hz)
    beats = np.arange(-1, int(t[-1] * rate_hz) + 2) / rate_hz + phase0
    waves = ((0.15, -0.20, 0.025), (1.0, 0.0, 0.012), (-0.15, 0.025, 0.01), (0.3, 0.25, 0.04))
    lead_i = np.zeros_like(t)
    lead_ii = np.zeros_like(t)
    axis = rng.uniform(0.3, 1.2)
    for b in beats:
        for amp, offset, width in waves:
            pulse = amp * np.exp(-0.5 * ((t - b - offset) / width) ** 2)
            lead_i += np.cos(axis) * pulse
            lead_ii += np.cos(axis - np.pi / 3) * pulse
    return lead_i, lead_ii


def generate_synthetic(cfg: SyntheticConfig):
    """Records, lab results and labels with planted signal/target structure.

    Biomarker ``k`` follows the amplitude of a sinusoid at
    ``biomarker_frequency(k)``; the Chagas label follows the amplitude of a
    ``CHAGAS_FREQ`` component. ``correlation_strength`` blends each target
    between that amplitude and independent noise.
    """
    rng = np.random.default_rng(cfg.seed)
    c = cfg.correlation_strength
    n = int(round(cfg.fs * cfg.duration_s))
    t = np.arange(n) / cfg.fs
    T = cfg.n_biomarkers

    # every patient gets at least one ECG, the rest are spread at random
    owner = np.concatenate([np.arange(cfg.n_patients),
                            rng.integers(0, cfg.n_patients, cfg.n_ecgs - cfg.n_patients)])
    owner = np.sort(owner)
    patient_positive = rng.random(cfg.n_patients) < 0.3
    serology = patient_positive & (rng.random(cfg.n_patients) < cfg.serology_fraction / 0.3)
    patient_t0 = 1_500_000_000 + rng.integers(0, 3 * 365 * 86400, cfg.n_patients)
    mix = rng.normal(size=(6, 2)) * 0.5 + np.array([[1, 0], [0.8, 0.3], [0.6, 0.6], [0.3, 0.8], [0, 1], [-0.2, 0.9]])
    biomarker_loc = rng.uniform(-1.0, 3.0, T)

    records, labs, labels = [], [], []
    visit = np.zeros(cfg.n_patients, dtype=int)
    for idx in range(cfg.n_ecgs):
        p = int(owner[idx])
        pid, rid = f"p{p:04d}", f"ecg{idx:05d}"
        acquired = int(patient_t0[p] + visit[p] * 7 * 86400 + rng.integers(0, 3600))
        visit[p] += 1

        lead_i, lead_ii = _beat_train(t, rng.uniform(1.0, 1.6), rng)
        limb = np.stack([
            lead_i,
            lead_ii,
            lead_ii - lead_i,
            -(lead_i + lead_ii) / 2,
            lead_i - lead_ii / 2,
            lead_ii - lead_i / 2,
        ])
        precordial = (mix @ np.stack([lead_i, lead_ii]))
        sig = np.concatenate([limb, precordial])

        amps = rng.uniform(0.05, 0.4, T)
        for k in range(T):
            sig += amps[k] * np.sin(2 * np.pi * biomarker_frequency(k) * t + rng.uniform(0, 2 * np.pi))
        if patient_positive[p]:
            chagas_amp = rng.uniform(0.35, 0.6)
        else:
            chagas_amp = rng.uniform(0.0, 0.25)
        sig += chagas_amp * np.sin(2 * np.pi * CHAGAS_FREQ * t + rng.uniform(0, 2 * np.pi))
        sig += rng.normal(scale=0.02, size=sig.shape)
        records.append(ECGRecord(sig.astype(np.float32), list(STANDARD_LEADS), cfg.fs, acquired, pid, rid))

        # standardized amplitude of U(0.05, 0.4)
        z_amp = (amps - 0.225) / (0.35 / math.sqrt(12))
        latent = c * z_amp + (1 - c) * rng.normal(size=T)
        present = rng.random(T) >= cfg.missing_fraction
        if not present.any():
            present[rng.integers(T)] = True
        for k in np.flatnonzero(present):
            value = float(np.exp(biomarker_loc[k] + 0.4 * latent[k]))
            drawn = acquired + int(rng.integers(-12 * 3600, 12 * 3600 + 1))
            labs.append(LabResult(pid, cfg.biomarkers[k], value, drawn))

        label = float(chagas_amp > CHAGAS_THRESHOLD)
        if serology[p]:
            labels.append(ChagasLabel(rid, pid, label, "serology_confirmed"))
        else:
            if rng.random() < (1 - c) / 2:
                label = 1.0 - label
            labels.append(ChagasLabel(rid, pid, label, "self_reported"))
    return records, labs, labels
