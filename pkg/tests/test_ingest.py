import logging
from datetime import datetime, timezone

import numpy as np
import pytest
from scipy.stats import spearmanr

from chagasnet.binning import match_labs
from chagasnet.ingest import (
    STANDARD_LEADS,
    ECGRecord,
    IngestError,
    LabResult,
    SyntheticConfig,
    biomarker_frequency,
    canonical_lead,
    generate_synthetic,
    read_labels,
    read_labs,
    read_records,
    write_bundle,
)


def test_lead_casing():
    assert canonical_lead("AVL") == "aVL"
    assert canonical_lead("avf") == "aVF"
    assert canonical_lead("v6") == "V6"
    assert canonical_lead("ii") == "II"
    assert canonical_lead("custom") == "custom"


def test_record_invariants():
    with pytest.raises(ValueError):
        ECGRecord(np.zeros((2, 10)), ["I"], 500, 0, "p", "r")
    with pytest.raises(ValueError):
        ECGRecord(np.zeros((1, 10)), ["I"], 0, 0, "p", "r")
    with pytest.raises(ValueError):
        ECGRecord(np.zeros((1, 0)), ["I"], 500, 0, "p", "r")


def test_naive_datetime_rejected():
    with pytest.raises(ValueError, match="naive"):
        ECGRecord(np.zeros((1, 10)), ["I"], 500, datetime(2020, 1, 1), "p", "r")
    rec = ECGRecord(np.zeros((1, 10)), ["I"], 500, datetime(2020, 1, 1, tzinfo=timezone.utc), "p", "r")
    assert rec.acquired_at == 1577836800


def test_bundle_round_trip(tmp_path):
    cfg = SyntheticConfig(n_patients=3, n_ecgs=5, n_biomarkers=3, seed=3, duration_s=2.0)
    records, labs, labels = generate_synthetic(cfg)
    write_bundle(tmp_path, records, labs, labels)
    back = read_records(tmp_path)
    assert len(back) == 5
    for a, b in zip(records, back):
        assert a.signal.dtype == np.float32
        assert a.signal.tobytes() == b.signal.tobytes()
        assert (a.lead_names, a.fs, a.acquired_at, a.patient_id, a.record_id) == (
            b.lead_names, b.fs, b.acquired_at, b.patient_id, b.record_id)
    assert read_labs(tmp_path) == labs
    assert read_labels(tmp_path) == labels


def test_three_records_and_lead_canonicalization(tmp_path):
    recs = [ECGRecord(np.ones((2, 5), np.float32), ["AVL", "v1"], 400, i, f"p{i}", f"r{i}") for i in range(3)]
    write_bundle(tmp_path, recs)
    back = read_records(tmp_path)
    assert len(back) == 3
    assert back[0].lead_names == ["aVL", "V1"]


def test_unreadable_record_is_skipped(tmp_path, caplog):
    recs = [ECGRecord(np.ones((2, 5), np.float32), ["I", "II"], 400, i, "p", f"r{i}") for i in range(2)]
    write_bundle(tmp_path, recs)
    (tmp_path / "signals" / "r1.f32").write_bytes(b"abc")
    with caplog.at_level(logging.WARNING):
        back = read_records(tmp_path)
    assert [r.record_id for r in back] == ["r0"]
    assert "r1" in caplog.text


def test_empty_directory_is_hard_error(tmp_path):
    with pytest.raises(IngestError, match="no records found"):
        read_records(tmp_path)
    write_bundle(tmp_path, [])
    with pytest.raises(IngestError, match="no records found"):
        read_records(tmp_path)


def test_unknown_format(tmp_path):
    with pytest.raises(IngestError):
        read_records(tmp_path, "dicom")


def test_wfdb_reader(tmp_path):
    wfdb = pytest.importorskip("wfdb")
    sig = np.random.default_rng(0).normal(size=(1000, 3))
    wfdb.wrsamp("rec1", fs=500, units=["mV"] * 3, sig_name=["I", "AVL", "v1"], p_signal=sig,
                fmt=["16"] * 3, write_dir=str(tmp_path))
    (rec,) = read_records(tmp_path, "wfdb")
    assert rec.lead_names == ["I", "aVL", "V1"]
    assert rec.signal.shape == (3, 1000)


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(n_patients=4, n_ecgs=8, n_biomarkers=3, seed=11, duration_s=2.0)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for ra, rb in zip(a[0], b[0]):
        assert ra.signal.tobytes() == rb.signal.tobytes()
        assert ra.record_id == rb.record_id and ra.acquired_at == rb.acquired_at
    assert a[1] == b[1] and a[2] == b[2]
    c = generate_synthetic(SyntheticConfig(n_patients=4, n_ecgs=8, n_biomarkers=3, seed=12, duration_s=2.0))
    assert a[0][0].signal.tobytes() != c[0][0].signal.tobytes()


def test_synthetic_labs_within_12h_and_present():
    records, labs, labels = generate_synthetic(SyntheticConfig(n_patients=10, n_ecgs=40, n_biomarkers=4, seed=0))
    by_patient = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r.acquired_at)
    for lab in labs:
        assert min(abs(lab.drawn_at - t) for t in by_patient[lab.patient_id]) <= 12 * 3600
    assert len(labels) == 40


def _band_amplitude(signal, fs, freq):
    # oracle: DFT projection at the planted frequency, averaged over leads
    t = np.arange(signal.shape[1]) / fs
    return np.mean(np.abs(signal.astype(np.float64) @ np.exp(-2j * np.pi * freq * t))) * 2 / signal.shape[1]


def _probe_rho(cfg):
    records, labs, _ = generate_synthetic(cfg)
    values, _ = match_labs(records, labs, cfg.biomarkers)
    rhos = []
    for k in range(cfg.n_biomarkers):
        rows = [(r, values[r.record_id][k]) for r in records if r.record_id in values
                and not np.isnan(values[r.record_id][k])]
        power = np.array([_band_amplitude(r.signal, cfg.fs, biomarker_frequency(k)) ** 2 for r, _ in rows])
        vals = np.array([v for _, v in rows])
        pct = (np.argsort(np.argsort(vals)) + 0.5) / len(vals)
        slope, intercept = np.polyfit(power, pct, 1)
        rhos.append(spearmanr(slope * power + intercept, pct)[0])
    return np.array(rhos)


def test_planted_biomarker_signal_is_recoverable():
    rho = _probe_rho(SyntheticConfig(n_patients=16, n_ecgs=64, n_biomarkers=3, correlation_strength=1.0,
                                     seed=5, missing_fraction=0.0))
    assert np.all(rho > 0.9), rho


def test_null_correlation_has_no_planted_signal():
    # larger n so that sampling noise of rho (about 1/sqrt(n)) stays well inside 0.15
    rho = _probe_rho(SyntheticConfig(n_patients=100, n_ecgs=600, n_biomarkers=3, correlation_strength=0.0,
                                     seed=5, missing_fraction=0.0, duration_s=4.0))
    assert np.all(np.abs(rho) <= 0.15), rho


def test_lab_result_rejects_nonfinite():
    with pytest.raises(ValueError):
        LabResult("p", "Albumin", float("nan"), 0)


def test_standard_leads():
    assert len(STANDARD_LEADS) == 12
