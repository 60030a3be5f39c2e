"""Resampling, lead selection, snippet extraction and standardization."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import firwin, resample_poly

from .ingest import ECGRecord

KEPT_LEADS = ("aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


class PreprocessError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    target_fs: float = 400.0
    snippet_s: float = 2.0
    kept_leads: tuple = field(default=KEPT_LEADS)
    flat_eps: float = 1e-8

    def __post_init__(self):
        self.kept_leads = tuple(self.kept_leads)
        if not self.target_fs > 0:
            raise ValueError("target_fs must be positive")
        if not self.snippet_s > 0:
            raise ValueError("snippet_s must be positive")
        if not self.kept_leads:
            raise ValueError("kept_leads must be non-empty")
        if len(set(self.kept_leads)) != len(self.kept_leads):
            raise ValueError("kept_leads contains duplicates")

    @property
    def snippet_len(self) -> int:
        return int(round(self.target_fs * self.snippet_s))


@dataclass
class Snippet:
    data: np.ndarray
    source_record_id: str
    start_sample: int


def _rate_ratio(fs: float, target_fs: float) -> tuple[int, int]:
    ratio = Fraction(target_fs).limit_denominator(10**6) / Fraction(fs).limit_denominator(10**6)
    return ratio.numerator, ratio.denominator


@lru_cache(maxsize=32)
def polyphase_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed low-pass with every polyphase branch normalized to unit DC gain.

    The result is meant for ``resample_poly``, which multiplies by ``up``.
    """
    n = TAPS_PER_PHASE * up
    n += 1 - n % 2  # odd length keeps the filter linear-phase and centred
    h = firwin(n, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    for r in range(up):
        h[r::up] /= h[r::up].sum() * up
    h.setflags(write=False)
    return h


def resample_signal(x: np.ndarray, fs: float, target_fs: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(x.shape[-1] * target_fs / fs))
    if n_out < 1:
        raise PreprocessError(f"resampling {x.shape[-1]} samples from {fs} Hz to {target_fs} Hz leaves nothing")
    up, down = _rate_ratio(fs, target_fs)
    if up == down:
        return x.copy()
    y = resample_poly(x, up, down, axis=-1, window=polyphase_filter(up, down), padtype="line")
    # resample_poly yields ceil(n * up / down) samples, never fewer than round()
    return y[..., :n_out]


def resample(record: ECGRecord, target_fs: float = 400.0) -> ECGRecord:
    if record.fs == target_fs:
        return record
    return record.replace(signal=resample_signal(record.signal, record.fs, target_fs), fs=float(target_fs))


def select_leads(record: ECGRecord, kept=KEPT_LEADS) -> ECGRecord:
    rows = []
    for name in kept:
        try:
            rows.append(record.lead_names.index(name))
        except ValueError:
            raise PreprocessError(f"missing lead {name}") from None
    return record.replace(signal=record.signal[rows], lead_names=list(kept))


def prepare(record: ECGRecord, cfg: PreprocessConfig | None = None) -> ECGRecord:
    """Resample and keep the configured leads; snippets are cut from the result."""
    cfg = cfg or PreprocessConfig()
    return select_leads(resample(record, cfg.target_fs), cfg.kept_leads)


def pad_to(signal: np.ndarray, length: int) -> np.ndarray:
    """Edge-pad along time symmetrically up to ``length`` (extra sample goes to the end)."""
    n = signal.shape[-1]
    if n >= length:
        return signal
    before = (length - n) // 2
    return np.pad(signal, ((0, 0), (before, length - n - before)), mode="edge")


def extract_snippet(record: ECGRecord, rng_seed=None, length: int = 800) -> Snippet:
    """Cut a ``length``-sample window at a uniformly drawn start.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    signal = pad_to(record.signal, length)
    slack = signal.shape[-1] - length
    if slack == 0:
        start = 0
    else:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        start = int(rng.integers(0, slack + 1))
    return Snippet(signal[:, start:start + length].copy(), record.record_id, start)


def standardize_array(x: np.ndarray, flat_eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit population std over all values jointly; flat input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean()
    std = x.std()
    if std < flat_eps:
        return np.zeros_like(x)
    return (x - mean) / std


def standardize(snippet: Snippet, flat_eps: float = 1e-8) -> Snippet:
    return Snippet(standardize_array(snippet.data, flat_eps), snippet.source_record_id, snippet.start_sample)
