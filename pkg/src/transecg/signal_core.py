"""Deterministic ECG preprocessing: filtering, resampling, normalization, windowing.

Pipeline order: bandpass -> median -> resample -> window -> per-window min-max.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy import signal as sps

logger = logging.getLogger(__name__)

DEFAULT_SEQ_LEN = 2000
DEFAULT_FS = 250.0


@dataclass
class EcgRecord:
    """A raw single-lead ECG trace with subject metadata."""

    subject_id: str
    samples: np.ndarray
    fs: float
    gender_label: str | None = None  # "male" | "female"
    age_years: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise ValueError("EcgRecord.samples must be non-empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("EcgRecord.samples must be finite")
        if self.fs <= 0:
            raise ValueError("EcgRecord.fs must be positive")
        if self.age_years is not None and self.age_years < 0:
            raise ValueError("EcgRecord.age_years must be non-negative")


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth bandpass specification (edges in Hz)."""

    low_hz: float = 0.5
    high_hz: float = 40.0
    order: int = 4
    fs: float = DEFAULT_FS

    def __post_init__(self):
        if not (0.0 < self.low_hz < self.high_hz < self.fs / 2.0):
            raise ValueError(
                f"require 0 < low_hz < high_hz < fs/2, got "
                f"low={self.low_hz}, high={self.high_hz}, fs={self.fs}"
            )
        if self.order < 1:
            raise ValueError(f"order must be a positive integer, got {self.order}")


@dataclass
class EcgWindow:
    """A fixed-length normalized segment of a preprocessed record."""

    subject_id: str
    samples: np.ndarray
    fs: float = DEFAULT_FS
    source_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


def design_butterworth_bandpass(spec: FilterSpec) -> np.ndarray:
    """Design an order-`spec.order` Butterworth bandpass as second-order sections.

    Returns the SOS coefficient array, shape (n_sections, 6).
    """
    nyq = spec.fs / 2.0
    sos = sps.butter(
        spec.order, [spec.low_hz / nyq, spec.high_hz / nyq], btype="bandpass", output="sos"
    )
    return sos


def sos_gain(sos: np.ndarray, freq_hz: float, fs: float) -> float:
    """Magnitude of the cascade transfer function at a single frequency."""
    w = 2.0 * np.pi * freq_hz / fs
    _, h = sps.sosfreqz(sos, worN=[w])
    return float(np.abs(h[0]))


def filtfilt(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Zero-phase forward-backward application of a biquad cascade."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("filtfilt: input is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("filtfilt: input contains non-finite values")
    return sps.sosfiltfilt(sos, x)


def median_filter(x: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding-median smoothing with reflected edges."""
    x = np.asarray(x, dtype=np.float64)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and positive, got {kernel}")
    if kernel > x.size:
        raise ValueError(f"median kernel {kernel} exceeds signal length {x.size}")
    if kernel == 1:
        return x.copy()
    return ndimage.median_filter(x, size=kernel, mode="reflect")


def resample(x: np.ndarray, fs_in: float, fs_out: float) -> np.ndarray:
    """Resample by linear interpolation on the continuous-time grid."""
    x = np.asarray(x, dtype=np.float64)
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    if x.size < 2:
        raise ValueError(f"resample needs at least 2 samples, got {x.size}")
    n_out = int(round(x.size * fs_out / fs_in))
    t_in = np.arange(x.size) / fs_in
    t_out = np.arange(n_out) / fs_out
    return np.interp(t_out, t_in, x)


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("minmax_normalize: input is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("minmax_normalize: input contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def window(
    record: EcgRecord,
    seq_len: int = DEFAULT_SEQ_LEN,
    stride: int | None = None,
    normalize: bool = True,
) -> list[EcgWindow]:
    """Cut a (filtered, resampled) record into fixed-length windows.

    The trailing partial window is dropped. A record too short for a single
    window yields an empty list and is logged as excluded.
    """
    if seq_len <= 0:
        raise ValueError("seq_len must be positive")
    stride = seq_len if stride is None else stride
    if stride <= 0:
        raise ValueError("stride must be positive")
    n = record.samples.size
    if n < seq_len:
        logger.warning(
            "record %s excluded: %d samples < window length %d",
            record.subject_id, n, seq_len,
        )
        return []
    out = []
    for off in range(0, n - seq_len + 1, stride):
        seg = record.samples[off:off + seq_len]
        if normalize:
            seg = minmax_normalize(seg)
        out.append(EcgWindow(record.subject_id, seg, fs=record.fs, source_offset=off))
    return out


def preprocess_record(
    record: EcgRecord,
    spec: FilterSpec | None = None,
    fs_target: float = DEFAULT_FS,
    median_kernel: int = 5,
    seq_len: int = DEFAULT_SEQ_LEN,
    stride: int | None = None,
) -> list[EcgWindow]:
    """Full preprocessing chain: bandpass, median, resample, window, normalize."""
    spec = spec or FilterSpec(fs=record.fs)
    sos = design_butterworth_bandpass(spec)
    x = filtfilt(sos, record.samples)
    x = median_filter(x, median_kernel)
    x = resample(x, record.fs, fs_target)
    clean = EcgRecord(
        record.subject_id, x, fs_target,
        gender_label=record.gender_label, age_years=record.age_years,
    )
    return window(clean, seq_len=seq_len, stride=stride)
