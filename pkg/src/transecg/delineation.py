"""R-peak detection (Pan-Tompkins) and rule-based PQRST delineation.

Interval naming follows clinical usage: the named composite intervals
(P-R, Q-T, S-T) are derived from a disjoint base partition of each beat so
that attributed percentages over the base partition sum to 100%.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

logger = logging.getLogger(__name__)

REFRACTORY_S = 0.200
BASE_INTERVALS = ("P_WAVE", "PQ_SEGMENT", "QRS", "ST_SEGMENT", "T_WAVE", "TQ_BASELINE")
COMPOSITE_INTERVALS: dict[str, tuple[str, ...]] = {
    "P_R": ("P_WAVE", "PQ_SEGMENT"),
    "S_T": ("ST_SEGMENT", "T_WAVE"),
    "Q_T": ("QRS", "ST_SEGMENT", "T_WAVE"),
}


@dataclass
class RPeakList:
    indices: np.ndarray  # strictly increasing sample indices
    fs: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size > 1:
            gaps = np.diff(self.indices)
            min_gap = int(round(REFRACTORY_S * self.fs))
            if np.any(gaps < min_gap):
                raise ValueError("R peaks violate the 200 ms refractory period")


@dataclass
class BeatFiducials:
    r: int
    q: int | None = None
    s: int | None = None
    p_on: int | None = None
    p_off: int | None = None
    t_on: int | None = None
    t_off: int | None = None


@dataclass
class IntervalMap:
    """Per-beat named half-open sample ranges; composites derived from base ranges."""

    beats: list[dict[str, tuple[int, int]]]

    def all_ranges(self, name: str) -> list[tuple[int, int]]:
        return [b[name] for b in self.beats if name in b]


def pan_tompkins(x: np.ndarray, fs: float) -> RPeakList:
    """Detect R peaks: bandpass, derivative, squaring, integration, adaptive thresholds.

    Peaks are refined to the local maximum of the band-passed signal within
    +-50 ms of each integrated-signal detection.
    """
    x = np.asarray(x, dtype=np.float64)
    if fs < 100:
        raise ValueError(f"pan_tompkins requires fs >= 100 Hz, got {fs}")
    if x.size < int(2 * fs):
        raise ValueError(f"pan_tompkins needs >= 2 s of signal, got {x.size / fs:.2f} s")
    if np.ptp(x) == 0.0:
        return RPeakList(np.array([], dtype=np.int64), fs)

    nyq = fs / 2.0
    sos = sps.butter(2, [5.0 / nyq, 15.0 / nyq], btype="bandpass", output="sos")
    # the whole chain runs on an even-reflected extension so a beat cut off at
    # a record boundary still produces a genuine local maximum there
    pad = int(fs)
    bp_p = sps.sosfiltfilt(sos, np.pad(x, pad, mode="reflect"))

    # 5-point derivative, squaring, 150 ms moving-window integration
    deriv = np.convolve(bp_p, np.array([1, 2, 0, -2, -1]) * (fs / 8.0), mode="same")
    sq = deriv ** 2
    win = max(1, int(round(0.150 * fs)))
    mwi_p = np.convolve(sq, np.ones(win) / win, mode="same")
    bp = bp_p[pad:-pad]
    mwi = mwi_p[pad:-pad]

    refractory = int(round(REFRACTORY_S * fs))
    cand_p, _ = sps.find_peaks(mwi_p, distance=refractory)
    cand = cand_p[(cand_p >= pad) & (cand_p < pad + x.size)] - pad
    if cand.size == 0:
        return RPeakList(np.array([], dtype=np.int64), fs)

    # adaptive dual thresholds initialized from the first 2 s
    init = mwi[: int(2 * fs)]
    spki = 0.25 * init.max()
    npki = 0.5 * float(init.mean())
    threshold1 = npki + 0.25 * (spki - npki)

    detections: list[int] = []
    missed: list[int] = []
    rr_history: list[float] = []
    for c in cand:
        if mwi[c] > threshold1:
            if detections and c - detections[-1] < refractory:
                missed.append(c)
                continue
            # search-back: a long gap suggests a missed beat above threshold2
            if rr_history and detections:
                rr_avg = float(np.mean(rr_history[-8:]))
                if c - detections[-1] > 1.66 * rr_avg and missed:
                    threshold2 = 0.5 * threshold1
                    back = [m for m in missed if detections[-1] + refractory <= m <= c - refractory]
                    if back:
                        best = max(back, key=lambda m: mwi[m])
                        if mwi[best] > threshold2:
                            rr_history.append(best - detections[-1])
                            detections.append(best)
            if detections:
                rr_history.append(c - detections[-1])
            detections.append(c)
            spki = 0.125 * mwi[c] + 0.875 * spki
            missed = []
        else:
            missed.append(c)
            npki = 0.125 * mwi[c] + 0.875 * npki
        threshold1 = npki + 0.25 * (spki - npki)

    # refine each detection to the band-passed local maximum within +-50 ms
    half = int(round(0.050 * fs))
    refined = []
    for d in sorted(detections):
        lo, hi = max(0, d - half), min(x.size, d + half + 1)
        refined.append(lo + int(np.argmax(bp[lo:hi])))

    # dedupe refinements that collapsed onto the same peak
    out: list[int] = []
    for r in sorted(refined):
        if not out or r - out[-1] >= refractory:
            out.append(r)
    return RPeakList(np.array(out, dtype=np.int64), fs)


def _is_flat(seg: np.ndarray, signal_range: float) -> bool:
    if seg.size == 0:
        return True
    if signal_range == 0.0:
        return True
    return np.ptp(seg) < 1e-9 * signal_range


def _local_extremum(x: np.ndarray, lo: int, hi: int, mode: str) -> int | None:
    """Index of the min/max/largest-|deviation| sample in x[lo:hi), or None."""
    lo, hi = max(0, lo), min(x.size, hi)
    if hi <= lo:
        return None
    seg = x[lo:hi]
    if mode == "min":
        return lo + int(np.argmin(seg))
    if mode == "max":
        return lo + int(np.argmax(seg))
    baseline = np.median(seg)
    return lo + int(np.argmax(np.abs(seg - baseline)))


def delineate(x: np.ndarray, peaks: RPeakList, fs: float) -> list[BeatFiducials]:
    """Locate Q, S, P-wave and T-wave fiducials around each R peak.

    Search windows follow standard clinical timing; fiducials are clipped to
    the window bounds and omitted when a search region is empty or flat.
    """
    x = np.asarray(x, dtype=np.float64)
    if peaks.indices.size == 0:
        raise ValueError("delineate requires at least one R peak")
    ms = lambda v: int(round(v * fs / 1000.0))
    rng = float(np.ptp(x))

    out = []
    for r in peaks.indices:
        r = int(r)
        fid = BeatFiducials(r=r)

        q = _local_extremum(x, r - ms(80), r, "min")
        if q is not None and not _is_flat(x[max(0, r - ms(80)):r], rng):
            fid.q = q
        s = _local_extremum(x, r + 1, r + ms(80) + 1, "min")
        if s is not None and not _is_flat(x[r + 1:r + ms(80) + 1], rng):
            fid.s = s

        p_lo, p_hi = r - ms(240), r - ms(90)
        if p_lo >= 0 and not _is_flat(x[max(0, p_lo):max(0, p_hi)], rng):
            p = _local_extremum(x, p_lo, p_hi, "max")
            if p is not None:
                fid.p_on = max(0, p - ms(40))
                fid.p_off = p + ms(40)

        if fid.s is not None:
            t_lo, t_hi = fid.s + ms(80), fid.s + ms(360)
            if not _is_flat(x[max(0, t_lo):min(x.size, t_hi)], rng):
                t = _local_extremum(x, t_lo, t_hi, "dev")
                if t is not None:
                    fid.t_on = max(fid.s + 1, t - ms(80))
                    fid.t_off = min(x.size, t + ms(80))

        out.append(fid)
    return out


def _ordered(fid: BeatFiducials) -> bool:
    seq = [fid.p_on, fid.p_off, fid.q, fid.r, fid.s, fid.t_on, fid.t_off]
    present = [v for v in seq if v is not None]
    return all(a < b for a, b in zip(present, present[1:]))


def intervals(fids: list[BeatFiducials], fs: float) -> IntervalMap:
    """Derive the disjoint base partition (and composites) for each beat.

    Beats whose fiducials are out of order are skipped with a warning.
    """
    beats: list[dict[str, tuple[int, int]]] = []
    for i, fid in enumerate(fids):
        if not _ordered(fid):
            logger.warning("beat %d skipped: fiducial ordering violated", i)
            continue
        b: dict[str, tuple[int, int]] = {}
        if fid.p_on is not None and fid.p_off is not None:
            b["P_WAVE"] = (fid.p_on, fid.p_off)
            if fid.q is not None:
                b["PQ_SEGMENT"] = (fid.p_off, fid.q)
        if fid.q is not None and fid.s is not None:
            b["QRS"] = (fid.q, fid.s + 1)
        if fid.s is not None and fid.t_on is not None and fid.t_off is not None:
            b["ST_SEGMENT"] = (fid.s + 1, fid.t_on)
            b["T_WAVE"] = (fid.t_on, fid.t_off)
        if fid.t_off is not None and i + 1 < len(fids) and fids[i + 1].p_on is not None:
            nxt = fids[i + 1].p_on
            if nxt > fid.t_off:
                b["TQ_BASELINE"] = (fid.t_off, nxt)
        for name, parts in COMPOSITE_INTERVALS.items():
            if all(p in b for p in parts):
                b[name] = (b[parts[0]][0], b[parts[-1]][1])
        beats.append(b)
    return IntervalMap(beats=beats)
