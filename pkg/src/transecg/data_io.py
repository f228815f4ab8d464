"""Dataset ingestion (manifest + CSV) and a ground-truth-bearing synthetic ECG generator."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .signal_core import EcgRecord

logger = logging.getLogger(__name__)


class Task(Enum):
    GENDER = "gender"
    AGE_GROUP = "age"
    PARTICIPANT_ID = "id"


AGE_BIN_EDGES = (18, 35, 50, 65)  # inclusive upper edges; 66+ is the last bin
AGE_BIN_NAMES = ("0-18", "19-35", "36-50", "51-65", "66+")


@dataclass
class ManifestEntry:
    subject_id: str
    csv_path: Path
    fs: float
    gender: str | None = None
    age_years: int | None = None


@dataclass
class DatasetManifest:
    dataset: str
    entries: list[ManifestEntry]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a dataset manifest JSON file."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if "records" not in doc:
        raise ValueError(f"{path}: manifest missing 'records' array")
    entries = []
    seen = set()
    for i, row in enumerate(doc["records"]):
        try:
            sid = str(row["subject_id"])
            csv = path.parent / row["csv"]
            fs = float(row["fs"])
        except KeyError as e:
            raise ValueError(f"{path}: record {i} missing field {e}") from e
        if sid in seen:
            raise ValueError(f"{path}: duplicate subject_id {sid!r}")
        seen.add(sid)
        if not csv.exists():
            raise FileNotFoundError(f"{path}: record {i} references missing file {csv}")
        age = row.get("age_years")
        entries.append(ManifestEntry(
            subject_id=sid, csv_path=csv, fs=fs,
            gender=row.get("gender"),
            age_years=int(age) if age is not None else None,
        ))
    return DatasetManifest(dataset=str(doc.get("dataset", path.stem)), entries=entries)


def load_record(entry: ManifestEntry) -> EcgRecord:
    """Load one CSV trace (one amplitude per line, optional 'amplitude' header)."""
    values = []
    with open(entry.csv_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            tok = line.strip()
            if not tok:
                continue
            if lineno == 1 and tok.lower() == "amplitude":
                continue
            try:
                values.append(float(tok))
            except ValueError as e:
                raise ValueError(
                    f"{entry.csv_path}: non-numeric sample {tok!r} at line {lineno}"
                ) from e
    return EcgRecord(
        subject_id=entry.subject_id,
        samples=np.array(values, dtype=np.float64),
        fs=entry.fs,
        gender_label=entry.gender,
        age_years=entry.age_years,
    )


def save_record_csv(path: str | Path, samples: np.ndarray, header: bool = True) -> None:
    """Write samples one-per-line; repr round-trips float64 exactly."""
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write("amplitude\n")
        for v in np.asarray(samples, dtype=np.float64):
            f.write(f"{float(v)!r}\n")


@dataclass(frozen=True)
class WaveParams:
    """One Gaussian bump: center offset from the beat anchor (s), amplitude, sigma (s)."""

    offset_s: float
    amplitude: float
    sigma_s: float


DEFAULT_WAVES: dict[str, WaveParams] = {
    "P": WaveParams(-0.180, 0.12, 0.025),
    "Q": WaveParams(-0.030, -0.10, 0.010),
    "R": WaveParams(0.0, 1.0, 0.012),
    "S": WaveParams(0.030, -0.15, 0.010),
    "T": WaveParams(0.250, 0.30, 0.060),
}


@dataclass
class SyntheticEcgSpec:
    bpm: float = 60.0
    duration_s: float = 8.0
    fs: float = 250.0
    waves: dict[str, WaveParams] = field(default_factory=lambda: dict(DEFAULT_WAVES))
    noise_std: float = 0.0
    seed: int = 0
    subject_id: str = "synthetic"
    gender: str | None = None
    age_years: int | None = None

    def __post_init__(self):
        if not (30.0 <= self.bpm <= 220.0):
            raise ValueError(f"bpm must be in [30, 220], got {self.bpm}")
        if self.fs < 100.0:
            raise ValueError(f"fs must be >= 100, got {self.fs}")
        for name, w in self.waves.items():
            if w.sigma_s <= 0:
                raise ValueError(f"wave {name}: sigma must be positive")


@dataclass
class BeatTruth:
    """Exact wave-center sample indices for one synthetic beat (None if off-record)."""

    p: int | None
    q: int | None
    r: int
    s: int | None
    t: int | None


@dataclass
class SyntheticGroundTruth:
    r_locations: list[int]
    beats: list[BeatTruth]


def synthesize(spec: SyntheticEcgSpec) -> tuple[EcgRecord, SyntheticGroundTruth]:
    """Generate a Gaussian-bump ECG with exact fiducial ground truth."""
    n = int(round(spec.duration_s * spec.fs))
    t = np.arange(n) / spec.fs
    x = np.zeros(n)
    period = 60.0 / spec.bpm
    n_beats = int(np.floor((spec.duration_s - 1e-9) / period)) + 1

    beats = []
    r_locs = []
    for k in range(n_beats):
        anchor = k * period
        for w in spec.waves.values():
            c = anchor + w.offset_s
            x += w.amplitude * np.exp(-0.5 * ((t - c) / w.sigma_s) ** 2)

        def _idx(offset_s: float) -> int | None:
            i = int(round((anchor + offset_s) * spec.fs))
            return i if 0 <= i < n else None

        r = _idx(spec.waves["R"].offset_s)
        if r is None:
            continue
        r_locs.append(r)
        beats.append(BeatTruth(
            p=_idx(spec.waves["P"].offset_s),
            q=_idx(spec.waves["Q"].offset_s),
            r=r,
            s=_idx(spec.waves["S"].offset_s),
            t=_idx(spec.waves["T"].offset_s),
        ))

    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        x = x + rng.normal(0.0, spec.noise_std, size=n)

    record = EcgRecord(
        subject_id=spec.subject_id, samples=x, fs=spec.fs,
        gender_label=spec.gender, age_years=spec.age_years,
    )
    return record, SyntheticGroundTruth(r_locations=r_locs, beats=beats)


def age_bin(age_years: int) -> int:
    """Map an age in years to one of the five age-group class indices."""
    for i, edge in enumerate(AGE_BIN_EDGES):
        if age_years <= edge:
            return i
    return len(AGE_BIN_EDGES)


def build_vocab(records: list[EcgRecord], task: Task) -> dict[str, int]:
    """Build the label vocabulary (name -> class index) for a task.

    Records missing the metadata a task needs are excluded with a warning.
    """
    if task is Task.GENDER:
        return {"male": 0, "female": 1}
    if task is Task.AGE_GROUP:
        return {name: i for i, name in enumerate(AGE_BIN_NAMES)}
    ids = set()
    for r in records:
        ids.add(r.subject_id)
    return {sid: i for i, sid in enumerate(sorted(ids))}


def record_label(record: EcgRecord, task: Task, vocab: dict[str, int]) -> int | None:
    """Class index of a record for a task, or None (with a warning) if metadata is missing."""
    if task is Task.GENDER:
        if record.gender_label not in vocab:
            logger.warning("record %s excluded: no gender label", record.subject_id)
            return None
        return vocab[record.gender_label]
    if task is Task.AGE_GROUP:
        if record.age_years is None:
            logger.warning("record %s excluded: no age", record.subject_id)
            return None
        return age_bin(record.age_years)
    if record.subject_id not in vocab:
        logger.warning("record %s excluded: not in id vocabulary", record.subject_id)
        return None
    return vocab[record.subject_id]
