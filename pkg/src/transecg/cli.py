"""Command-line pipeline: synth -> preprocess -> train -> evaluate -> explain.

A single JSON config (plus --set overrides) governs every stage; all
randomness derives from the one run seed, so identical configs reproduce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io, delineation, explain, signal_core, training, vit
from .data_io import SyntheticEcgSpec, Task, WaveParams

STORE_BIN = "windows.bin"
STORE_INDEX = "windows.json"


@dataclass
class RunConfig:
    # model
    seq_len: int = 2000
    patch_size: int = 20
    hidden_dim: int = 256
    n_layers: int = 6
    n_heads: int = 6
    mlp_dim: int = 128
    survival_prob: float = 0.8
    ln_eps: float = 1e-6
    # preprocessing
    low_hz: float = 0.5
    high_hz: float = 40.0
    filter_order: int = 4
    fs_target: float = 250.0
    median_kernel: int = 5
    stride: int = 0  # 0 means non-overlapping (= seq_len)
    # task / training
    task: str = "gender"
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 45
    early_stop_patience: int = 10
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5
    weight_decay: float = 1e-4
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    # synthetic data generation
    synth_subjects: int = 8
    synth_duration_s: float = 64.0
    synth_bpm: float = 60.0
    synth_noise_std: float = 0.01
    # explain
    explain_windows: int = 8
    # paths
    manifest: str = ""
    workdir: str = "work"
    checkpoint: str = ""

    def validate(self) -> None:
        positive = (
            "seq_len", "patch_size", "hidden_dim", "n_layers", "n_heads", "mlp_dim",
            "fs_target", "batch_size", "max_epochs", "synth_subjects",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name!r} must be positive")
        if self.lr < 0:
            raise ValueError("config field 'lr' must be non-negative")
        if not (0 < self.survival_prob <= 1):
            raise ValueError("config field 'survival_prob' must be in (0, 1]")
        if self.task not in {t.value for t in Task}:
            raise ValueError(f"config field 'task' must be one of gender|age|id, got {self.task!r}")

    def vit_config(self, n_classes: int) -> vit.VitConfig:
        return vit.VitConfig(
            seq_len=self.seq_len, patch_size=self.patch_size,
            hidden_dim=self.hidden_dim, n_layers=self.n_layers,
            n_heads=self.n_heads, mlp_dim=self.mlp_dim, n_classes=n_classes,
            survival_prob=self.survival_prob, ln_eps=self.ln_eps,
        )

    def hparams(self) -> training.TrainHParams:
        return training.TrainHParams(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            weight_decay=self.weight_decay,
            early_stop_patience=self.early_stop_patience,
            scheduler_factor=self.scheduler_factor,
            scheduler_patience=self.scheduler_patience,
        )


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            doc = json.load(f)
        cfg = _apply(cfg, doc)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    cfg = _apply(cfg, overrides, coerce=True)
    if args.workdir:
        cfg.workdir = args.workdir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.task:
        cfg.task = args.task
    cfg.validate()
    return cfg


def _apply(cfg: RunConfig, doc: dict, coerce: bool = False) -> RunConfig:
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    updates = {}
    for key, value in doc.items():
        if key not in fields:
            raise ValueError(f"unknown config field {key!r}")
        if coerce:
            current = getattr(cfg, key)
            if isinstance(current, bool):
                value = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
        updates[key] = value
    return dataclasses.replace(cfg, **updates)


def _json_dump(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> str:
    """Generate a synthetic multi-subject dataset and its manifest."""
    workdir = Path(cfg.workdir)
    data_dir = workdir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    records = []
    for i in range(cfg.synth_subjects):
        sid = f"S{i:03d}"
        waves = dict(data_io.DEFAULT_WAVES)
        # per-subject morphology: distinct T amplitude, P timing and rate
        waves["T"] = WaveParams(0.250, 0.15 + 0.5 * i / max(1, cfg.synth_subjects - 1), 0.060)
        waves["P"] = WaveParams(-0.180 - 0.004 * (i % 4), 0.12, 0.025)
        bpm = cfg.synth_bpm + 4.0 * (i % 5)
        spec = SyntheticEcgSpec(
            bpm=bpm, duration_s=cfg.synth_duration_s, fs=cfg.fs_target,
            waves=waves, noise_std=cfg.synth_noise_std,
            seed=int(rng.integers(2**63)), subject_id=sid,
            gender="male" if i % 2 == 0 else "female",
            age_years=int(20 + 7 * i),
        )
        record, _ = data_io.synthesize(spec)
        csv_name = f"{sid}.csv"
        data_io.save_record_csv(data_dir / csv_name, record.samples)
        records.append({
            "subject_id": sid, "csv": csv_name, "fs": cfg.fs_target,
            "gender": record.gender_label, "age_years": record.age_years,
        })

    manifest_path = data_dir / "manifest.json"
    _json_dump(manifest_path, {"dataset": "synthetic", "records": records})
    return f"synth: wrote {len(records)} subjects to {manifest_path}"


def cmd_preprocess(cfg: RunConfig) -> str:
    """Filter, resample, window and normalize every record into the window store."""
    workdir = Path(cfg.workdir)
    manifest_path = Path(cfg.manifest) if cfg.manifest else workdir / "data" / "manifest.json"
    manifest = data_io.load_manifest(manifest_path)

    windows = []
    index = []
    for entry in manifest.entries:
        record = data_io.load_record(entry)
        spec = signal_core.FilterSpec(cfg.low_hz, cfg.high_hz, cfg.filter_order, record.fs)
        for w in signal_core.preprocess_record(
            record, spec=spec, fs_target=cfg.fs_target,
            median_kernel=cfg.median_kernel, seq_len=cfg.seq_len,
            stride=cfg.stride or None,
        ):
            windows.append(w.samples)
            index.append({
                "subject_id": w.subject_id, "source_offset": w.source_offset,
                "gender": record.gender_label, "age_years": record.age_years,
            })

    workdir.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(windows, dtype="<f8")
    with open(workdir / STORE_BIN, "wb") as f:
        f.write(arr.tobytes())
    _json_dump(workdir / STORE_INDEX, {
        "seq_len": cfg.seq_len, "fs": cfg.fs_target, "windows": index,
    })
    return f"preprocess: stored {len(windows)} windows in {workdir}"


def load_store(cfg: RunConfig) -> tuple[np.ndarray, list[dict]]:
    workdir = Path(cfg.workdir)
    with open(workdir / STORE_INDEX, encoding="utf-8") as f:
        doc = json.load(f)
    n = len(doc["windows"])
    data = np.fromfile(workdir / STORE_BIN, dtype="<f8").reshape(n, doc["seq_len"])
    return data, doc["windows"]


def _labeled_windows(
    cfg: RunConfig, index: list[dict],
) -> tuple[list, dict[str, int], np.ndarray, list[int]]:
    task = Task(cfg.task)
    records = [
        signal_core.EcgRecord(
            row["subject_id"], np.zeros(1), cfg.fs_target,
            gender_label=row["gender"], age_years=row["age_years"],
        ) for row in index
    ]
    vocab = data_io.build_vocab(records, task)
    labeled = []
    labels = []
    kept = []
    for i, (row, rec) in enumerate(zip(index, records)):
        label = data_io.record_label(rec, task, vocab)
        if label is None:
            continue
        w = signal_core.EcgWindow(row["subject_id"], np.zeros(1), cfg.fs_target,
                                  source_offset=row["source_offset"])
        labeled.append(training.LabeledWindow(window=w, label=label, task=task))
        labels.append(label)
        kept.append(i)
    return labeled, vocab, np.asarray(labels, dtype=np.int64), kept


def cmd_train(cfg: RunConfig) -> str:
    x, index = load_store(cfg)
    labeled, vocab, y, kept = _labeled_windows(cfg, index)
    x = x[kept]
    task = Task(cfg.task)
    n_classes = len(vocab)
    plan = training.make_split(labeled, task, cfg.seed,
                               fractions=(cfg.train_frac, cfg.val_frac, cfg.test_frac))
    config = cfg.vit_config(n_classes)
    report, best = training.train(x, y, plan, config, cfg.hparams(), cfg.seed)

    test_metrics = None
    if plan.test:
        test_metrics = training.evaluate(best, config, x[plan.test], y[plan.test], task=task)
        report.test_metrics = test_metrics

    workdir = Path(cfg.workdir)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else workdir / "model.ckpt"
    vit.save_checkpoint(ckpt, best, config, vocab,
                        meta={"task": cfg.task, "seed": cfg.seed})
    _json_dump(workdir / "train_report.json", report.to_dict())
    acc = test_metrics["accuracy"] if test_metrics else float("nan")
    return (f"train: best epoch {report.best_epoch}, "
            f"test accuracy {acc:.3f}, checkpoint {ckpt}")


def cmd_evaluate(cfg: RunConfig) -> str:
    workdir = Path(cfg.workdir)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else workdir / "model.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, config, vocab, meta = vit.load_checkpoint(ckpt)
    x, index = load_store(cfg)
    labeled, _, y, kept = _labeled_windows(cfg, index)
    x = x[kept]
    task = Task(cfg.task)
    plan = training.make_split(labeled, task, cfg.seed,
                               fractions=(cfg.train_frac, cfg.val_frac, cfg.test_frac))
    metrics = training.evaluate(params, config, x[plan.test], y[plan.test], task=task)
    _json_dump(workdir / "metrics.json", metrics)
    return f"evaluate: test accuracy {metrics['accuracy']:.3f} -> {workdir / 'metrics.json'}"


def cmd_explain(cfg: RunConfig) -> str:
    workdir = Path(cfg.workdir)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else workdir / "model.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params, config, vocab, meta = vit.load_checkpoint(ckpt)
    x, index = load_store(cfg)
    labeled, _, y, kept = _labeled_windows(cfg, index)
    x = x[kept]
    task = Task(cfg.task)
    plan = training.make_split(labeled, task, cfg.seed,
                               fractions=(cfg.train_frac, cfg.val_frac, cfg.test_frac))
    targets = plan.test[:cfg.explain_windows] or plan.train[:cfg.explain_windows]

    weights = explain.head_weights(params, config)
    reports = []
    first = None
    skipped = 0
    for i in targets:
        window = x[i]
        art = vit.forward(window[None, :], params, config, capture_attention=True)
        imp = explain.extract_importance(art)
        try:
            peaks = delineation.pan_tompkins(window, cfg.fs_target)
            if peaks.indices.size == 0:
                raise ValueError("no beats")
            fids = delineation.delineate(window, peaks, cfg.fs_target)
            imap = delineation.intervals(fids, cfg.fs_target)
            rep = explain.attribute(imp.importance, imap, config, task=cfg.task)
        except ValueError:
            skipped += 1
            continue
        rep.head_weights = [float(v) for v in weights]
        reports.append(rep)
        if first is None:
            first = (imp, window)

    if not reports:
        raise ValueError("explain: no window could be attributed")
    combined = explain.aggregate(reports)
    combined.head_weights = [float(v) for v in weights]
    out = workdir / "explain"
    paths = explain.emit_report(combined, first[0].per_head, first[1], out, config)
    return (f"explain: attributed {len(reports)} windows ({skipped} skipped), "
            f"report {paths['json']}")


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="transecg",
        description="ECG preprocessing, transformer training and attention attribution",
    )
    parser.add_argument("command",
                        choices=["synth", "preprocess", "train", "evaluate", "explain"])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--workdir", help="working directory for all stage outputs")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.add_argument("--task", choices=[t.value for t in Task])
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args)
        summary = {
            "synth": cmd_synth,
            "preprocess": cmd_preprocess,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "explain": cmd_explain,
        }[args.command](cfg)
    except (ValueError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
