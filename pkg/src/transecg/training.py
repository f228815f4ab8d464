"""Dataset splitting, cross-entropy loss, the optimization loop, and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import vit
from .autodiff import AdamW, Tensor
from .data_io import Task
from .signal_core import EcgWindow

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LabeledWindow:
    window: EcgWindow
    label: int
    task: Task


@dataclass
class SplitPlan:
    train: list[int]
    val: list[int]
    test: list[int]
    split_mode: str  # "by_participant" | "within_participant"


@dataclass
class TrainHParams:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 45
    weight_decay: float = 1e-4
    early_stopping: bool = True
    early_stop_patience: int = 10
    scheduler_factor: float = 0.5
    scheduler_patience: int = 5

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("hyperparameter 'lr' must be non-negative")
        for name in ("batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hyperparameter {name!r} must be positive")


@dataclass
class TrainReport:
    epochs: list[dict]
    best_epoch: int
    test_metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "test_metrics": self.test_metrics,
        }


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true classes.

    Probabilities are floored at 1e-12 before the log to guard underflow.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.mul(ad.tlog(ad.clip_min(probs, PROB_FLOOR)), Tensor(onehot))
    return ad.scale(ad.tsum(picked), -1.0 / b)


def make_split(windows: list[LabeledWindow], task: Task, seed: int,
               fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> SplitPlan:
    """Deterministic 70/15/15 split.

    Gender and age tasks split by participant (no subject in two lists); the
    participant-ID task splits within each participant, since every subject
    is itself a class. Input ordering does not matter: windows are sorted by
    (subject_id, source_offset) before the seeded shuffle.
    """
    if len(windows) < 3:
        raise ValueError("need at least 3 windows to split")
    order = sorted(
        range(len(windows)),
        key=lambda i: (windows[i].window.subject_id, windows[i].window.source_offset),
    )
    rng = np.random.default_rng(seed)

    if task is Task.PARTICIPANT_ID:
        by_subject: dict[str, list[int]] = {}
        for i in order:
            by_subject.setdefault(windows[i].window.subject_id, []).append(i)
        train, val, test = [], [], []
        for sid in sorted(by_subject):
            idx = by_subject[sid]
            if len(idx) < 3:
                logger.warning("participant %s excluded: only %d windows", sid, len(idx))
                continue
            idx = list(rng.permutation(idx))
            n = len(idx)
            n_val = max(1, int(round(fractions[1] * n)))
            n_test = max(1, int(round(fractions[2] * n)))
            val.extend(int(i) for i in idx[:n_val])
            test.extend(int(i) for i in idx[n_val:n_val + n_test])
            train.extend(int(i) for i in idx[n_val + n_test:])
        return SplitPlan(sorted(train), sorted(val), sorted(test), "within_participant")

    subjects = sorted({windows[i].window.subject_id for i in order})
    shuffled = list(rng.permutation(subjects))
    n = len(shuffled)
    n_train = int(round(fractions[0] * n))
    n_val = max(1, int(round(fractions[1] * n))) if n - n_train >= 2 else max(0, n - n_train - 1)
    groups = {
        sid: "train" for sid in shuffled[:n_train]
    }
    for sid in shuffled[n_train:n_train + n_val]:
        groups[sid] = "val"
    for sid in shuffled[n_train + n_val:]:
        groups[sid] = "test"
    plan = {"train": [], "val": [], "test": []}
    for i in order:
        plan[groups[windows[i].window.subject_id]].append(i)
    return SplitPlan(plan["train"], plan["val"], plan["test"], "by_participant")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def predict_probs(params, config, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities for an array of windows."""
    outs = []
    with ad.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            outs.append(vit.forward(x[lo:lo + batch_size], params, config).probs.data)
    return np.concatenate(outs, axis=0)


def train(x: np.ndarray, y: np.ndarray, plan: SplitPlan, config: vit.VitConfig,
          hparams: TrainHParams, seed: int,
          init: dict[str, Tensor] | None = None) -> tuple[TrainReport, dict[str, Tensor]]:
    """Optimize the model; returns the report and the best-validation parameters.

    Scheduler halves the learning rate after `scheduler_patience` epochs
    without validation-accuracy improvement; early stopping fires after
    `early_stop_patience` such epochs.
    """
    hparams.validate()
    if not plan.train or not plan.val:
        raise ValueError("train and val sets must be non-empty")
    params = init if init is not None else vit.init_params(config, seed)
    opt = AdamW(params, lr=hparams.lr, weight_decay=hparams.weight_decay)
    x_tr, y_tr = x[plan.train], y[plan.train]
    x_val, y_val = x[plan.val], y[plan.val]

    best_acc = -1.0
    best_epoch = -1
    best_params: dict[str, np.ndarray] = {k: p.data.copy() for k, p in params.items()}
    stall = 0
    epochs = []
    for epoch in range(hparams.max_epochs):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
        losses = []
        correct = 0
        for batch_no, idx in enumerate(_batches(len(x_tr), hparams.batch_size, rng)):
            opt.zero_grad()
            art = vit.forward(x_tr[idx], params, config, training=True, rng=rng)
            loss = cross_entropy(art.probs, y_tr[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            correct += int(np.sum(np.argmax(art.probs.data, axis=1) == y_tr[idx]))

        val_probs = predict_probs(params, config, x_val)
        with ad.no_grad():
            val_loss = float(cross_entropy(Tensor(val_probs), y_val).data)
        val_acc = _accuracy(val_probs, y_val)
        epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_accuracy": correct / len(x_tr),
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "lr": opt.lr,
        })

        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
            stall = 0
        else:
            stall += 1
            if stall > 0 and stall % hparams.scheduler_patience == 0:
                opt.lr *= hparams.scheduler_factor
            if hparams.early_stopping and stall >= hparams.early_stop_patience:
                break

    restored = {k: Tensor(v, requires_grad=True, name=k) for k, v in best_params.items()}
    return TrainReport(epochs=epochs, best_epoch=best_epoch), restored


# ---------------------------------------------------------------------------
# metrics


def roc_curve(scores: np.ndarray, positives: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-rest ROC points (fpr, tpr) sorted by descending score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return np.array([0.0, 1.0]), np.array([0.0, 1.0])
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positives[order]
    tps = np.cumsum(sorted_pos)
    fps = np.cumsum(~sorted_pos)
    # collapse ties: keep the last point of each distinct score
    distinct = np.r_[np.diff(scores[order]) != 0, True]
    tpr = np.r_[0.0, tps[distinct] / n_pos]
    fpr = np.r_[0.0, fps[distinct] / n_neg]
    return fpr, tpr


def auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.trapezoid(tpr, fpr))


def evaluate(params, config, x: np.ndarray, y: np.ndarray,
             task: Task | None = None) -> dict:
    """Accuracy, macro precision/recall/F1, and one-vs-rest ROC/AUC per class."""
    if x.shape[0] == 0:
        raise ValueError("evaluate requires a non-empty set")
    probs = predict_probs(params, config, x)
    return evaluate_probs(probs, y, task=task)


def evaluate_probs(probs: np.ndarray, y: np.ndarray, task: Task | None = None) -> dict:
    y = np.asarray(y, dtype=np.int64)
    k = probs.shape[1]
    preds = np.argmax(probs, axis=1)  # ties resolve to the lowest class index

    precisions, recalls, f1s = [], [], []
    missing = []
    roc_points = {}
    aucs = {}
    for c in range(k):
        tp = int(np.sum((preds == c) & (y == c)))
        fp = int(np.sum((preds == c) & (y != c)))
        fn = int(np.sum((preds != c) & (y == c)))
        if np.sum(y == c) == 0:
            missing.append(c)
            prec = rec = 0.0
        else:
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
        fpr, tpr = roc_curve(probs[:, c], y == c)
        roc_points[c] = (fpr.tolist(), tpr.tolist())
        aucs[c] = auc(fpr, tpr)

    out = {
        "accuracy": _accuracy(probs, y),
        "macro_precision": float(np.mean(precisions)),
        "macro_recall": float(np.mean(recalls)),
        "macro_f1": float(np.mean(f1s)),
        "per_class_auc": {str(c): aucs[c] for c in aucs},
        "roc": {str(c): {"fpr": roc_points[c][0], "tpr": roc_points[c][1]} for c in roc_points},
        "absent_classes": missing,
    }
    if task is Task.PARTICIPANT_ID:
        support = [(int(np.sum(y == c)), -c) for c in range(k)]
        top = sorted(support, reverse=True)[:4]
        out["top4_classes_by_support"] = [-neg_c for _, neg_c in top]
    return out
