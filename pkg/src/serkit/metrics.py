"""Evaluation artifacts: confusion matrix, per-class precision/recall/F1,
macro averages, accuracy, and their JSON/CSV serializations.

Conventions: confusion rows are true classes, columns are predictions;
zero-denominator precision/recall/F1 are reported as 0 (not NaN) so macro
averages stay defined on tiny splits; argmax prediction ties resolve to the
lowest class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyMatrix, EmptySplit, LabelOutOfRange, LengthMismatch
from .model import LABELS, ArchConfig, forward


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    n_samples: int
    labels: tuple[str, ...]
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray


@dataclass(frozen=True)
class PredictionRow:
    path: str
    true_label: int
    pred_label: int
    probs: np.ndarray


def confusion(true_labels, predicted_labels, n_classes: int | None = None) -> np.ndarray:
    """counts[i, j] = number of items with true class i predicted as j."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.ndim != 1 or p.ndim != 1 or t.shape != p.shape:
        raise LengthMismatch(f"label sequences disagree: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise LengthMismatch("cannot build a confusion matrix from zero items")
    if n_classes is None:
        n_classes = int(max(t.max(), p.max())) + 1
    if t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _class_names(n: int) -> tuple[str, ...]:
    if n == len(LABELS):
        return LABELS
    return tuple(f"class_{i}" for i in range(n))


def report(cm: np.ndarray, labels: tuple[str, ...] | None = None) -> MetricsReport:
    """Derive all scalar metrics from a confusion matrix."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise EmptyMatrix(f"confusion matrix must be square, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has zero total count")
    if (cm < 0).any():
        raise EmptyMatrix("confusion matrix has negative entries")
    n = cm.shape[0]
    if labels is None:
        labels = _class_names(n)

    per_class = []
    for c in range(n):
        tp = int(cm[c, c])
        col = int(cm[:, c].sum())   # tp + fp
        row = int(cm[c, :].sum())   # tp + fn
        precision = tp / col if col else 0.0
        recall = tp / row if row else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append(ClassMetrics(precision, recall, f1))

    accuracy = int(np.trace(cm)) / total
    return MetricsReport(
        accuracy=accuracy,
        n_samples=total,
        labels=tuple(labels),
        per_class=tuple(per_class),
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        confusion=cm,
    )


def predict_batches(params, config: ArchConfig, features: np.ndarray,
                    batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities for a feature tensor, N x n_classes."""
    out = []
    with ad.no_grad():
        for start in range(0, features.shape[0], batch_size):
            logits = forward(features[start:start + batch_size], params, config,
                             training=False)
            out.append(ad.softmax(logits, axis=-1).values)
    return np.concatenate(out, axis=0)


def evaluate(params, dataset, split: str | None, config: ArchConfig,
             batch_size: int = 32) -> tuple[MetricsReport, list[PredictionRow]]:
    """Run the model over one split (or the whole dataset when split is None)
    and return the metrics report plus per-utterance predictions."""
    if split:
        idx = dataset.indices(split)
        if idx.size == 0:
            raise EmptySplit(f"split {split!r} has no utterances")
    else:
        idx = np.arange(len(dataset), dtype=np.int64)
        if idx.size == 0:
            raise EmptySplit("dataset is empty")
    probs = predict_batches(params, config, dataset.features[idx], batch_size)
    preds = probs.argmax(axis=1)  # ties resolve to the lowest index
    truth = dataset.labels[idx]
    rep = report(confusion(truth, preds, n_classes=config.n_classes))
    rows = [PredictionRow(dataset.paths[i], int(t), int(p), pr)
            for i, t, p, pr in zip(idx, truth, preds, probs)]
    return rep, rows


# --- serialization ------------------------------------------------------------

def report_to_dict(rep: MetricsReport) -> dict:
    """JSON layout: display fields rounded to 4 decimals, full-precision
    copies under the ``raw`` key, confusion as an integer matrix."""

    def rounded(per_class: bool):
        if per_class:
            return {name: {"precision": round(m.precision, 4),
                           "recall": round(m.recall, 4),
                           "f1": round(m.f1, 4)}
                    for name, m in zip(rep.labels, rep.per_class)}
        return {"precision": round(rep.macro_precision, 4),
                "recall": round(rep.macro_recall, 4),
                "f1": round(rep.macro_f1, 4)}

    return {
        "accuracy": round(rep.accuracy, 4),
        "n_samples": rep.n_samples,
        "per_class": rounded(per_class=True),
        "macro": rounded(per_class=False),
        "confusion": rep.confusion.tolist(),
        "raw": {
            "accuracy": rep.accuracy,
            "per_class": {name: {"precision": m.precision, "recall": m.recall,
                                 "f1": m.f1}
                          for name, m in zip(rep.labels, rep.per_class)},
            "macro": {"precision": rep.macro_precision,
                      "recall": rep.macro_recall,
                      "f1": rep.macro_f1},
        },
    }


def write_report_json(rep: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(rep), fh, indent=2)
        fh.write("\n")


def write_confusion_csv(cm: np.ndarray, path, labels: tuple[str, ...] | None = None) -> None:
    """Rows are true classes; first column names the true class."""
    cm = np.asarray(cm)
    if labels is None:
        labels = _class_names(cm.shape[0])
    with open(path, "w", newline="") as fh:
        fh.write("true\\pred," + ",".join(labels) + "\n")
        for name, row in zip(labels, cm):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")


def write_predictions_csv(rows: list[PredictionRow], path,
                          labels: tuple[str, ...] = LABELS) -> None:
    header = "path,true,pred," + ",".join(f"p_{name}" for name in labels)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for r in rows:
            probs = ",".join(repr(float(p)) for p in r.probs)
            fh.write(f"{r.path},{labels[r.true_label]},{labels[r.pred_label]},{probs}\n")


def read_report_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
