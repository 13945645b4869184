"""Evaluation protocol: overall and per-class accuracy, count-binned
subgroup accuracy, the majority/minority trade-off pair, and embedding
export.

Classes are binned by their training-set sample count: head (> head
threshold), many, medium, and few (<= medium threshold). The reported
average is overall micro accuracy over the whole test set, not the mean of
the bin accuracies. Bins without test samples report None.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .datagen import load_split

HEAD, MANY, MEDIUM, FEW = 0, 1, 2, 3
BIN_NAMES = ("head", "many", "medium", "few")


@dataclass(frozen=True)
class SubgroupSpec:
    """Strictly decreasing count thresholds separating the four bins.

    head: classes with train count > ``head``
    many: in (``many``, ``head``]
    medium: in (``medium``, ``many``]
    few: <= ``medium``
    """

    head: float = 10_000
    many: float = 1_000
    medium: float = 100

    def __post_init__(self):
        if not (self.head > self.many > self.medium > 0):
            raise ValueError(
                f"thresholds must be strictly decreasing and positive, got "
                f"{self.head} / {self.many} / {self.medium}"
            )

    def bin_of(self, train_count: int) -> int:
        if train_count > self.head:
            return HEAD
        if train_count > self.many:
            return MANY
        if train_count > self.medium:
            return MEDIUM
        return FEW


# Open-dataset protocol: no head bin, many > 100, medium 20..100, few < 20.
IMAGENET_STYLE = SubgroupSpec(head=math.inf, many=100, medium=19)


def _check_pred_labels(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError(
            f"predictions {predictions.shape} and labels {labels.shape} must be equal 1-D vectors"
        )
    if labels.size == 0:
        raise ValueError("empty label vector")
    return predictions, labels


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """C x C count matrix, rows true class, columns predicted class."""
    predictions, labels = _check_pred_labels(predictions, labels)
    if labels.max() >= num_classes or predictions.max() >= num_classes:
        raise ValueError("class id exceeds num_classes")
    flat = labels * num_classes + predictions
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_accuracy(predictions, labels, num_classes: int) -> list[Optional[float]]:
    """Accuracy per true class; classes absent from the test set give None."""
    cm = confusion_matrix(predictions, labels, num_classes)
    totals = cm.sum(axis=1)
    return [
        float(cm[j, j] / totals[j]) if totals[j] > 0 else None
        for j in range(num_classes)
    ]


def class_bins(train_counts, spec: SubgroupSpec) -> np.ndarray:
    """Bin id per class from the training-set counts."""
    train_counts = np.asarray(train_counts)
    return np.array([spec.bin_of(int(n)) for n in train_counts], dtype=np.int64)


@dataclass
class SubgroupAccuracy:
    head: Optional[float]
    many: Optional[float]
    medium: Optional[float]
    few: Optional[float]
    average: float                 # overall micro accuracy
    sample_counts: dict[str, int]  # test samples per bin

    def as_tuple(self) -> tuple:
        return (self.head, self.many, self.medium, self.few, self.average)


def subgroup_accuracy(predictions, labels, train_counts, spec: SubgroupSpec = SubgroupSpec()) -> SubgroupAccuracy:
    """Accuracy within each count bin plus the overall micro average.

    Every test label's class must have a training count entry; bins with no
    test samples report None.
    """
    predictions, labels = _check_pred_labels(predictions, labels)
    train_counts = np.asarray(train_counts)
    if labels.max() >= len(train_counts):
        raise ValueError("test label without a training count")
    bins = class_bins(train_counts, spec)
    sample_bins = bins[labels]
    correct = predictions == labels
    accs: list[Optional[float]] = []
    counts: dict[str, int] = {}
    for b, name in enumerate(BIN_NAMES):
        mask = sample_bins == b
        counts[name] = int(mask.sum())
        accs.append(float(correct[mask].mean()) if counts[name] > 0 else None)
    average = float(correct.mean())
    return SubgroupAccuracy(accs[0], accs[1], accs[2], accs[3], average, counts)


def majority_minority(predictions, labels, train_counts,
                      spec: SubgroupSpec = SubgroupSpec()) -> tuple[Optional[float], Optional[float]]:
    """(majority, minority) accuracy: head+many pooled vs medium+few pooled.

    A side with no test samples reports None.
    """
    predictions, labels = _check_pred_labels(predictions, labels)
    train_counts = np.asarray(train_counts)
    if labels.max() >= len(train_counts):
        raise ValueError("test label without a training count")
    bins = class_bins(train_counts, spec)
    sample_bins = bins[labels]
    correct = predictions == labels
    major_mask = (sample_bins == HEAD) | (sample_bins == MANY)
    minor_mask = ~major_mask
    major = float(correct[major_mask].mean()) if major_mask.any() else None
    minor = float(correct[minor_mask].mean()) if minor_mask.any() else None
    return major, minor


@dataclass
class EvalReport:
    overall_top1: float
    per_class: list[Optional[float]]
    subgroups: SubgroupAccuracy
    majority: Optional[float]
    minority: Optional[float]
    confusion: np.ndarray
    num_test_samples: int

    def to_dict(self) -> dict:
        return {
            "overall_top1": self.overall_top1,
            "per_class": self.per_class,
            "subgroups": {
                "head": self.subgroups.head,
                "many": self.subgroups.many,
                "medium": self.subgroups.medium,
                "few": self.subgroups.few,
                "average": self.subgroups.average,
                "sample_counts": self.subgroups.sample_counts,
            },
            "majority": self.majority,
            "minority": self.minority,
            "num_test_samples": self.num_test_samples,
        }

    def save(self, out_dir) -> Path:
        """Write report.json and confusion.csv under ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / "confusion.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.confusion:
                writer.writerow(row.tolist())
        return out_dir


def build_report(predictions, labels, train_counts, num_classes: int,
                 spec: SubgroupSpec = SubgroupSpec()) -> EvalReport:
    predictions, labels = _check_pred_labels(predictions, labels)
    cm = confusion_matrix(predictions, labels, num_classes)
    sub = subgroup_accuracy(predictions, labels, train_counts, spec)
    major, minor = majority_minority(predictions, labels, train_counts, spec)
    return EvalReport(
        overall_top1=float(np.trace(cm) / cm.sum()),
        per_class=per_class_accuracy(predictions, labels, num_classes),
        subgroups=sub,
        majority=major,
        minority=minor,
        confusion=cm,
        num_test_samples=int(labels.size),
    )


# ---------------------------------------------------------------------------
# model-facing helpers
# ---------------------------------------------------------------------------

def predict_dataset(model, images: np.ndarray, batch_size: int = 256):
    """Run consensus prediction over an image array (N, S, S) uint8.

    Returns (predictions (N,), consensus probabilities (N, C)).
    """
    model.eval()
    preds, probs = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _to_input(images[start:start + batch_size])
            p, c = model.predict(x)
            preds.append(p.numpy())
            probs.append(c.numpy())
    return np.concatenate(preds), np.concatenate(probs)


def _to_input(images: np.ndarray):
    x = torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0)
    return x.sub_(0.5).div_(0.5).unsqueeze(1)


def evaluate_model(model, manifest, manifest_dir,
                   spec: SubgroupSpec = SubgroupSpec(), batch_size: int = 256) -> EvalReport:
    """Evaluate on the manifest's test split, binning by its train counts."""
    images, labels, _, _ = load_split(manifest, manifest_dir, "test")
    train_counts = manifest.class_counts("train")
    if int(train_counts.min()) < 1:
        raise ValueError("every class needs at least one training sample")
    predictions, _ = predict_dataset(model, images, batch_size)
    return build_report(predictions, labels, train_counts, model.num_classes, spec)


def export_embeddings(model, manifest, manifest_dir, out_path,
                      batch_size: int = 256) -> Path:
    """Write per-branch embeddings of every test sample as CSV.

    Columns: path, class_id, product_line_id, branch_id, e_0..e_{D-1};
    one row per (sample, branch).
    """
    images, labels, lines, paths = load_split(manifest, manifest_dir, "test")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    model.eval()
    dim = model.embed_dim
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "class_id", "product_line_id", "branch_id"]
                        + [f"e_{i}" for i in range(dim)])
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = _to_input(images[start:start + batch_size])
                outputs = model(x)
                for branch_id, (emb, _) in enumerate(outputs):
                    emb = emb.numpy()
                    for row_idx in range(emb.shape[0]):
                        i = start + row_idx
                        writer.writerow(
                            [paths[i], int(labels[i]), int(lines[i]), branch_id]
                            + [f"{v:.8g}" for v in emb[row_idx]]
                        )
    return out_path
