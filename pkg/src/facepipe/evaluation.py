"""Per-label accuracy reports and the validation/test accuracy table."""

import math
from dataclasses import dataclass

import numpy as np

from .dataset import load_images, to_tensor_batch
from .training import label_indices, predict_labels

TABLE_HEADER = ("Label", "Accuracy (on validation data)", "Accuracy (on test data)")


@dataclass
class AccuracyReport:
    split: str
    labels: list  # model vocabulary, confusion matrix order
    confusion: np.ndarray  # rows: true label, columns: predicted label

    @property
    def totals(self):
        return self.confusion.sum(axis=1)

    @property
    def overall(self):
        total = int(self.confusion.sum())
        return float(np.trace(self.confusion)) / total if total else math.nan

    def per_label(self):
        """{label: accuracy} for labels that occur in the split."""
        out = {}
        for i, label in enumerate(self.labels):
            n = int(self.confusion[i].sum())
            if n:
                out[label] = int(self.confusion[i, i]) / n
        return out

    def to_dict(self):
        return {
            "split": self.split,
            "overall": self.overall,
            "per_label": self.per_label(),
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
        }


def report_from_predictions(labels, y_true, y_pred, split="test"):
    k = len(labels)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return AccuracyReport(split, list(labels), conf)


def evaluate(graph, manifest, split):
    images, names = load_images(manifest, split)
    if not images:
        raise ValueError(f"split {split!r} is empty")
    y = label_indices(graph, names)
    x = to_tensor_batch(images, graph.input_shape, graph.input_mean)
    return report_from_predictions(graph.labels, y, predict_labels(graph, x), split)


def _pct(v):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v * 100:.2f}%"


def format_accuracy_table(rows, overall):
    """Tab-separated table of ``(label, validation_acc, test_acc)`` rows
    followed by the combined accuracy line. Accuracies are fractions."""
    lines = ["\t".join(TABLE_HEADER)]
    lines += [f"{label}\t{_pct(val)}\t{_pct(test)}" for label, val, test in rows]
    lines.append(f"Total accuracy with all the labels combined\t{_pct(overall)}")
    return "\n".join(lines) + "\n"


def accuracy_table(validation=None, test=None):
    """Render reports for the validation and/or test split as one table.

    The combined line reports the test split when present.
    """
    ref = test or validation
    if ref is None:
        raise ValueError("need at least one report")
    val_acc = validation.per_label() if validation else {}
    test_acc = test.per_label() if test else {}
    rows = [(label, val_acc.get(label), test_acc.get(label))
            for label in ref.labels if label in val_acc or label in test_acc]
    return format_accuracy_table(rows, ref.overall)
