"""Classification metrics: loss, accuracy, confusion matrix, precision/recall."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError


def confusion_matrix(y_true, y_pred, num_classes):
    """Counts with rows = true class and columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    for name, y in (("label", y_true), ("prediction", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise DataError(f"{name} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def precision_recall(cm):
    """Per-class precision and recall; a class never predicted (or absent) scores 0."""
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    return precision, recall


def predict_labels(probs):
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(probs, axis=1)


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def n(self):
        return int(self.confusion.sum())

    @classmethod
    def from_predictions(cls, loss, y_true, y_pred, num_classes):
        cm = confusion_matrix(y_true, y_pred, num_classes)
        precision, recall = precision_recall(cm)
        total = cm.sum()
        return cls(float(loss), float(np.trace(cm) / total) if total else 0.0, cm, precision, recall)

    def to_dict(self):
        return {"loss": self.loss, "accuracy": self.accuracy, "n": self.n,
                "confusion": self.confusion.tolist(), "precision": self.precision.tolist(),
                "recall": self.recall.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["loss"], d["accuracy"], np.array(d["confusion"], dtype=np.int64),
                   np.array(d["precision"], dtype=np.float64), np.array(d["recall"], dtype=np.float64))


def evaluate(graph, dataset, batch_size=32):
    """Mean cross-entropy and classification metrics in inference mode."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    k = graph.output_shape[-1]
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"class id outside [0, {k}) in evaluation data")
    loss_sum = 0.0
    preds = []
    with T.no_grad():
        for start in range(0, n, batch_size):
            xb = dataset.images[start : start + batch_size]
            yb = labels[start : start + batch_size]
            logits = graph.forward(xb, training=False, logits=True)
            loss_sum += float(T.softmax_cross_entropy(logits, targets=yb).data) * len(yb)
            preds.append(predict_labels(logits.data))
    return EvalResult.from_predictions(loss_sum / n, labels, np.concatenate(preds), k)
