"""
Classification metrics shared by eval, holdout and the sweep reports.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Hashable, List, Optional, Sequence

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from app.core_model import BENIGN, Label
from app.errors import EmptyInput, LengthMismatch

logger = logging.getLogger(__name__)

NEGATIVE_CLASSES = {str(BENIGN), 0}


@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    labels: List[str]
    confusion: List[List[int]]
    per_class: List[ClassMetrics]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _normalise(values: Sequence[Any]) -> List[Hashable]:
    return [str(v) if isinstance(v, Label) else v for v in values]


def false_positive_rate(predictions: Sequence[Hashable], labels: Sequence[Hashable]) -> float:
    """FP / (FP + TN) with Benign (or code 0) as the negative class; 0 when no negatives."""
    negatives = [p for p, y in zip(predictions, labels) if y in NEGATIVE_CLASSES]
    if not negatives:
        return 0.0
    false_positives = sum(1 for p in negatives if p not in NEGATIVE_CLASSES)
    return false_positives / len(negatives)


def compute_metrics(predictions: Sequence[Any], labels: Sequence[Any],
                    classes: Optional[Sequence[Any]] = None) -> MetricsReport:
    """
    Accuracy, macro precision/recall/F1, FPR and the confusion matrix.

    Args:
        predictions: predicted labels (Label objects, label strings or codes)
        labels: ground truth, same length
        classes: class order of the confusion matrix; default is the sorted
            union of both sequences

    Raises:
        LengthMismatch: sequences differ in length
        EmptyInput: nothing to score
    """
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptyInput("No predictions to score")

    y_pred, y_true = _normalise(predictions), _normalise(labels)
    order = _normalise(classes) if classes is not None else sorted(set(y_true) | set(y_pred))

    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=order, average=None, zero_division=0
    )
    matrix = confusion_matrix(y_true, y_pred, labels=order)
    per_class = [
        ClassMetrics(str(c), float(p), float(r), float(f), int(s))
        for c, p, r, f, s in zip(order, precision, recall, f1, support)
    ]
    report = MetricsReport(
        accuracy=float(accuracy_score(y_true, y_pred)),
        precision=float(np.mean(precision)),
        recall=float(np.mean(recall)),
        f1=float(np.mean(f1)),
        fpr=false_positive_rate(y_pred, y_true),
        labels=[str(c) for c in order],
        confusion=matrix.astype(int).tolist(),
        per_class=per_class,
    )
    logger.debug(f"📊 accuracy={report.accuracy:.4f} f1={report.f1:.4f} fpr={report.fpr:.4f}")
    return report
