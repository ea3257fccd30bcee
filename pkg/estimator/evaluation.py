"""
Metric suite: exact and 1-off accuracy, the row-normalized confusion matrix
and a per-class classification report, plus the plain-text and TSV renderings
written by the evaluate command.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sklearn.metrics as metrics

from .exceptions import EmptyDatasetError, NumericError
from .network import AGE_LABELS, NUM_AGE_CLASSES, AgeClass

logger = logging.getLogger(__name__)

CLASS_INDICES = list(range(NUM_AGE_CLASSES))


def _label_arrays(preds, truths) -> Tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} labels")
    if len(preds) == 0:
        raise EmptyDatasetError("Cannot evaluate an empty label set")
    for name, values in (("prediction", preds), ("label", truths)):
        if values.min() < 0 or values.max() >= NUM_AGE_CLASSES:
            raise ValueError(f"{name} outside 0..{NUM_AGE_CLASSES - 1}")
    return preds, truths


def exact_accuracy(preds, truths) -> float:
    preds, truths = _label_arrays(preds, truths)
    return float(metrics.accuracy_score(truths, preds))


def one_off_accuracy(preds, truths) -> float:
    """Fraction predicted within one class of the truth in age order."""
    preds, truths = _label_arrays(preds, truths)
    return float(np.mean(np.abs(preds - truths) <= 1))


def normalize(counts) -> np.ndarray:
    """Row-stochastic copy; rows without samples stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[true][predicted]."""
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def normalized(self) -> np.ndarray:
        return normalize(self.counts)

    def trace_accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total


def confusion(preds, truths) -> ConfusionMatrix:
    preds, truths = _label_arrays(preds, truths)
    return ConfusionMatrix(metrics.confusion_matrix(truths, preds, labels=CLASS_INDICES).astype(np.int64))


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(np.sum(self.support))

    @property
    def macro(self) -> Tuple[float, float, float]:
        return float(np.mean(self.precision)), float(np.mean(self.recall)), float(np.mean(self.f1))

    @property
    def weighted(self) -> Tuple[float, float, float]:
        weights = np.asarray(self.support, dtype=np.float64)
        if weights.sum() == 0:
            return 0.0, 0.0, 0.0
        return tuple(float(np.average(values, weights=weights)) for values in (self.precision, self.recall, self.f1))

    @classmethod
    def from_per_class(cls, precision, recall, f1, support, accuracy=None) -> "ClassReport":
        """Build a report from already-computed per-class columns."""
        return cls(
            np.asarray(precision, dtype=np.float64),
            np.asarray(recall, dtype=np.float64),
            np.asarray(f1, dtype=np.float64),
            np.asarray(support, dtype=np.int64),
            accuracy,
        )


def classification_report(preds, truths) -> ClassReport:
    """
    Per-class precision, recall, f1 and support with macro and weighted averages.

    A rate whose denominator is zero is reported as 0 and flagged in
    `warnings`. Raises NumericError if weighted recall and accuracy disagree.
    """
    preds, truths = _label_arrays(preds, truths)
    precision, recall, f1, support = metrics.precision_recall_fscore_support(
        truths, preds, labels=CLASS_INDICES, zero_division=0
    )
    report = ClassReport.from_per_class(precision, recall, f1, support, exact_accuracy(preds, truths))

    predicted_counts = np.bincount(preds, minlength=NUM_AGE_CLASSES)
    for cls in AgeClass:
        if predicted_counts[cls] == 0:
            report.warnings.append(f"precision of {cls.label} undefined (never predicted); reported as 0")
        if support[cls] == 0:
            report.warnings.append(f"recall of {cls.label} undefined (no samples); reported as 0")
    for message in report.warnings:
        logger.warning(message)

    weighted_recall = report.weighted[1]
    if not math.isclose(weighted_recall, report.accuracy, rel_tol=1e-9, abs_tol=1e-12):
        raise NumericError(f"Weighted recall {weighted_recall} differs from accuracy {report.accuracy}")
    return report


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """Percentage of each class predicted exactly (zero for empty classes)."""
    return 100.0 * np.diag(cm.normalized())


@dataclass(frozen=True)
class Misclassification:
    path: str
    truth: AgeClass
    predicted: AgeClass
    confidence: float


def most_confident_errors(rows: Sequence[Tuple[str, int, int, float]], limit: int = 10) -> List[Misclassification]:
    """Wrong predictions, highest confidence first (path breaks ties)."""
    errors = [
        Misclassification(path, AgeClass(truth), AgeClass(pred), float(conf))
        for path, truth, pred, conf in rows if truth != pred
    ]
    errors.sort(key=lambda e: (-e.confidence, e.path))
    return errors[:limit]


@dataclass
class EvaluationReport:
    exact: float
    one_off: float
    confusion: ConfusionMatrix
    classes: ClassReport
    misclassified: List[Misclassification] = field(default_factory=list)
    distribution: Optional[Dict[AgeClass, Dict[str, int]]] = None


def evaluate(rows: Sequence[Tuple[str, int, int, float]], distribution=None, limit: int = 10) -> EvaluationReport:
    """
    Full metric suite.

    Args:
        rows: (path, true index, predicted index, confidence) per sample
        distribution: Optional per-class split counts from the manifest
        limit: How many confident misclassifications to list
    """
    if not rows:
        raise EmptyDatasetError("No predictions to evaluate")
    truths = [r[1] for r in rows]
    preds = [r[2] for r in rows]
    cm = confusion(preds, truths)
    report = EvaluationReport(
        exact=exact_accuracy(preds, truths),
        one_off=one_off_accuracy(preds, truths),
        confusion=cm,
        classes=classification_report(preds, truths),
        misclassified=most_confident_errors(rows, limit),
        distribution=distribution,
    )
    logger.info(f"Exact accuracy {report.exact:.4f}, 1-off accuracy {report.one_off:.4f} on {cm.total} samples")
    return report


def render_distribution(distribution: Dict[AgeClass, Dict[str, int]]) -> str:
    lines = [f"{'Age range':<10}{'Total':>8}{'Train':>8}{'Val':>8}"]
    totals = [0, 0, 0]
    for cls in AgeClass:
        row = distribution.get(cls, {"total": 0, "train": 0, "val": 0})
        values = (row["total"], row["train"], row["val"])
        totals = [a + b for a, b in zip(totals, values)]
        lines.append(f"{cls.label:<10}{values[0]:>8}{values[1]:>8}{values[2]:>8}")
    lines.append(f"{'Total':<10}{totals[0]:>8}{totals[1]:>8}{totals[2]:>8}")
    return "\n".join(lines) + "\n"


def render_report(report: EvaluationReport) -> str:
    """Aligned plain text; rates rounded to two decimals."""
    out = [
        f"Exact accuracy: {100 * report.exact:.2f}%",
        f"1-off accuracy: {100 * report.one_off:.2f}%",
        "",
        "Normalized confusion matrix (rows: true, columns: predicted)",
        "      " + "".join(f"{cls.letter:>6}" for cls in AgeClass),
    ]
    for cls, row in zip(AgeClass, report.confusion.normalized()):
        out.append(f"  {cls.letter}   " + "".join(f"{v:>6.2f}" for v in row))
    out.append("  " + ", ".join(f"{cls.letter} = {cls.label}" for cls in AgeClass))
    out.append("")

    c = report.classes
    out.append(f"{'':<14}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}")
    for i, label in enumerate(AGE_LABELS):
        out.append(f"{label:<14}{c.precision[i]:>10.2f}{c.recall[i]:>10.2f}{c.f1[i]:>10.2f}{int(c.support[i]):>10}")
    out.append(f"{'accuracy':<14}{'':>10}{'':>10}{c.accuracy:>10.2f}{c.total:>10}")
    for name, (p, r, f) in (("macro avg", c.macro), ("weighted avg", c.weighted)):
        out.append(f"{name:<14}{p:>10.2f}{r:>10.2f}{f:>10.2f}{c.total:>10}")
    out.append("")

    out.append("Per-class exact accuracy")
    for cls, acc in zip(AgeClass, per_class_accuracy(report.confusion)):
        out.append(f"  {cls.label:<8}{acc:>8.2f}%")

    if report.distribution is not None:
        out += ["", "Class distribution", render_distribution(report.distribution).rstrip("\n")]

    if report.misclassified:
        out += ["", "Most confident misclassifications"]
        for e in report.misclassified:
            out.append(f"  {e.path}  true {e.truth.label}  predicted {e.predicted.label}  ({e.confidence:.4f})")

    if c.warnings:
        out += ["", "Warnings"] + [f"  {w}" for w in c.warnings]
    return "\n".join(out) + "\n"


def render_tsv(report: EvaluationReport) -> str:
    """Machine-readable metrics at full precision, one `key<TAB>value...` row each."""
    c = report.classes
    rows = [
        ("exact_accuracy", repr(report.exact)),
        ("one_off_accuracy", repr(report.one_off)),
    ]
    for i, label in enumerate(AGE_LABELS):
        rows.append((f"class\t{label}", "\t".join(repr(float(v)) for v in (c.precision[i], c.recall[i], c.f1[i]))
                     + f"\t{int(c.support[i])}"))
    for name, values in (("macro", c.macro), ("weighted", c.weighted)):
        rows.append((name, "\t".join(repr(v) for v in values)))
    for i, row in enumerate(report.confusion.counts):
        rows.append((f"confusion\t{AGE_LABELS[i]}", "\t".join(str(int(v)) for v in row)))
    return "".join(f"{key}\t{value}\n" for key, value in rows)
