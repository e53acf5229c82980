"""
Loss and evaluation metrics
Multi-label binary cross-entropy, the weighted mean log loss used for model
selection and reporting, threshold metrics, rank-based ROC AUC and scan-level
aggregation, plus the evaluation report written by the evaluate command.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, ValidationError
from .scan_io import CLASS_NAMES, N_CLASSES
from .tensor_core import bce_with_logits

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

PROB_EPS = 1e-7  # clamp before logarithms
DEFAULT_THRESHOLD = 0.5
CLASS_ABBREVIATIONS = ("any", "EPH", "IPH", "IVH", "SAH", "SDH")


@dataclass(frozen=True)
class ClassWeights:
    values: tuple = (2.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if len(values) != N_CLASSES:
            raise ValidationError(f"class weights need {N_CLASSES} values, got {len(values)}")
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise ValidationError(f"class weights must be non-negative and not all zero, got {values}")

    def as_array(self):
        return np.asarray(self.values, dtype=np.float64)

    def __str__(self):
        return ",".join(f"{v:g}" for v in self.values)


DEFAULT_WEIGHTS = ClassWeights()


def _pair(preds, labels, op):
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ShapeError(op, preds.shape, labels.shape)
    return preds, labels


def _bce_terms(preds, labels):
    p = np.clip(preds, PROB_EPS, 1.0 - PROB_EPS)
    return -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))


# ============================================================================
# LOSSES
# ============================================================================

def multi_bce(labels, preds):
    """Sum over the 6 classes of binary cross-entropy; batched over leading axes"""
    preds, labels = _pair(preds, labels, "multi_bce")
    return _bce_terms(preds, labels).sum(axis=-1)


def weighted_mean_log_loss(preds, labels, weights=DEFAULT_WEIGHTS):
    """Per-class BCE weighted by w_t, normalized by N * sum(w)"""
    preds, labels = _pair(preds, labels, "weighted_mean_log_loss")
    if preds.ndim != 2 or preds.shape[1] != N_CLASSES:
        raise ShapeError("weighted_mean_log_loss", preds.shape, detail=f"expected (samples, {N_CLASSES})")
    if preds.shape[0] == 0:
        raise ValidationError("weighted_mean_log_loss: no samples")
    w = weights.as_array()
    return float((_bce_terms(preds, labels) * w).sum() / (preds.shape[0] * w.sum()))


def training_loss(logits, labels):
    """Mean over slices of the 6-class BCE sum, taken on pre-sigmoid logits"""
    return bce_with_logits(logits, labels)


# ============================================================================
# CLASSIFICATION METRICS
# ============================================================================

@dataclass(frozen=True)
class ThresholdMetrics:
    accuracy: float
    sensitivity: float = None
    specificity: float = None
    positives: int = 0
    negatives: int = 0


def threshold_metrics(preds, labels, threshold=DEFAULT_THRESHOLD, class_index=None):
    """
    Confusion-count metrics at a fixed threshold, positive iff p >= threshold.
    With a class_index, preds and labels are (N, 6) and that column is scored.
    Sensitivity (specificity) is None when there are no positive (negative) labels.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    preds, labels = _pair(preds, labels, "threshold_metrics")
    if class_index is not None:
        preds, labels = preds[:, class_index], labels[:, class_index]
    if preds.size == 0:
        raise ValidationError("threshold_metrics: no samples")
    predicted = preds >= threshold
    actual = labels > 0.5
    tp = int(np.sum(predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return ThresholdMetrics(
        accuracy=(tp + tn) / preds.size,
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        positives=tp + fn,
        negatives=tn + fp,
    )


def roc_auc(scores, labels):
    """Mann-Whitney estimate of P(score+ > score-) + 0.5 P(tie) using midranks"""
    scores, labels = _pair(scores, labels, "roc_auc")
    scores, labels = scores.ravel(), labels.ravel() > 0.5
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc is undefined with only one class present")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def scan_aggregate(slice_preds):
    """Scan probability per class = max over its slices"""
    slice_preds = np.asarray(slice_preds, dtype=np.float64)
    if slice_preds.ndim != 2 or slice_preds.shape[0] < 1:
        raise ShapeError("scan_aggregate", slice_preds.shape, detail="expected (slices >= 1, classes)")
    return slice_preds.max(axis=0)


# ============================================================================
# EVALUATION REPORT
# ============================================================================

@dataclass
class LevelReport:
    """Metrics for one aggregation level (slice or scan)"""

    level: str
    count: int
    log_loss: float
    per_class: dict = field(default_factory=dict)  # class name -> (ThresholdMetrics, auc or None)


@dataclass
class EvaluationReport:
    weights: ClassWeights
    threshold: float
    levels: list = field(default_factory=list)
    source: str = ""

    def level(self, name):
        for entry in self.levels:
            if entry.level == name:
                return entry
        raise KeyError(name)

    def to_kv(self):
        """key=value lines, stable order"""
        lines = [f"weights={self.weights}", f"threshold={self.threshold:g}"]
        if self.source:
            lines.append(f"source={self.source}")
        for entry in self.levels:
            lines.append(f"{entry.level}.count={entry.count}")
            lines.append(f"{entry.level}.weighted_log_loss={entry.log_loss:.6f}")
            for name in CLASS_NAMES:
                metrics, auc = entry.per_class[name]
                prefix = f"{entry.level}.{name}"
                lines.append(f"{prefix}.accuracy={metrics.accuracy:.6f}")
                lines.append(f"{prefix}.sensitivity={_fmt(metrics.sensitivity)}")
                lines.append(f"{prefix}.specificity={_fmt(metrics.specificity)}")
                lines.append(f"{prefix}.auc={_fmt(auc)}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        out = [f"Class weights: {self.weights}    Threshold: {self.threshold:g}"]
        if self.source:
            out.append(f"Predictions: {self.source}")
        for entry in self.levels:
            out.append("")
            out.append(f"{entry.level.capitalize()} level ({entry.count} {entry.level}s), "
                       f"weighted log loss {entry.log_loss:.6f}")
            out.append(f"{'class':<8}{'accuracy':>10}{'sensitivity':>13}{'specificity':>13}{'ROC AUC':>10}")
            for name, short in zip(CLASS_NAMES, CLASS_ABBREVIATIONS):
                metrics, auc = entry.per_class[name]
                out.append(
                    f"{short:<8}{metrics.accuracy:>10.4f}{_fmt(metrics.sensitivity, 4, '-'):>13}"
                    f"{_fmt(metrics.specificity, 4, '-'):>13}{_fmt(auc, 4, '-'):>10}"
                )
        return "\n".join(out) + "\n"


def _fmt(value, digits=6, missing="NA"):
    return missing if value is None else f"{value:.{digits}f}"


def _level_report(level, preds, labels, weights, threshold):
    per_class = {}
    for index, name in enumerate(CLASS_NAMES):
        metrics = threshold_metrics(preds, labels, threshold, class_index=index)
        auc = roc_auc(preds[:, index], labels[:, index]) if metrics.positives and metrics.negatives else None
        per_class[name] = (metrics, auc)
    return LevelReport(level, preds.shape[0], weighted_mean_log_loss(preds, labels, weights), per_class)


def build_report(scan_preds, scan_labels, weights=DEFAULT_WEIGHTS, threshold=DEFAULT_THRESHOLD, source=""):
    """
    scan_preds / scan_labels: {scan_id: (slices, 6) array}, same keys.
    Produces a slice-level block and a max-aggregated scan-level block.
    """
    missing = sorted(set(scan_preds) ^ set(scan_labels))
    if missing:
        raise ValidationError(f"predictions and labels cover different scans: {', '.join(missing[:5])}")
    if not scan_preds:
        raise ValidationError("nothing to evaluate: no scans")
    ids = sorted(scan_preds)
    for scan_id in ids:
        if np.shape(scan_preds[scan_id]) != np.shape(scan_labels[scan_id]):
            raise ValidationError(
                f"scan {scan_id}: {len(scan_preds[scan_id])} predicted slices, {len(scan_labels[scan_id])} labeled"
            )
    slice_preds = np.concatenate([scan_preds[i] for i in ids])
    slice_labels = np.concatenate([scan_labels[i] for i in ids])
    scan_level_preds = np.stack([scan_aggregate(scan_preds[i]) for i in ids])
    scan_level_labels = np.stack([scan_aggregate(scan_labels[i]) for i in ids])

    report = EvaluationReport(weights=weights, threshold=threshold, source=source)
    report.levels.append(_level_report("slice", slice_preds, slice_labels, weights, threshold))
    report.levels.append(_level_report("scan", scan_level_preds, scan_level_labels, weights, threshold))
    for entry in report.levels:
        undefined = [name for name, (_, auc) in entry.per_class.items() if auc is None]
        if undefined:
            logger.warning(f"{entry.level} level: ROC AUC undefined (single class present) for {', '.join(undefined)}")
    return report
