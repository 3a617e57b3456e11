import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml

from backend.app.ml.model import predict_labels
from backend.app.ml.pseudo_label import IGNORE, LabelMask
from backend.app.utils.error_handlers import InvalidInputError


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """
    Pixel counts indexed (ground truth, prediction).

    Column C is reserved for IGNORE predictions under valid ground truth,
    which count as misses for the ground-truth class.
    """
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[1] != counts.shape[0] + 1:
            raise InvalidInputError(f"confusion counts must be C x (C+1), got {counts.shape}")
        if counts.size and counts.min() < 0:
            raise InvalidInputError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, classes):
        return cls(np.zeros((classes, classes + 1), dtype=np.int64))

    @property
    def classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        if self.counts.shape != other.counts.shape:
            raise InvalidInputError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None


def accumulate(cm, pred, gt):
    """
    Add one image's pixels to a confusion matrix

    Args:
        cm (ConfusionMatrix): running counts
        pred (LabelMask): predicted classes (IGNORE goes to the reserved column)
        gt (LabelMask): ground truth; IGNORE pixels are skipped

    Returns:
        ConfusionMatrix: a new matrix with the image's counts added
    """
    pred_values = pred.values if isinstance(pred, LabelMask) else np.asarray(pred)
    gt_values = gt.values if isinstance(gt, LabelMask) else np.asarray(gt)
    if pred_values.shape != gt_values.shape:
        raise InvalidInputError(f"shape mismatch: pred {pred_values.shape} vs gt {gt_values.shape}")
    classes = cm.classes
    gt_flat = gt_values.reshape(-1).astype(np.int64)
    pred_flat = pred_values.reshape(-1).astype(np.int64)
    valid = gt_flat != IGNORE
    gt_flat, pred_flat = gt_flat[valid], pred_flat[valid]
    if gt_flat.size == 0:
        return cm
    if gt_flat.max() >= classes:
        raise InvalidInputError(f"ground-truth class {int(gt_flat.max())} out of range")
    pred_flat = np.where(pred_flat == IGNORE, classes, pred_flat)
    if pred_flat.max() > classes:
        raise InvalidInputError(f"predicted class {int(pred_flat.max())} out of range")
    index = gt_flat * (classes + 1) + pred_flat
    counts = np.bincount(index, minlength=classes * (classes + 1)).reshape(classes, classes + 1)
    return ConfusionMatrix(cm.counts + counts)


def per_class_iou(cm):
    """IoU per class with NaN where TP + FP + FN = 0."""
    counts = cm.counts
    square = counts[:, :-1]
    tp = np.diag(square).astype(np.float64)
    fn = counts.sum(axis=1) - tp
    fp = square.sum(axis=0) - tp
    denominator = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denominator > 0, tp / np.where(denominator > 0, denominator, 1), np.nan)


def miou(cm, subset=None):
    """
    Per-class IoU and their mean over `subset` (all classes by default)

    Returns:
        tuple: (list of IoU or None for undefined classes, mean IoU)
    """
    ious = per_class_iou(cm)
    if subset is None:
        subset = range(cm.classes)
    subset = [int(c) for c in subset]
    for c in subset:
        if not 0 <= c < cm.classes:
            raise InvalidInputError(f"class {c} not in [0, {cm.classes})")
    defined = [ious[c] for c in subset if not np.isnan(ious[c])]
    if not defined:
        raise InvalidInputError("no class in the subset has a defined IoU")
    per_class = [None if np.isnan(v) else float(v) for v in ious]
    return per_class, float(np.mean(defined))


def pixel_accuracy(cm):
    total = cm.total
    return float(np.trace(cm.counts[:, :-1]) / total) if total else float("nan")


def confusion_for_pairs(pairs, classes, threads=1):
    """Sum per-image confusion matrices; per-image work may run in parallel."""
    empty = ConfusionMatrix.empty(classes)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda pair: accumulate(empty, *pair), pairs))
    else:
        parts = [accumulate(empty, pred, gt) for pred, gt in pairs]
    result = empty
    for part in parts:
        result = result + part
    return result


def evaluation_report(cm, class_names=None, subset=None):
    """Structured report: per-class IoU, mean over subset, pixel accuracy."""
    per_class, mean = miou(cm, subset)
    names = class_names or [f"class_{i}" for i in range(cm.classes)]
    chosen = list(range(cm.classes)) if subset is None else [int(c) for c in subset]
    return {
        "classes": [
            {"index": c, "name": names[c], "iou": per_class[c]}
            for c in chosen
        ],
        "miou": mean,
        "pixel_accuracy": pixel_accuracy(cm),
        "evaluated_pixels": cm.total,
    }


def format_report(report):
    """Plain-text table with 4-decimal IoUs."""
    width = max([len(row["name"]) for row in report["classes"]] + [5])
    lines = [f"{'class':<{width}}  IoU"]
    for row in report["classes"]:
        value = "undefined" if row["iou"] is None else f"{row['iou']:.4f}"
        lines.append(f"{row['name']:<{width}}  {value}")
    lines.append(f"{'mIoU':<{width}}  {report['miou']:.4f}")
    lines.append(f"{'pixAcc':<{width}}  {report['pixel_accuracy']:.4f}")
    return "\n".join(lines)


def dump_report(report, fmt="yaml"):
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True)
    return yaml.safe_dump(report, sort_keys=False)


def evaluate_model(params, samples, threads=1):
    """
    Confusion matrix of a model's argmax predictions

    Args:
        params (ModelParams): model to evaluate
        samples (list): (FeatureMap, LabelMask) pairs with ground truth
        threads (int): worker threads for prediction

    Returns:
        ConfusionMatrix: counts over every valid ground-truth pixel
    """
    samples = list(samples)

    def predict_pair(sample):
        features, truth = sample
        return predict_labels(params, features), truth

    if threads and threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(predict_pair, samples))
    else:
        pairs = [predict_pair(sample) for sample in samples]
    return confusion_for_pairs(pairs, params.classes)
