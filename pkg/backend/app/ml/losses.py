"""Supervised, unsupervised and contrastive losses and their weighted sum."""
from dataclasses import dataclass, field

import numpy as np

from backend.app.ml.numerics import PROB_FLOOR, ProbMap
from backend.app.ml.pseudo_label import IGNORE, LabelMask
from backend.app.utils.error_handlers import InvalidInputError

UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_u: float = 1.0
    lambda_c: float = 0.1
    omega: float = 0.1

    def __post_init__(self):
        for name in ("lambda_u", "lambda_c", "omega"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.lambda_u < 0 or self.lambda_c < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.omega <= 0:
            raise InvalidInputError(f"omega must be positive, got {self.omega}")

    def to_dict(self):
        return {"lambda_u": self.lambda_u, "lambda_c": self.lambda_c, "omega": self.omega}


@dataclass(frozen=True, eq=False)
class ContrastBatch:
    """
    Anchors with one positive and N negatives each.

    Rows are grouped by class; `anchor_classes[i]` is the class of anchor i.
    `anchor_pixels` / `negative_pixels` index the flattened pixel set the batch
    was sampled from, so gradients can be routed back through the projection.
    """
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_classes: np.ndarray
    classes: int
    anchors_per_class: int
    negatives_per_anchor: int
    anchor_pixels: np.ndarray = field(default=None)
    negative_pixels: np.ndarray = field(default=None)

    def __post_init__(self):
        count = len(self.anchors)
        if len(self.positives) != count or len(self.negatives) != count:
            raise InvalidInputError("every anchor needs exactly one positive and one negative set")
        if count and self.negatives.shape[1] != self.negatives_per_anchor:
            raise InvalidInputError("every anchor needs exactly N negatives")
        for name in ("anchors", "positives", "negatives"):
            block = getattr(self, name)
            if block.size and np.max(np.abs(np.linalg.norm(block, axis=-1) - 1.0)) > UNIT_TOLERANCE:
                raise InvalidInputError(f"{name} must be unit-norm")

    def __len__(self):
        return len(self.anchors)

    @property
    def is_empty(self):
        return len(self.anchors) == 0

    def per_class(self):
        """Map class index -> number of anchors sampled for it."""
        values, counts = np.unique(self.anchor_classes, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def _check_shapes(probs, labels):
    if probs.shape[:-1] != labels.shape:
        raise InvalidInputError(
            f"shape mismatch: probabilities {probs.shape[:-1]} vs labels {labels.shape}"
        )


def ce_terms(probs, labels):
    """Return (sum of -ln p(y) over valid pixels, valid pixel count)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    _check_shapes(probs, labels)
    flat_p = probs.reshape(-1, probs.shape[-1])
    flat_y = labels.reshape(-1)
    valid = flat_y != IGNORE
    if not np.any(valid):
        return 0.0, 0
    picked = flat_p[np.flatnonzero(valid), flat_y[valid].astype(np.intp)]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).sum()), int(valid.sum())


def ce_loss(p, y):
    """Mean -ln p(pixel, y) over non-IGNORE pixels; 0 when nothing is labeled."""
    probs = p.values if isinstance(p, ProbMap) else np.asarray(p, dtype=np.float64)
    labels = y.values if isinstance(y, LabelMask) else np.asarray(y)
    _check_shapes(probs, labels)
    valid_labels = labels[labels != IGNORE]
    if valid_labels.size and int(valid_labels.max()) >= probs.shape[-1]:
        raise InvalidInputError("label index exceeds the number of classes")
    total, count = ce_terms(probs, labels)
    return total / count if count else 0.0


def _logsumexp(values, axis=-1):
    peak = np.max(values, axis=axis, keepdims=True)
    return np.squeeze(peak, axis=axis) + np.log(np.sum(np.exp(values - peak), axis=axis))


def contrast_logits(batch, omega):
    """Scaled similarities, column 0 positive, columns 1..N negatives."""
    positive = np.einsum("ke,ke->k", batch.anchors, batch.positives)
    negative = np.einsum("ke,kne->kn", batch.anchors, batch.negatives)
    return np.concatenate([positive[:, None], negative], axis=1) / omega


def contrastive_loss(b, omega):
    """
    InfoNCE over class prototypes

    Args:
        b (ContrastBatch): anchors, positives and negatives (unit vectors)
        omega (float): temperature

    Returns:
        float: mean over anchors of -ln softmax(positive)
    """
    if omega <= 0:
        raise InvalidInputError(f"omega must be positive, got {omega}")
    if b.is_empty:
        raise InvalidInputError("contrastive loss of an empty batch")
    logits = contrast_logits(b, omega)
    return float(np.mean(_logsumexp(logits) - logits[:, 0]))


def total_loss(ls, lu, lc, w):
    """L = L_s + lambda_u * L_u + lambda_c * L_c."""
    return ls + w.lambda_u * lu + w.lambda_c * lc


def normalize_rows(vectors):
    """Unit-normalize the last axis; zero rows become the first basis vector."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = vectors / safe
    basis = np.zeros(vectors.shape[-1])
    basis[0] = 1.0
    return np.where(norms > 0.0, unit, basis)


def plan_contrast(labels, anchors_per_class, negatives_per_anchor, seed):
    """
    Choose anchor and negative pixel indices from flat labels.

    Depends only on the labels and the seed, never on the embeddings.

    Returns:
        tuple: (anchor pixel indices, anchor classes, negative pixel indices K x N)
    """
    labels = np.asarray(labels).reshape(-1)
    valid = labels != IGNORE
    if not np.any(valid):
        raise InvalidInputError("contrastive sampling needs at least one labeled pixel")
    rng = np.random.default_rng(seed)
    anchor_idx, anchor_cls, negative_idx = [], [], []
    for cls in np.unique(labels[valid]):
        members = np.flatnonzero(labels == cls)
        others = np.flatnonzero(valid & (labels != cls))
        if members.size < 2 or others.size == 0:
            continue
        take = min(anchors_per_class, members.size)
        chosen = rng.choice(members, size=take, replace=False)
        replace = others.size < negatives_per_anchor
        for pixel in chosen:
            anchor_idx.append(pixel)
            anchor_cls.append(cls)
            negative_idx.append(rng.choice(others, size=negatives_per_anchor, replace=replace))
    if not anchor_idx:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp), np.empty((0, negatives_per_anchor), dtype=np.intp)
    return (
        np.asarray(anchor_idx, dtype=np.intp),
        np.asarray(anchor_cls, dtype=np.intp),
        np.stack(negative_idx).astype(np.intp),
    )


def class_prototypes(embeddings, labels, anchor_idx, anchor_cls):
    """Unit mean of each anchor's class, leaving the anchor itself out."""
    labels = np.asarray(labels).reshape(-1)
    if anchor_idx.size == 0:
        return np.empty((0, embeddings.shape[-1]))
    sums = {}
    for cls in np.unique(anchor_cls):
        sums[int(cls)] = embeddings[labels == cls].sum(axis=0)
    raw = np.stack([sums[int(c)] - embeddings[i] for i, c in zip(anchor_idx, anchor_cls)])
    return normalize_rows(raw)


def assemble_contrast_batch(embeddings, labels, plan, classes, anchors_per_class,
                            negatives_per_anchor, positives=None):
    anchor_idx, anchor_cls, negative_idx = plan
    if positives is None:
        positives = class_prototypes(embeddings, labels, anchor_idx, anchor_cls)
    dim = embeddings.shape[-1]
    return ContrastBatch(
        anchors=embeddings[anchor_idx] if anchor_idx.size else np.empty((0, dim)),
        positives=positives,
        negatives=embeddings[negative_idx] if anchor_idx.size else np.empty((0, negatives_per_anchor, dim)),
        anchor_classes=anchor_cls,
        classes=classes,
        anchors_per_class=anchors_per_class,
        negatives_per_anchor=negatives_per_anchor,
        anchor_pixels=anchor_idx,
        negative_pixels=negative_idx,
    )


def sample_contrast_batch(features, y, M, N, seed, classes=None):
    """
    Sample anchors, prototype positives and other-class negatives

    Args:
        features (np.ndarray): H x W x E unit-norm embedding map
        y (LabelMask): labels (ground truth or pseudo-labels)
        M (int): anchors per class
        N (int): negatives per anchor
        seed (int): sampling seed

    Returns:
        ContrastBatch: empty when no class has both a partner pixel and negatives
    """
    embeddings = np.asarray(features, dtype=np.float64)
    labels = y.values if isinstance(y, LabelMask) else np.asarray(y)
    if embeddings.shape[:-1] != labels.shape:
        raise InvalidInputError(
            f"shape mismatch: embeddings {embeddings.shape[:-1]} vs labels {labels.shape}"
        )
    flat = embeddings.reshape(-1, embeddings.shape[-1])
    flat_labels = labels.reshape(-1)
    if classes is None:
        valid = flat_labels[flat_labels != IGNORE]
        classes = int(valid.max()) + 1 if valid.size else 0
    plan = plan_contrast(flat_labels, M, N, seed)
    return assemble_contrast_batch(flat, flat_labels, plan, classes, M, N)
