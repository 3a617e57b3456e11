"""
Per-pixel segmentation model: linear classifier f and projection head over
precomputed features, hand-derived gradients of the overall loss, SGD with
momentum and the EMA teacher.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from backend.app.ml.losses import (
    LossWeights,
    assemble_contrast_batch,
    ce_terms,
    contrast_logits,
    normalize_rows,
    plan_contrast,
    total_loss,
)
from backend.app.ml.numerics import ProbMap, softmax_array
from backend.app.ml.pseudo_label import IGNORE, LabelMask
from backend.app.utils.error_handlers import InvalidInputError, NumericError
from backend.app.utils import storage

DEFAULT_EMBED_DIM = 16
DEFAULT_ANCHORS = 16
DEFAULT_NEGATIVES = 32


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """H x W x F per-pixel features produced upstream of the classifier."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.ndim != 3:
            raise InvalidInputError(f"FeatureMap must be H x W x F, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("FeatureMap contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.values.shape[2]

    @classmethod
    def load(cls, path):
        return cls(storage.read_features(path))

    def save(self, path, force=True):
        storage.write_features(path, self.values, force=force)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Classifier weights F x C, bias C and projection F x E."""
    classifier_weights: np.ndarray
    classifier_bias: np.ndarray
    projection_weights: np.ndarray

    def __post_init__(self):
        weights = np.array(self.classifier_weights, dtype=np.float64)
        bias = np.array(self.classifier_bias, dtype=np.float64).reshape(-1)
        projection = np.array(self.projection_weights, dtype=np.float64)
        if weights.ndim != 2 or projection.ndim != 2:
            raise InvalidInputError("classifier and projection weights must be matrices")
        if bias.shape[0] != weights.shape[1] or projection.shape[0] != weights.shape[0]:
            raise InvalidInputError(
                f"inconsistent shapes: W {weights.shape}, b {bias.shape}, P {projection.shape}"
            )
        for block in (weights, bias, projection):
            if not np.all(np.isfinite(block)):
                raise NumericError("model parameters contain non-finite values")
            block.setflags(write=False)
        object.__setattr__(self, "classifier_weights", weights)
        object.__setattr__(self, "classifier_bias", bias)
        object.__setattr__(self, "projection_weights", projection)

    @property
    def feature_dim(self):
        return self.classifier_weights.shape[0]

    @property
    def classes(self):
        return self.classifier_weights.shape[1]

    @property
    def embed_dim(self):
        return self.projection_weights.shape[1]

    def blocks(self):
        return (self.classifier_weights, self.classifier_bias, self.projection_weights)

    def map(self, fn, *others):
        """Apply `fn` blockwise across this and other parameter sets."""
        return ModelParams(*(fn(*group) for group in zip(self.blocks(), *(o.blocks() for o in others))))

    def flatten(self):
        return np.concatenate([block.ravel() for block in self.blocks()])

    def unflatten(self, vector):
        sizes = [block.size for block in self.blocks()]
        parts = np.split(np.asarray(vector, dtype=np.float64), np.cumsum(sizes)[:-1])
        return ModelParams(*(part.reshape(block.shape) for part, block in zip(parts, self.blocks())))

    def norm(self):
        return float(np.linalg.norm(self.flatten()))

    def zeros_like(self):
        return self.map(np.zeros_like)

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.blocks(), other.blocks()))

    @classmethod
    def initialize(cls, feature_dim, classes, embed_dim=DEFAULT_EMBED_DIM, seed=0, scale=0.01):
        """Small Gaussian weights, zero bias."""
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, scale, size=(feature_dim, classes)),
            np.zeros(classes),
            rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(feature_dim, embed_dim)),
        )


@dataclass(frozen=True, eq=False)
class OptimState:
    learning_rate: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0001
    velocity: ModelParams = field(default=None)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidInputError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def reset(self):
        return replace(self, velocity=None)


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    unsupervised: float
    contrastive: float
    total: float
    labeled_pixels: int
    pseudo_pixels: int
    anchors: int

    def to_dict(self):
        return {
            "supervised": self.supervised,
            "unsupervised": self.unsupervised,
            "contrastive": self.contrastive,
            "total": self.total,
            "labeled_pixels": self.labeled_pixels,
            "pseudo_pixels": self.pseudo_pixels,
            "anchors": self.anchors,
        }


def _feature_values(x, params):
    values = x.values if isinstance(x, FeatureMap) else np.asarray(x, dtype=np.float64)
    if values.shape[-1] != params.feature_dim:
        raise InvalidInputError(
            f"feature dim {values.shape[-1]} does not match model dim {params.feature_dim}"
        )
    return values


def logits_array(params, features):
    return features @ params.classifier_weights + params.classifier_bias


def predict(params, x):
    """
    Per-pixel class probabilities softmax(W^T x + b)

    Args:
        params (ModelParams): model weights
        x (FeatureMap): H x W x F features

    Returns:
        ProbMap: H x W x C probabilities
    """
    features = _feature_values(x, params)
    return ProbMap(softmax_array(logits_array(params, features)))


def predict_labels(params, x):
    """Argmax class per pixel as a LabelMask (ties go to the lowest index)."""
    features = _feature_values(x, params)
    return LabelMask(np.argmax(logits_array(params, features), axis=-1).astype(np.uint8))


def embed(params, x):
    """Unit-normalized projection P^T x per pixel; zero outputs map to e_1."""
    features = _feature_values(x, params)
    return normalize_rows(features @ params.projection_weights)


def _stack(batch, params):
    """Flatten a list of (FeatureMap, LabelMask) into pixel rows."""
    if not batch:
        return np.empty((0, params.feature_dim)), np.empty(0, dtype=np.uint8)
    rows, labels = [], []
    for x, y in batch:
        features = _feature_values(x, params)
        mask = y.values if isinstance(y, LabelMask) else np.asarray(y)
        if features.shape[:-1] != mask.shape:
            raise InvalidInputError(
                f"feature map {features.shape[:-1]} and mask {mask.shape} differ in size"
            )
        rows.append(features.reshape(-1, features.shape[-1]))
        labels.append(mask.reshape(-1))
    return np.concatenate(rows), np.concatenate(labels)


def _ce_grad(params, features, labels):
    """Mean CE over valid pixels and its gradient w.r.t. (W, b)."""
    valid = labels != IGNORE
    count = int(valid.sum())
    if count == 0:
        return 0.0, 0, np.zeros_like(params.classifier_weights), np.zeros_like(params.classifier_bias)
    x = features[valid]
    y = labels[valid].astype(np.intp)
    if int(y.max()) >= params.classes:
        raise InvalidInputError("label index exceeds the number of classes")
    probs = softmax_array(logits_array(params, x))
    total, _ = ce_terms(probs, y)
    delta = probs
    delta[np.arange(count), y] -= 1.0
    delta /= count
    return total / count, count, x.T @ delta, delta.sum(axis=0)


def contrast_objective(params, features, labels, weights, seed,
                       anchors=DEFAULT_ANCHORS, negatives=DEFAULT_NEGATIVES, positives=None):
    """
    Contrastive loss over pooled pixels and its gradient w.r.t. the projection.

    Positives are class prototypes held constant (stop-gradient); pass
    `positives` to reuse prototypes computed at another parameter point.

    Returns:
        tuple: (loss, gradient F x E, anchor count, positives used)
    """
    embed_dim = params.embed_dim
    zero = np.zeros_like(params.projection_weights)
    if not np.any(labels != IGNORE):
        return 0.0, zero, 0, np.empty((0, embed_dim))
    raw = features @ params.projection_weights
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    unit = normalize_rows(raw)
    plan = plan_contrast(labels, anchors, negatives, seed)
    batch = assemble_contrast_batch(unit, labels, plan, params.classes, anchors, negatives, positives)
    if batch.is_empty:
        return 0.0, zero, 0, batch.positives
    anchor_idx, _, negative_idx = plan
    count = len(batch)
    logits = contrast_logits(batch, weights.omega)
    peak = logits.max(axis=1, keepdims=True)
    soft = np.exp(logits - peak)
    soft /= soft.sum(axis=1, keepdims=True)
    loss = float(np.mean(peak[:, 0] + np.log(np.exp(logits - peak).sum(axis=1)) - logits[:, 0]))

    # d loss_i / d s_k = (softmax_k - [k == 0]) / omega, averaged over anchors
    coeff = soft / (weights.omega * count)
    coeff[:, 0] -= 1.0 / (weights.omega * count)
    grad_unit = np.zeros_like(unit)
    grad_anchor = coeff[:, :1] * batch.positives + np.einsum("kn,kne->ke", coeff[:, 1:], batch.negatives)
    np.add.at(grad_unit, anchor_idx, grad_anchor)
    grad_negative = coeff[:, 1:, None] * batch.anchors[:, None, :]
    np.add.at(grad_unit, negative_idx.ravel(), grad_negative.reshape(-1, embed_dim))

    # back through a = u / |u|; rows with |u| = 0 were replaced by a constant
    safe = np.where(norms > 0.0, norms, 1.0)
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    grad_raw = np.where(norms > 0.0, (grad_unit - unit * radial) / safe, 0.0)
    return loss, features.T @ grad_raw, count, batch.positives


def loss_and_grad(params, labeled, pseudo, w, seed=0, anchors=DEFAULT_ANCHORS,
                  negatives=DEFAULT_NEGATIVES, positives=None):
    """
    Overall loss L_s + lambda_u L_u + lambda_c L_c and its analytic gradient

    Args:
        params (ModelParams): student parameters
        labeled (list): (FeatureMap, LabelMask) pairs with expert labels
        pseudo (list): (FeatureMap, LabelMask) pairs with pseudo-labels
        w (LossWeights): loss weights and temperature
        seed (int): contrastive sampling seed

    Returns:
        tuple: (LossBreakdown, gradient ModelParams, contrastive positives used)
    """
    labeled_x, labeled_y = _stack(labeled, params)
    pseudo_x, pseudo_y = _stack(pseudo, params)
    if not np.any(labeled_y != IGNORE) and not np.any(pseudo_y != IGNORE):
        raise InvalidInputError("every pixel is IGNORE in both labeled and pseudo-labeled batches")

    ls, n_labeled, grad_w, grad_b = _ce_grad(params, labeled_x, labeled_y)
    lu, n_pseudo, grad_wu, grad_bu = 0.0, 0, 0.0, 0.0
    if w.lambda_u > 0:
        lu, n_pseudo, grad_wu, grad_bu = _ce_grad(params, pseudo_x, pseudo_y)
    grad_w = grad_w + w.lambda_u * grad_wu
    grad_b = grad_b + w.lambda_u * grad_bu

    lc, grad_p, anchor_count, used = 0.0, np.zeros_like(params.projection_weights), 0, positives
    if w.lambda_c > 0:
        features = np.concatenate([labeled_x, pseudo_x])
        labels = np.concatenate([labeled_y, pseudo_y])
        lc, grad_p, anchor_count, used = contrast_objective(
            params, features, labels, w, seed, anchors, negatives, positives
        )
        grad_p = w.lambda_c * grad_p

    breakdown = LossBreakdown(
        supervised=ls,
        unsupervised=lu,
        contrastive=lc,
        total=total_loss(ls, lu, lc, w),
        labeled_pixels=n_labeled,
        pseudo_pixels=n_pseudo,
        anchors=anchor_count,
    )
    if not np.isfinite(breakdown.total):
        raise NumericError("overall loss is not finite")
    return breakdown, ModelParams(grad_w, grad_b, grad_p), used


def grad_total_loss(params, labeled, pseudo, w, seed=0, anchors=DEFAULT_ANCHORS,
                    negatives=DEFAULT_NEGATIVES):
    """Analytic gradient of the overall loss, shaped like ModelParams."""
    _, grads, _ = loss_and_grad(params, labeled, pseudo, w, seed, anchors, negatives)
    return grads


def sgd_step(params, grads, opt):
    """
    One SGD step with momentum and L2 weight decay

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    velocity = opt.velocity if opt.velocity is not None else params.zeros_like()
    velocity = velocity.map(
        lambda v, g, p: opt.momentum * v + g + opt.weight_decay * p, grads, params
    )
    updated = params.map(lambda p, v: p - opt.learning_rate * v, velocity)
    return updated, replace(opt, velocity=velocity)


def ema_update(teacher, student, m):
    """teacher <- m * teacher + (1 - m) * student, elementwise."""
    if not 0.0 <= m <= 1.0:
        raise InvalidInputError(f"EMA momentum must be in [0, 1], got {m}")
    return teacher.map(lambda t, s: m * t + (1.0 - m) * s, student)


def save_model(path, params, force=True):
    """Write an ILMW checkpoint."""
    storage.write_weights(path, *params.blocks(), force=force)


def load_model(path):
    """Load the trained model from an ILMW checkpoint."""
    return ModelParams(*storage.read_weights(path))


def objective_value(params, labeled, pseudo, w, seed=0, anchors=DEFAULT_ANCHORS,
                    negatives=DEFAULT_NEGATIVES, positives=None):
    """Overall loss only; used for finite-difference checks with fixed positives."""
    breakdown, _, _ = loss_and_grad(params, labeled, pseudo, w, seed, anchors, negatives, positives)
    return breakdown.total


__all__ = [
    "FeatureMap",
    "LossBreakdown",
    "LossWeights",
    "ModelParams",
    "OptimState",
    "contrast_objective",
    "ema_update",
    "embed",
    "grad_total_loss",
    "load_model",
    "loss_and_grad",
    "objective_value",
    "predict",
    "predict_labels",
    "save_model",
    "sgd_step",
]
