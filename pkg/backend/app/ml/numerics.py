"""Dense per-pixel maps and the kernels every other module builds on."""
from dataclasses import dataclass

import numpy as np

from backend.app.utils.error_handlers import InvalidInputError
from backend.app.utils import storage

PROB_FLOOR = 1e-12
SUM_TOLERANCE = 1e-6


def _frozen(values, dtype=np.float64):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LogitMap:
    """Pre-softmax classifier output, H x W x C."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3:
            raise InvalidInputError(f"LogitMap must be H x W x C, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("LogitMap contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def classes(self):
        return self.values.shape[2]

    @classmethod
    def load(cls, path):
        return cls(storage.read_prob_map(path))

    def save(self, path, force=True):
        storage.write_prob_map(path, self.values, force=force)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel softmax probabilities, H x W x C, pixel-then-class."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 3 or values.shape[2] < 1:
            raise InvalidInputError(f"ProbMap must be H x W x C, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("ProbMap contains non-finite values")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InvalidInputError("ProbMap values must lie in [0, 1]")
        if values.size and np.max(np.abs(values.sum(axis=2) - 1.0)) > SUM_TOLERANCE:
            raise InvalidInputError("ProbMap pixels must sum to 1")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def classes(self):
        return self.values.shape[2]

    @classmethod
    def load(cls, path):
        return cls(storage.read_prob_map(path))

    def save(self, path, force=True):
        storage.write_prob_map(path, self.values, force=force)


@dataclass(frozen=True, eq=False)
class EntropyMap:
    """Per-pixel Shannon entropy in nats, H x W."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise InvalidInputError(f"EntropyMap must be H x W, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or (values.size and values.min() < 0.0):
            raise InvalidInputError("EntropyMap values must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def softmax_array(logits):
    """Softmax over the last axis, stabilised by the per-pixel max logit."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("softmax input contains non-finite values")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def entropy_array(probs):
    """-sum p ln p over the last axis with 0 ln 0 = 0 and a 1e-12 log clamp."""
    probs = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    terms = np.where(probs > 0.0, probs * logs, 0.0)
    # rounding can leave a tiny negative value for one-hot pixels
    return np.maximum(-terms.sum(axis=-1), 0.0)


def softmax(logits):
    """
    Convert a LogitMap into a ProbMap

    Args:
        logits (LogitMap | np.ndarray): H x W x C pre-softmax scores

    Returns:
        ProbMap: per-pixel class probabilities
    """
    values = logits.values if isinstance(logits, LogitMap) else logits
    return ProbMap(softmax_array(values))


def entropy_map(p):
    """Per-pixel entropy of a ProbMap, in nats."""
    values = p.values if isinstance(p, ProbMap) else ProbMap(p).values
    return EntropyMap(entropy_array(values))


def quantile(values, q):
    """
    q-th percentile with linear interpolation between closest ranks

    Args:
        values (iterable of float): non-empty sample
        q (float): percentile in [0, 100]

    Returns:
        float: the interpolated percentile
    """
    sample = np.asarray(values, dtype=np.float64).ravel()
    if sample.size == 0:
        raise InvalidInputError("quantile of an empty sample")
    if not np.all(np.isfinite(sample)):
        raise InvalidInputError("quantile sample contains non-finite values")
    if not 0.0 <= q <= 100.0:
        raise InvalidInputError(f"percentile {q} outside [0, 100]")
    return float(np.percentile(sample, q, method="linear"))
