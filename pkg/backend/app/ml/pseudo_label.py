"""Entropy-thresholded pseudo-labels with a linearly decaying keep fraction."""
from dataclasses import dataclass

import numpy as np

from backend.app.ml.numerics import EntropyMap, ProbMap, entropy_array, quantile
from backend.app.utils.error_handlers import InvalidInputError
from backend.app.utils import storage

IGNORE = 255

SCOPE_BATCH = "batch"
SCOPE_EPOCH = "epoch"
THRESHOLD_SCOPES = (SCOPE_BATCH, SCOPE_EPOCH)


@dataclass(frozen=True)
class Schedule:
    alpha0: float = 0.2
    total_epochs: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha0 <= 1.0:
            raise InvalidInputError(f"alpha0 must be in (0, 1], got {self.alpha0}")
        if int(self.total_epochs) != self.total_epochs or self.total_epochs < 1:
            raise InvalidInputError(f"total_epochs must be an integer >= 1, got {self.total_epochs}")


@dataclass(frozen=True, eq=False)
class LabelMask:
    """H x W class indices; IGNORE (255) marks pixels with no label."""
    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 2:
            raise InvalidInputError(f"LabelMask must be H x W, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > IGNORE):
            raise InvalidInputError("LabelMask values must be class indices or 255")
        values = raw.astype(np.uint8, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def validate(self, classes):
        """Check every non-IGNORE value is below `classes`."""
        labeled = self.values[self.values != IGNORE]
        if labeled.size and int(labeled.max()) >= classes:
            raise InvalidInputError(
                f"label {int(labeled.max())} out of range for {classes} classes"
            )
        return self

    def labeled_count(self):
        return int(np.count_nonzero(self.values != IGNORE))

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def filled(cls, height, width, value=IGNORE):
        return cls(np.full((height, width), value, dtype=np.uint8))

    @classmethod
    def load(cls, path):
        return cls(storage.read_pgm(path))

    def save(self, path, force=True):
        storage.write_pgm(path, self.values, force=force)


def alpha_at(schedule, t):
    """alpha_t = alpha0 * (1 - t / total_epochs)."""
    if not 0 <= t <= schedule.total_epochs:
        raise InvalidInputError(f"epoch {t} outside [0, {schedule.total_epochs}]")
    return schedule.alpha0 * (1.0 - t / schedule.total_epochs)


def _entropy_values(entropies):
    if isinstance(entropies, (EntropyMap, np.ndarray)):
        entropies = [entropies]
    chunks = [
        np.asarray(e.values if isinstance(e, EntropyMap) else e, dtype=np.float64).ravel()
        for e in entropies
    ]
    return np.concatenate(chunks) if chunks else np.empty(0)


def gamma_threshold(entropies, alpha):
    """
    Entropy threshold keeping roughly the `alpha` fraction of pixels out

    Args:
        entropies (EntropyMap | list of EntropyMap): entropies pooled over the scope
        alpha (float): fraction in [0, 1]

    Returns:
        float: the (100 * (1 - alpha))-th percentile of the pooled entropies
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must be in [0, 1], got {alpha}")
    values = _entropy_values(entropies)
    if values.size == 0:
        raise InvalidInputError("gamma_threshold needs at least one pixel entropy")
    return quantile(values, 100.0 * (1.0 - alpha))


def pseudo_label_array(probs, gamma):
    """Argmax where entropy < gamma, IGNORE elsewhere; works on any leading shape."""
    probs = np.asarray(probs, dtype=np.float64)
    # np.argmax returns the first maximum, so ties go to the lowest class index
    labels = np.argmax(probs, axis=-1).astype(np.uint8)
    confident = entropy_array(probs) < gamma
    return np.where(confident, labels, np.uint8(IGNORE)).astype(np.uint8)


def generate_pseudolabels(p, gamma):
    """Pseudo-label mask for one ProbMap under threshold `gamma`."""
    if not np.isfinite(gamma):
        raise InvalidInputError("gamma must be finite")
    values = p.values if isinstance(p, ProbMap) else ProbMap(p).values
    return LabelMask(pseudo_label_array(values, gamma))
