# services/selection_service.py (uncertainty ranking and budgeted selection)
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from backend.app.ml.numerics import ProbMap, entropy_array
from backend.app.ml.model import predict
from backend.app.utils.error_handlers import ConfigError, InvalidInputError, StorageError

logger = logging.getLogger(__name__)

STRATEGY_ENTROPY = "entropy"
STRATEGY_RANDOM = "random"
STRATEGIES = (STRATEGY_ENTROPY, STRATEGY_RANDOM)


@dataclass(frozen=True)
class UncertaintyRecord:
    image_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score) or self.score < 0:
            raise InvalidInputError(f"score for '{self.image_id}' must be finite and >= 0")


@dataclass(frozen=True)
class SelectionBudget:
    """Either an image count or a fraction of a reference pool size."""
    count: int = None
    fraction: float = None

    def __post_init__(self):
        if (self.count is None) == (self.fraction is None):
            raise ConfigError("a budget needs exactly one of count or fraction")
        if self.count is not None and (int(self.count) != self.count or self.count < 0):
            raise ConfigError(f"budget count must be a non-negative integer, got {self.count}")
        if self.fraction is not None and not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"budget fraction must be in [0, 1], got {self.fraction}")

    @classmethod
    def parse(cls, text):
        """'30' -> 30 images, '1.2%' -> 0.012, '0.05' -> 5 %."""
        if isinstance(text, SelectionBudget):
            return text
        if isinstance(text, int):
            return cls(count=text)
        if isinstance(text, float):
            return cls(fraction=text)
        raw = str(text).strip()
        try:
            if raw.endswith("%"):
                return cls(fraction=float(raw[:-1]) / 100.0)
            if raw.isdigit():
                return cls(count=int(raw))
            return cls(fraction=float(raw))
        except ValueError:
            raise ConfigError(f"cannot parse budget '{text}'") from None

    def resolve(self, reference_size):
        """Image count for a pool of `reference_size`; fractions round half away from zero."""
        if self.count is not None:
            return int(self.count)
        # the 1e-9 nudge absorbs binary error in values like 0.012 * 3000
        return int(math.floor(self.fraction * reference_size + 0.5 + 1e-9))

    def __str__(self):
        return str(self.count) if self.count is not None else f"{self.fraction * 100:g}%"


def parse_rounds(text):
    """'1%,1.2%' -> [SelectionBudget, SelectionBudget]."""
    if isinstance(text, (list, tuple)):
        return [SelectionBudget.parse(item) for item in text]
    parts = [part for part in str(text).split(",") if part.strip()]
    if not parts:
        raise ConfigError("at least one round budget is required")
    return [SelectionBudget.parse(part) for part in parts]


def uncertainty_score(p):
    """
    Image uncertainty: mean per-pixel entropy of a ProbMap

    Args:
        p (ProbMap): teacher probabilities

    Returns:
        float: average entropy in nats (>= 0)
    """
    values = p.values if isinstance(p, ProbMap) else ProbMap(p).values
    return float(np.mean(entropy_array(values)))


def ranking_key(record):
    return (-record.score, record.image_id)


def rank(records):
    """Score descending, ties by ascending image id."""
    return sorted(records, key=ranking_key)


def rank_and_select(records, budget, reference_size=None):
    """
    Pick the most uncertain images under a budget

    Args:
        records (list of UncertaintyRecord): scored unlabeled images
        budget (SelectionBudget): count or fraction
        reference_size (int): pool size fractions refer to (defaults to len(records))

    Returns:
        list: selected image ids, most uncertain first
    """
    records = list(records)
    wanted = budget.resolve(len(records) if reference_size is None else reference_size)
    if wanted > len(records):
        logger.warning(f"Budget of {wanted} images exceeds pool of {len(records)}; clamping")
        wanted = len(records)
    if wanted == 0:
        return []
    return [record.image_id for record in rank(records)[:wanted]]


def random_select(image_ids, budget, seed, reference_size=None):
    """Uniformly random ids (seeded), independent of the input order."""
    pool = sorted(image_ids)
    wanted = budget.resolve(len(pool) if reference_size is None else reference_size)
    if wanted > len(pool):
        logger.warning(f"Budget of {wanted} images exceeds pool of {len(pool)}; clamping")
        wanted = len(pool)
    if wanted == 0:
        return []
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=wanted, replace=False)
    return [pool[i] for i in picked]


def score_images(params, samples, threads=1):
    """
    Score (image_id, FeatureMap) pairs with a read-only model snapshot.

    Work fans out over a thread pool; results keep the input order.
    """
    samples = list(samples)

    def score(sample):
        image_id, features = sample
        return UncertaintyRecord(image_id, uncertainty_score(predict(params, features)))

    if threads and threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(score, samples))
    return [score(sample) for sample in samples]


def write_score_table(path, records, force=True):
    """One '<id>\\t<score>' line per image in ranking order."""
    if not force and os.path.exists(path):
        raise StorageError(f"refusing to overwrite '{path}' (use --force)")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w") as handle:
            for record in rank(records):
                handle.write(f"{record.image_id}\t{record.score:.9f}\n")
    except OSError as e:
        raise StorageError(f"cannot write score table '{path}': {e.strerror or e}") from e
    return path


def read_score_table(path):
    records = []
    try:
        with open(path) as handle:
            for number, line in enumerate(handle, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise StorageError(f"{path}:{number}: expected '<id>\\t<score>'")
                try:
                    records.append(UncertaintyRecord(parts[0], float(parts[1])))
                except ValueError:
                    raise StorageError(f"{path}:{number}: bad score '{parts[1]}'") from None
    except OSError as e:
        raise StorageError(f"cannot read score table '{path}': {e.strerror or e}") from e
    return records
