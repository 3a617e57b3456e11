import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from backend.app.ml.losses import LossWeights
from backend.app.ml.model import (
    DEFAULT_ANCHORS,
    DEFAULT_NEGATIVES,
    FeatureMap,
    OptimState,
    ema_update,
    loss_and_grad,
    predict,
    sgd_step,
)
from backend.app.ml.numerics import entropy_map
from backend.app.ml.pseudo_label import (
    IGNORE,
    SCOPE_BATCH,
    SCOPE_EPOCH,
    THRESHOLD_SCOPES,
    LabelMask,
    Schedule,
    alpha_at,
    gamma_threshold,
    generate_pseudolabels,
)
from backend.app.utils.error_handlers import ConfigError, InvalidInputError, StorageError
from backend.app.utils import storage

logger = logging.getLogger(__name__)

# independent RNG streams so dropping the unlabeled set never shifts the labeled order
_LABELED_STREAM = 0
_UNLABELED_STREAM = 1


@dataclass(frozen=True, eq=False)
class Sample:
    """Features of one image plus its labels when it has any."""
    id: str
    features: FeatureMap
    label: LabelMask = None

    @property
    def is_labeled(self):
        return self.label is not None


def load_samples(manifest):
    """Read every entry of a DatasetManifest into Samples, keyed by id."""
    samples = {}
    for entry in manifest:
        label = LabelMask.load(entry.label) if entry.label is not None else None
        features = FeatureMap.load(entry.features)
        if label is not None and label.shape != (features.height, features.width):
            raise StorageError(f"entry '{entry.id}': label and feature map sizes differ")
        samples[entry.id] = Sample(entry.id, features, label)
    return samples


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one semi-supervised training stage."""
    epochs: int = 4
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    alpha0: float = 0.2
    threshold_scope: str = SCOPE_BATCH
    ema_momentum: float = 0.99
    learning_rate: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0001
    anchors: int = DEFAULT_ANCHORS
    negatives: int = DEFAULT_NEGATIVES
    embed_dim: int = 16

    def __post_init__(self):
        errors = {}
        if int(self.epochs) != self.epochs or self.epochs < 1:
            errors["epochs"] = "must be an integer >= 1"
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            errors["batch_size"] = "must be an integer >= 1"
        if not 0.0 < self.alpha0 <= 1.0:
            errors["alpha0"] = "must be in (0, 1]"
        if self.threshold_scope not in THRESHOLD_SCOPES:
            errors["threshold_scope"] = f"must be one of {', '.join(THRESHOLD_SCOPES)}"
        if not 0.0 <= self.ema_momentum <= 1.0:
            errors["ema_momentum"] = "must be in [0, 1]"
        if not self.learning_rate > 0:
            errors["learning_rate"] = "must be positive"
        if not 0.0 <= self.momentum < 1.0:
            errors["momentum"] = "must be in [0, 1)"
        if self.weight_decay < 0:
            errors["weight_decay"] = "must be non-negative"
        for name in ("anchors", "negatives", "embed_dim"):
            if getattr(self, name) < 1:
                errors[name] = "must be >= 1"
        if errors:
            raise ConfigError("invalid training configuration", errors)

    @property
    def schedule(self):
        return Schedule(alpha0=self.alpha0, total_epochs=self.epochs)

    @property
    def uses_unlabeled(self):
        return self.weights.lambda_u > 0 or self.weights.lambda_c > 0

    def optimizer(self):
        return OptimState(self.learning_rate, self.momentum, self.weight_decay)

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            **self.weights.to_dict(),
            "alpha0": self.alpha0,
            "threshold_scope": self.threshold_scope,
            "ema_momentum": self.ema_momentum,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "anchors": self.anchors,
            "negatives": self.negatives,
            "embed_dim": self.embed_dim,
        }


@dataclass(frozen=True, eq=False)
class StageResult:
    student: object
    teacher: object
    optimizer: OptimState
    trace: list

    def final_loss(self):
        return self.trace[-1]["total"] if self.trace else None


class TrainingService:
    """Semi-supervised stage: student SGD on expert plus pseudo labels, EMA teacher."""

    @staticmethod
    def pseudo_label_batch(teacher, samples, alpha, gamma=None):
        """
        Teacher pseudo-labels for a batch of unlabeled samples.

        With `gamma` unset the threshold is the batch percentile of the
        teacher's pixel entropies.
        """
        probs = [predict(teacher, sample.features) for sample in samples]
        if gamma is None:
            gamma = gamma_threshold([entropy_map(p) for p in probs], alpha)
        return [(sample.features, generate_pseudolabels(p, gamma)) for sample, p in zip(samples, probs)], gamma

    @staticmethod
    def epoch_threshold(teacher, samples, alpha):
        """Threshold pooled over every unlabeled image at the start of an epoch."""
        return gamma_threshold([entropy_map(predict(teacher, s.features)) for s in samples], alpha)

    @staticmethod
    def train_stage(student, teacher, labeled, unlabeled, config, seed=0, optimizer=None):
        """
        Run `config.epochs` epochs of mean-teacher training

        Args:
            student (ModelParams): parameters updated by SGD
            teacher (ModelParams): EMA parameters producing pseudo-labels
            labeled (list of Sample): expert-labeled images (source and target)
            unlabeled (list of Sample): target images without labels
            config (TrainConfig): stage hyperparameters
            seed (int): seed for batch order and contrastive sampling
            optimizer (OptimState): carried momentum state, fresh when None

        Returns:
            StageResult: final student, teacher, optimizer state and per-epoch loss trace
        """
        labeled = [s for s in labeled if s.is_labeled]
        unlabeled = list(unlabeled) if config.uses_unlabeled else []
        if not labeled and not unlabeled:
            raise InvalidInputError("training needs labeled or unlabeled samples")
        opt = optimizer if optimizer is not None else config.optimizer()
        batch = config.batch_size
        labeled_rng = np.random.default_rng([seed, _LABELED_STREAM])
        unlabeled_rng = np.random.default_rng([seed, _UNLABELED_STREAM])
        # an epoch covers the larger set; the smaller one wraps around
        reference = max(len(labeled), len(unlabeled))
        wrap_labeled = len(labeled) < reference
        steps = math.ceil(reference / batch)

        trace = []
        for epoch in range(config.epochs):
            alpha = alpha_at(config.schedule, epoch)
            labeled_order = labeled_rng.permutation(len(labeled)) if labeled else []
            unlabeled_order = unlabeled_rng.permutation(len(unlabeled)) if unlabeled else []
            gamma = None
            if unlabeled and config.threshold_scope == SCOPE_EPOCH:
                gamma = TrainingService.epoch_threshold(teacher, unlabeled, alpha)

            totals = {"supervised": 0.0, "unsupervised": 0.0, "contrastive": 0.0, "total": 0.0}
            step_losses = []
            for step in range(steps):
                if wrap_labeled and labeled:
                    picks = [labeled_order[(step * batch + k) % len(labeled)] for k in range(batch)]
                else:
                    picks = labeled_order[step * batch:(step + 1) * batch]
                labeled_batch = [(labeled[i].features, labeled[i].label) for i in picks]
                pseudo = []
                if unlabeled:
                    # N_u = N_l: the unlabeled order wraps around when it runs out
                    picks = [unlabeled[unlabeled_order[(step * batch + k) % len(unlabeled)]]
                             for k in range(batch)]
                    pseudo, _ = TrainingService.pseudo_label_batch(teacher, picks, alpha, gamma)
                if not _has_valid_pixels(labeled_batch) and not _has_valid_pixels(pseudo):
                    logger.debug(f"Epoch {epoch} step {step}: no valid pixels, skipped")
                    continue

                breakdown, grads, _ = loss_and_grad(
                    student, labeled_batch, pseudo, config.weights,
                    seed=[seed, epoch, step], anchors=config.anchors, negatives=config.negatives,
                )
                student, opt = sgd_step(student, grads, opt)
                teacher = ema_update(teacher, student, config.ema_momentum)
                for key in totals:
                    totals[key] += getattr(breakdown, key)
                step_losses.append(breakdown.total)

            done = max(len(step_losses), 1)
            record = {"epoch": epoch, "alpha": alpha, "steps": len(step_losses)}
            record.update({key: value / done for key, value in totals.items()})
            record["step_losses"] = step_losses
            trace.append(record)
            logger.info(
                f"Epoch {epoch + 1}/{config.epochs}: loss {record['total']:.6f} "
                f"(sup {record['supervised']:.6f}, unsup {record['unsupervised']:.6f}, "
                f"contrast {record['contrastive']:.6f}), alpha {alpha:.3f}"
            )
        return StageResult(student, teacher, opt, trace)

    @staticmethod
    def warmup(student, labeled, config, epochs=None, seed=0):
        """
        Supervised stage on the labeled images only.

        Pseudo-labels from a freshly initialised teacher are noise, so a
        stage that starts from scratch is preceded by this one; its student
        becomes both models of the semi-supervised stage.
        """
        warm_config = replace(
            config,
            epochs=epochs or config.epochs,
            weights=LossWeights(lambda_u=0.0, lambda_c=0.0, omega=config.weights.omega),
        )
        logger.info(f"Supervised warm-up: {warm_config.epochs} epochs on {len(labeled)} labeled images")
        return TrainingService.train_stage(student, student, labeled, [], warm_config, seed=seed)


def _has_valid_pixels(pairs):
    for _, mask in pairs:
        if np.any(mask.values != IGNORE):
            return True
    return False


def write_loss_trace(path, trace, force=True):
    """YAML list of per-epoch loss records."""
    return storage.write_yaml(path, trace, force=force)


def read_loss_trace(path):
    return storage.read_yaml(path) or []


def derive_seed(*parts):
    """Stable 32-bit seed for a (run seed, round, purpose) tuple."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])
