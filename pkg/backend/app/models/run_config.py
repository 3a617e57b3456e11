# models/run_config.py
from dataclasses import dataclass, field

from backend.app.ml.losses import LossWeights
from backend.app.ml.synthetic_data import SynthConfig
from backend.app.services.loop_service import LoopConfig
from backend.app.services.training_service import TrainConfig
from backend.app.utils.validators import require_valid_run_config
from backend.app.utils import storage
from backend.config import Config


def _defaults(config_class):
    return {
        'train': {
            'epochs': config_class.EPOCHS_PER_ROUND,
            'batch_size': config_class.BATCH_SIZE,
            'lambda_u': config_class.LAMBDA_U,
            'lambda_c': config_class.LAMBDA_C,
            'omega': config_class.TEMPERATURE,
            'alpha0': config_class.ALPHA0,
            'threshold_scope': config_class.THRESHOLD_SCOPE,
            'ema_momentum': config_class.EMA_MOMENTUM,
            'learning_rate': config_class.LEARNING_RATE,
            'momentum': config_class.MOMENTUM,
            'weight_decay': config_class.WEIGHT_DECAY,
            'anchors': config_class.ANCHORS_PER_CLASS,
            'negatives': config_class.NEGATIVES_PER_ANCHOR,
            'embed_dim': config_class.EMBED_DIM,
        },
        'loop': {
            'rounds': config_class.ROUNDS,
            'strategy': config_class.STRATEGY,
            'score_with': config_class.SCORE_WITH,
            'warmup': config_class.WARMUP,
            'pretrain_epochs': config_class.PRETRAIN_EPOCHS,
        },
        'synth': {},
        'paths': {},
        'seed': config_class.SEED,
        'threads': config_class.THREADS,
    }


@dataclass(frozen=True)
class RunConfig:
    """Validated union of the synthetic, training, loop and path settings."""
    synth: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    loop: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1

    @classmethod
    def build(cls, document=None, overrides=None, config_class=Config):
        """
        Merge defaults, a config document and command-line overrides

        Args:
            document (dict): parsed YAML run configuration
            overrides (dict): same shape as the document; None values are skipped
            config_class (type): source of the defaults

        Returns:
            RunConfig: validated configuration
        """
        require_valid_run_config(document)
        require_valid_run_config(overrides)
        merged = _defaults(config_class)
        for layer in (document or {}, overrides or {}):
            for key, value in layer.items():
                if isinstance(value, dict):
                    merged[key].update({k: v for k, v in value.items() if v is not None})
                elif value is not None:
                    merged[key] = value
        require_valid_run_config(merged)
        return cls(**merged)

    @classmethod
    def load(cls, path=None, overrides=None, config_class=Config):
        document = storage.read_yaml(path) if path else None
        return cls.build(document, overrides, config_class)

    def train_config(self):
        values = dict(self.train)
        weights = LossWeights(values.pop('lambda_u'), values.pop('lambda_c'), values.pop('omega'))
        return TrainConfig(weights=weights, **values)

    def loop_config(self):
        return LoopConfig(train=self.train_config(), seed=self.seed, **self.loop)

    def synth_config(self):
        return SynthConfig(seed=self.seed, **self.synth)

    def to_dict(self):
        return {
            'synth': dict(self.synth),
            'train': dict(self.train),
            'loop': dict(self.loop),
            'paths': dict(self.paths),
            'seed': self.seed,
            'threads': self.threads,
        }
