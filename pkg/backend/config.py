import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Runtime configurations
    LOG_LEVEL = os.environ.get('ILM_LOG_LEVEL', 'INFO').upper()
    THREADS = int(os.environ.get('ILM_THREADS') or os.cpu_count() or 1)
    SEED = int(os.environ.get('ILM_SEED', 0))

    # Semi-supervised training
    EPOCHS_PER_ROUND = 4
    BATCH_SIZE = 4  # N_l = N_u
    LAMBDA_U = 1.0
    LAMBDA_C = 0.1
    TEMPERATURE = 0.1
    ALPHA0 = 0.2  # initial fraction of pixels left out of pseudo-labeling
    THRESHOLD_SCOPE = 'batch'
    EMA_MOMENTUM = 0.99

    # Optimizer
    LEARNING_RATE = 0.0025
    MOMENTUM = 0.9
    WEIGHT_DECAY = 0.0001

    # Contrastive sampling
    ANCHORS_PER_CLASS = 16
    NEGATIVES_PER_ANCHOR = 32
    EMBED_DIM = 16

    # Supervised warm-up before the first pseudo-labels
    WARMUP = True
    PRETRAIN_EPOCHS = 8

    # Active selection
    ROUNDS = '1%,1.2%'
    STRATEGY = 'entropy'
    SCORE_WITH = 'teacher'

    # Labelme hand-off
    ANNOTATION_POLL_SECONDS = float(os.environ.get('ILM_ANNOTATION_POLL', 2.0))


class TestConfig(Config):
    LOG_LEVEL = 'WARNING'
    THREADS = 1
    SEED = 0
