# services/loop_service.py (train -> select -> annotate rounds under a budget ledger)
"""
Iterative active domain adaptation.

Each round trains a student/teacher pair on the labeled pool plus teacher
pseudo-labels, ranks the unlabeled target images, has the selected ones
annotated and moves them into the labeled pool. The whole pool state, the
annotated labels and the current checkpoints are snapshotted after every
round so an interrupted run can continue with `loop --resume`.
"""
import logging
import os
from dataclasses import dataclass, field

from backend.app.ml.evaluation import evaluate_model, miou, pixel_accuracy
from backend.app.ml.losses import LossWeights
from backend.app.ml.model import ModelParams, load_model, predict_labels, save_model
from backend.app.models.manifest import SOURCE, TARGET, DatasetManifest
from backend.app.models.pool_state import PoolState
from backend.app.services.selection_service import (
    STRATEGIES,
    STRATEGY_ENTROPY,
    STRATEGY_RANDOM,
    SelectionBudget,
    parse_rounds,
    random_select,
    rank_and_select,
    score_images,
)
from backend.app.services.training_service import (
    Sample,
    TrainConfig,
    TrainingService,
    derive_seed,
    load_samples,
)
from backend.app.utils.error_handlers import (
    ConfigError,
    IlmError,
    InvalidInputError,
    RoundAbortedError,
    StorageError,
)
from backend.app.utils import storage

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
MODEL_ROLES = ("teacher", "student")

_TRAIN_TAG = 0
_SELECT_TAG = 1
_INIT_TAG = 2
_SEED_TAG = 3


@dataclass(frozen=True)
class LoopConfig:
    """Round budgets plus everything one training stage needs."""
    rounds: tuple
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain_epochs: int = None
    seed: int = 0
    source_free: bool = False
    warmup: bool = True
    strategy: str = STRATEGY_ENTROPY
    score_with: str = "teacher"
    evaluate_with: str = "student"
    random_first_round: bool = True
    final_retrain: bool = True
    reinit_between_rounds: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(parse_rounds(self.rounds)))
        errors = {}
        if not self.rounds:
            errors["rounds"] = "at least one round budget is required"
        if self.strategy not in STRATEGIES:
            errors["strategy"] = f"must be one of {', '.join(STRATEGIES)}"
        for name in ("score_with", "evaluate_with"):
            if getattr(self, name) not in MODEL_ROLES:
                errors[name] = f"must be one of {', '.join(MODEL_ROLES)}"
        if self.pretrain_epochs is not None and self.pretrain_epochs < 1:
            errors["pretrain_epochs"] = "must be >= 1"
        if int(self.seed) != self.seed or self.seed < 0:
            errors["seed"] = "must be a non-negative integer"
        if errors:
            raise ConfigError("invalid loop configuration", errors)

    def to_dict(self):
        return {
            "rounds": [str(budget) for budget in self.rounds],
            "train": self.train.to_dict(),
            "pretrain_epochs": self.pretrain_epochs,
            "seed": self.seed,
            "source_free": self.source_free,
            "warmup": self.warmup,
            "strategy": self.strategy,
            "score_with": self.score_with,
            "evaluate_with": self.evaluate_with,
            "random_first_round": self.random_first_round,
            "final_retrain": self.final_retrain,
            "reinit_between_rounds": self.reinit_between_rounds,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        train = dict(data.pop("train", {}) or {})
        weights = {key: train.pop(key) for key in ("lambda_u", "lambda_c", "omega") if key in train}
        try:
            return cls(train=TrainConfig(weights=LossWeights(**weights), **train), **data)
        except TypeError as e:
            raise ConfigError(f"unknown loop configuration key: {e}") from e


@dataclass
class LoopContext:
    """
    Sample store owned by the orchestrator thread.

    `manifest` lists every source and target sample; annotated target
    entries point at the label files written under `out_dir/labels`.
    """
    samples: dict
    manifest: DatasetManifest
    classes: int
    eval_samples: list = None
    eval_manifest: DatasetManifest = None
    out_dir: str = None
    threads: int = 1

    @classmethod
    def from_manifests(cls, source, target, classes, eval_manifest=None, out_dir=None, threads=1):
        manifest = (source or DatasetManifest()).merge(target or DatasetManifest())
        eval_samples = None
        if eval_manifest is not None:
            eval_samples = [
                (sample.features, sample.label)
                for sample in load_samples(eval_manifest.labeled()).values()
            ]
        return cls(
            samples=load_samples(manifest),
            manifest=manifest,
            classes=classes,
            eval_samples=eval_samples,
            eval_manifest=eval_manifest,
            out_dir=out_dir,
            threads=threads,
        )

    @property
    def feature_dim(self):
        return next(iter(self.samples.values())).features.dim

    def labeled(self, state):
        return [self.samples[i] for i in sorted(state.labeled)]

    def unlabeled(self, state):
        return [self.samples[i] for i in sorted(state.target_unlabeled)]

    def record_annotation(self, image_id, mask):
        """Attach an expert mask to a sample, persisting it when a run directory is set."""
        sample = self.samples[image_id]
        self.samples[image_id] = Sample(image_id, sample.features, mask)
        if self.out_dir:
            path = os.path.abspath(os.path.join(self.out_dir, "labels", f"{image_id}.pgm"))
            mask.save(path)
            self.manifest = self.manifest.with_labels({image_id: path})


@dataclass(frozen=True, eq=False)
class LoopResult:
    state: PoolState
    student: ModelParams
    teacher: ModelParams
    history: list
    final: dict = None
    snapshot_path: str = None

    @property
    def round0_miou(self):
        for metrics in self.history:
            if metrics.get("round") == 0 and metrics.get("miou") is not None:
                return metrics["miou"]
        return None

    @property
    def selections(self):
        return [metrics.get("selected", []) for metrics in self.history if metrics.get("round", 0) > 0]


def initial_models(config, context):
    """Fresh student; the teacher starts as an exact copy."""
    student = ModelParams.initialize(
        context.feature_dim,
        context.classes,
        config.train.embed_dim,
        seed=derive_seed(config.seed, 0, _INIT_TAG),
    )
    return student, student


def evaluate(context, params):
    """mIoU and pixel accuracy on the held-out set, or None without one."""
    if not context.eval_samples:
        return None
    cm = evaluate_model(params, context.eval_samples, context.threads)
    per_class, mean = miou(cm)
    return {"miou": mean, "pixel_accuracy": pixel_accuracy(cm), "per_class_iou": per_class}


def _pick(models, role):
    student, teacher = models
    return teacher if role == "teacher" else student


def _train(state, config, context, student, stage_index, train_config=None):
    train_config = train_config or config.train
    return TrainingService.train_stage(
        student,
        student,
        context.labeled(state),
        context.unlabeled(state),
        train_config,
        seed=derive_seed(config.seed, stage_index, _TRAIN_TAG),
    )


def select(state, config, context, scorer, budget, strategy=None):
    """
    Choose the next images to annotate

    Args:
        state (PoolState): current pool
        config (LoopConfig): run configuration
        context (LoopContext): sample store
        scorer (ModelParams): model whose mean entropy ranks the pool
        budget (SelectionBudget): this round's budget
        strategy (str): 'entropy' or 'random' (defaults to the config)

    Returns:
        list: selected ids, most uncertain first for the entropy strategy
    """
    strategy = strategy or config.strategy
    ids = sorted(state.target_unlabeled)
    if strategy == STRATEGY_RANDOM:
        return random_select(
            ids, budget, derive_seed(config.seed, state.round + 1, _SELECT_TAG), state.initial_pool_size
        )
    records = score_images(scorer, [(i, context.samples[i].features) for i in ids], context.threads)
    return rank_and_select(records, budget, state.initial_pool_size)


def _annotate(state, ids, annotator, context, config, models=None, history=None):
    """Collect every mask of the round first; on failure snapshot and abort."""
    scorer = _pick(models, config.score_with) if models else None
    masks = {}
    for image_id in ids:
        try:
            prediction = predict_labels(scorer, context.samples[image_id].features) if scorer else None
            mask = annotator.annotate(image_id, prediction)
            expected = (context.samples[image_id].features.height, context.samples[image_id].features.width)
            if mask.shape != expected:
                raise InvalidInputError(f"annotation for '{image_id}' has shape {mask.shape}, expected {expected}")
            masks[image_id] = mask.validate(context.classes)
        except (IlmError, OSError) as e:
            snapshot = None
            if context.out_dir:
                snapshot = save_snapshot(
                    snapshot_path(context.out_dir), state, context, config,
                    models=models, pending=ids, history=history,
                )
            logger.warning(f"Round {state.round + 1} aborted while annotating '{image_id}': {e}")
            raise RoundAbortedError(f"annotation failed for '{image_id}': {e}", snapshot) from e
    for image_id in ids:
        context.record_annotation(image_id, masks[image_id])
    return state.annotate(ids)


def initial_seed_selection(state, budget, seed, annotator=None, context=None, config=None, models=None,
                           history=None):
    """
    Uniformly random first round for a pool with no labeled target images

    Args:
        state (PoolState): pool with an empty target_labeled set
        budget (SelectionBudget | str): images to pick
        seed (int): selection seed
        annotator (AnnotationProvider): labels the picks; without one the ids are only moved

    Returns:
        PoolState: the same state for a zero budget, else the state after the round
    """
    if state.target_labeled:
        raise InvalidInputError("initial seed selection needs an empty labeled target set")
    budget = SelectionBudget.parse(budget)
    ids = random_select(sorted(state.target_unlabeled), budget, seed, state.initial_pool_size)
    if not ids:
        return state
    logger.info(f"Initial random selection of {len(ids)} images")
    if annotator is None:
        return state.annotate(ids)
    return _annotate(state, ids, annotator, context, config, models, history)


def run_round(state, config, annotator, context, models, pending=None, history=None):
    """
    One train -> score -> select -> annotate cycle

    Args:
        state (PoolState): pool before the round
        config (LoopConfig): run configuration
        annotator (AnnotationProvider): expert or oracle
        context (LoopContext): sample store
        models (tuple): (student, teacher) to start from
        pending (list): ids already selected by an aborted attempt of this round

    Returns:
        tuple: (PoolState, (student, teacher), metrics dict)
    """
    round_number = state.round + 1
    metrics = {"round": round_number}
    if pending:
        student, teacher = models
        selected = list(pending)
        metrics.update({"strategy": "resumed", "trace": []})
    else:
        budget = config.rounds[state.round]
        stage = _train(state, config, context, models[0], round_number)
        student, teacher = stage.student, stage.teacher
        metrics["trace"] = stage.trace
        scores = evaluate(context, _pick((student, teacher), config.evaluate_with))
        if scores:
            metrics.update(scores)
        selected = select(state, config, context, _pick((student, teacher), config.score_with), budget)
        metrics["strategy"] = config.strategy
        metrics["budget"] = str(budget)
    logger.info(f"Round {round_number}: annotating {len(selected)} images")
    state = _annotate(state, selected, annotator, context, config, (student, teacher), history)
    metrics["selected"] = selected
    metrics["annotated"] = len(selected)
    metrics["budget_spent"] = state.budget_spent
    return state, (student, teacher), metrics


def pretrain(state, config, context, student, source_only=False):
    """Supervised stage on the labeled pool (or the source images alone) before round 1."""
    ids = state.source_labeled if source_only else state.labeled
    labeled = [context.samples[i] for i in sorted(ids)]
    return TrainingService.warmup(
        student, labeled, config.train,
        epochs=config.pretrain_epochs, seed=derive_seed(config.seed, 0, _TRAIN_TAG),
    )


def run_loop(config, context, annotator, state=None, models=None, pending=None, history=None):
    """
    Run every remaining round and the final retraining stage

    Args:
        config (LoopConfig): run configuration
        context (LoopContext): sample store and optional evaluation set
        annotator (AnnotationProvider): expert or oracle
        state (PoolState): resume point (fresh pool from the manifest when None)
        models (tuple): (student, teacher) to resume from
        pending (list): selection of an aborted round to annotate first
        history (list): metrics of rounds already completed

    Returns:
        LoopResult: final pool, models, per-round metrics and final scores
    """
    if state is None:
        state = PoolState.from_manifests(context.manifest.domain(SOURCE), context.manifest.domain(TARGET))
    history = list(history or [])

    if models is None:
        student, teacher = initial_models(config, context)
        ready = state.source_labeled if config.source_free else state.labeled
        if ready and (config.source_free or config.warmup):
            if config.source_free:
                logger.info(f"Source-free mode: pretraining on {len(state.source_labeled)} source images")
            stage = pretrain(state, config, context, student, source_only=config.source_free)
            student = teacher = stage.student
            metrics = {
                "round": 0,
                "strategy": "source-pretrain" if config.source_free else "warmup",
                "trace": stage.trace,
            }
            metrics.update(evaluate(context, student) or {})
            history.append(metrics)
        if config.source_free:
            state = state.drop_source()
        models = (student, teacher)
    elif config.source_free and state.source_labeled:
        state = state.drop_source()
    base = models[0]
    last_snapshot = None

    if pending:
        state, models, metrics = run_round(state, config, annotator, context, models, pending, history)
        history.append(metrics)
        last_snapshot = _checkpoint_round(state, config, context, models, history)

    while state.round < len(config.rounds):
        budget = config.rounds[state.round]
        if state.round == 0 and not state.target_labeled and config.random_first_round:
            before = state
            state = initial_seed_selection(
                state, budget, derive_seed(config.seed, 0, _SEED_TAG), annotator, context, config, models, history
            )
            if state is before:
                state = state.annotate([])
            selected = sorted(state.target_labeled - before.target_labeled)
            metrics = {
                "round": state.round,
                "strategy": "random-seed",
                "budget": str(budget),
                "selected": selected,
                "annotated": len(selected),
                "budget_spent": state.budget_spent,
            }
        else:
            start = (base, base) if config.reinit_between_rounds else models
            state, models, metrics = run_round(state, config, annotator, context, start, history=history)
        history.append(metrics)
        last_snapshot = _checkpoint_round(state, config, context, models, history)

    final = None
    if config.final_retrain:
        start = base if config.reinit_between_rounds else models[0]
        stage = _train(state, config, context, start, state.round + 1)
        models = (stage.student, stage.teacher)
        final = {"round": state.round + 1, "strategy": "final", "trace": stage.trace}
        final.update(evaluate(context, _pick(models, config.evaluate_with)) or {})
        logger.info(f"Final stage done; {state.budget_spent} images annotated over {state.round} rounds")
    else:
        final = evaluate(context, _pick(models, config.evaluate_with))
    if context.out_dir:
        save_model(os.path.join(context.out_dir, "student.ilmw"), models[0])
        save_model(os.path.join(context.out_dir, "teacher.ilmw"), models[1])
        last_snapshot = save_snapshot(
            snapshot_path(context.out_dir), state, context, config, models=models, history=history, final=final
        )
    return LoopResult(state, models[0], models[1], history, final, last_snapshot)


def _checkpoint_round(state, config, context, models, history):
    if not context.out_dir:
        return None
    return save_snapshot(snapshot_path(context.out_dir), state, context, config, models=models, history=history)


def snapshot_path(out_dir):
    return os.path.join(out_dir, "snapshot.yaml")


def save_snapshot(path, state, context, config, models=None, pending=None, history=None, final=None):
    """
    Write the resumable run state as one YAML document.

    Checkpoints go next to the snapshot under `checkpoints/`; every path in
    the document is relative to the snapshot's directory.
    """
    directory = os.path.dirname(os.path.abspath(path))
    checkpoints = {}
    if models is not None:
        for role, params in zip(("student", "teacher"), models):
            name = os.path.join("checkpoints", f"round_{state.round:03d}_{role}.ilmw")
            save_model(os.path.join(directory, name), params)
            checkpoints[role] = name
    document = {
        "version": SNAPSHOT_VERSION,
        "pool": state.to_dict(),
        "classes": context.classes,
        "config": config.to_dict(),
        "manifest": context.manifest.to_dict(directory),
        "eval_manifest": context.eval_manifest.to_dict(directory) if context.eval_manifest else None,
        "checkpoints": checkpoints,
        "pending": list(pending or []),
        "history": list(history or []),
    }
    if final is not None:
        document["final"] = final
    storage.write_yaml(path, document)
    logger.info(f"Snapshot written to {path} (round {state.round}, {state.budget_spent} annotated)")
    return path


@dataclass(frozen=True, eq=False)
class Snapshot:
    state: PoolState
    config: LoopConfig
    manifest: DatasetManifest
    eval_manifest: DatasetManifest
    classes: int
    checkpoints: dict
    pending: list
    history: list

    def models(self):
        if not self.checkpoints:
            return None
        return load_model(self.checkpoints["student"]), load_model(self.checkpoints["teacher"])

    def context(self, out_dir=None, threads=1):
        """Rebuild the sample store; `out_dir` defaults to the snapshot's directory."""
        return LoopContext.from_manifests(
            self.manifest.domain(SOURCE),
            self.manifest.domain(TARGET),
            self.classes,
            eval_manifest=self.eval_manifest,
            out_dir=out_dir,
            threads=threads,
        )


def load_snapshot(path):
    """Read a snapshot written by `save_snapshot`."""
    data = storage.read_yaml(path)
    if not isinstance(data, dict) or data.get("version") != SNAPSHOT_VERSION:
        raise ConfigError(f"'{path}' is not a loop snapshot (version {SNAPSHOT_VERSION})")
    missing = [key for key in ("pool", "config", "manifest", "classes") if key not in data]
    if missing:
        raise StorageError(f"snapshot '{path}' is missing {', '.join(missing)}")
    directory = os.path.dirname(os.path.abspath(path))
    eval_data = data.get("eval_manifest")
    try:
        return Snapshot(
            state=PoolState.from_dict(data["pool"]),
            config=LoopConfig.from_dict(data["config"]),
            manifest=DatasetManifest.from_dict(data["manifest"], base_dir=directory),
            eval_manifest=DatasetManifest.from_dict(eval_data, base_dir=directory) if eval_data else None,
            classes=int(data["classes"]),
            checkpoints={
                role: os.path.normpath(os.path.join(directory, name))
                for role, name in (data.get("checkpoints") or {}).items()
            },
            pending=list(data.get("pending") or []),
            history=list(data.get("history") or []),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise StorageError(f"snapshot '{path}' is malformed: {e}") from e


def resume_loop(path, annotator, threads=1):
    """Continue a run from its snapshot, writing into the snapshot's directory."""
    snapshot = load_snapshot(path)
    context = snapshot.context(out_dir=os.path.dirname(os.path.abspath(path)), threads=threads)
    logger.info(
        f"Resuming at round {snapshot.state.round + 1} with {len(snapshot.pending)} pending annotations"
    )
    return run_loop(
        snapshot.config,
        context,
        annotator,
        state=snapshot.state,
        models=snapshot.models(),
        pending=snapshot.pending,
        history=snapshot.history,
    )
