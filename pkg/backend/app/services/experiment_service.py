"""
Ablation runs on synthetic shifted data: source-only, +pseudo-labels,
+contrastive with uncertainty selection, and the same loop with random
selection. Every arm of one seed shares the generated dataset.
"""
import logging
import tempfile
from dataclasses import replace

import numpy as np

from backend.app.ml.losses import LossWeights
from backend.app.ml.synthetic_data import generate
from backend.app.models.manifest import SOURCE, TARGET
from backend.app.models.pool_state import PoolState
from backend.app.services.annotator_service import SimulatedAnnotator
from backend.app.services.loop_service import LoopContext, evaluate, initial_models, pretrain, run_loop
from backend.app.services.selection_service import STRATEGY_ENTROPY, STRATEGY_RANDOM
from backend.app.services.training_service import TrainingService, derive_seed
from backend.app.utils.error_handlers import ConfigError

logger = logging.getLogger(__name__)

ARM_SOURCE_ONLY = "source_only"
ARM_SSL = "ssl"
ARM_ACTIVE = "ssl_contrast_active"
ARM_RANDOM = "ssl_contrast_random"
ARM_SOURCE_FREE = "source_free"
ARMS = (ARM_SOURCE_ONLY, ARM_SSL, ARM_ACTIVE, ARM_RANDOM)


def training_stages(loop_config):
    """Number of training stages a loop run performs."""
    stages = len(loop_config.rounds)
    if loop_config.random_first_round:
        stages -= 1
    if loop_config.final_retrain:
        stages += 1
    return max(stages, 1)


class ExperimentService:

    @staticmethod
    def baseline_state(context):
        return PoolState.from_manifests(context.manifest.domain(SOURCE), context.manifest.domain(TARGET))

    @staticmethod
    def warm_start(context, loop_config):
        """Supervised source model the no-annotation arms continue from."""
        student, _ = initial_models(loop_config, context)
        if not loop_config.warmup:
            return student
        state = ExperimentService.baseline_state(context)
        return pretrain(state, loop_config, context, student).student

    @staticmethod
    def baseline(context, loop_config, weights, seed, start):
        """Single long stage on source plus unlabeled target from `start`, no annotation."""
        state = ExperimentService.baseline_state(context)
        train_config = replace(
            loop_config.train,
            epochs=loop_config.train.epochs * training_stages(loop_config),
            weights=weights,
        )
        stage = TrainingService.train_stage(
            start, start, context.labeled(state), context.unlabeled(state), train_config,
            seed=derive_seed(seed, 0, 0),
        )
        return evaluate(context, stage.student)["miou"]

    @staticmethod
    def run_seed(synth_config, loop_config, seed, threads=1, include_source_free=False):
        """
        Every arm for one seed

        Returns:
            dict: arm name -> mIoU (source-free adds round-0 and final mIoU)
        """
        synth_config = replace(synth_config, seed=seed)
        loop_config = replace(loop_config, seed=seed)
        omega = loop_config.train.weights.omega
        results = {}
        with tempfile.TemporaryDirectory(prefix="ilm-ablate-") as workdir:
            dataset = generate(synth_config, workdir, threads=threads, force=True)
            annotator = SimulatedAnnotator({e.id: e.label for e in dataset.ground_truth})

            def fresh_context():
                return LoopContext.from_manifests(
                    dataset.source, dataset.target, synth_config.classes,
                    eval_manifest=dataset.eval, threads=threads,
                )

            context = fresh_context()
            start = ExperimentService.warm_start(context, loop_config)
            results[ARM_SOURCE_ONLY] = ExperimentService.baseline(
                context, loop_config, LossWeights(0.0, 0.0, omega), seed, start
            )
            results[ARM_SSL] = ExperimentService.baseline(
                context, loop_config, LossWeights(loop_config.train.weights.lambda_u, 0.0, omega), seed, start
            )
            for arm, strategy in ((ARM_ACTIVE, STRATEGY_ENTROPY), (ARM_RANDOM, STRATEGY_RANDOM)):
                outcome = run_loop(replace(loop_config, strategy=strategy), fresh_context(), annotator)
                results[arm] = outcome.final["miou"]
            if include_source_free:
                outcome = run_loop(replace(loop_config, source_free=True), fresh_context(), annotator)
                results[ARM_SOURCE_FREE] = {"round0": outcome.round0_miou, "final": outcome.final["miou"]}
        logger.info(
            f"Seed {seed}: " + ", ".join(
                f"{arm} {value:.4f}" for arm, value in results.items() if isinstance(value, float)
            )
        )
        return results


def run_ablation(synth_config, loop_config, seeds, threads=1, include_source_free=False):
    """
    Compare the arms over several seeds

    Args:
        synth_config (SynthConfig): dataset settings (the seed is replaced per run)
        loop_config (LoopConfig): loop settings shared by the active arms
        seeds (list of int): one dataset and one run per seed
        threads (int): worker threads inside each run

    Returns:
        dict: per-arm mIoU lists and means, the share of seeds where
        uncertainty selection beats random selection, and source-free gains
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    per_seed = [
        ExperimentService.run_seed(synth_config, loop_config, seed, threads, include_source_free)
        for seed in seeds
    ]
    arms = {}
    for arm in ARMS:
        values = [result[arm] for result in per_seed]
        arms[arm] = {"miou": values, "mean": float(np.mean(values))}
    wins = [result[ARM_ACTIVE] > result[ARM_RANDOM] for result in per_seed]
    report = {
        "seeds": seeds,
        "arms": arms,
        "active_beats_random": float(np.mean(wins)),
    }
    if include_source_free:
        pairs = [result[ARM_SOURCE_FREE] for result in per_seed]
        report[ARM_SOURCE_FREE] = {
            "round0": [pair["round0"] for pair in pairs],
            "final": [pair["final"] for pair in pairs],
            "improved": float(np.mean([pair["final"] > pair["round0"] for pair in pairs])),
        }
    return report
