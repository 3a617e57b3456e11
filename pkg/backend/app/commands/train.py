import logging
import os
from dataclasses import replace

import click

from backend.app.commands import class_map_for, new_output, path_option
from backend.app.ml.losses import LossWeights
from backend.app.ml.model import ModelParams, load_model, save_model
from backend.app.models.manifest import load_manifest
from backend.app.services.training_service import (
    TrainingService,
    derive_seed,
    load_samples,
    write_loss_trace,
)

logger = logging.getLogger(__name__)


@click.command('train')
@click.option('--source', type=click.Path(dir_okay=False), default=None, help='Labeled source manifest.')
@click.option('--target', type=click.Path(dir_okay=False), default=None, help='Target manifest.')
@click.option('--classes', 'classes_path', type=click.Path(dir_okay=False), default=None)
@click.option('--init', 'init_path', type=click.Path(dir_okay=False), default=None,
              help='Checkpoint to start the student and teacher from.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--lambda-u', type=float, default=None)
@click.option('--lambda-c', type=float, default=None)
@click.option('--no-unsup', is_flag=True, help='Drop the pseudo-label loss (lambda_u = 0).')
@click.option('--no-contrast', is_flag=True, help='Drop the contrastive loss (lambda_c = 0).')
@click.option('--no-warmup', is_flag=True, help='Skip the supervised stage before a fresh start.')
@click.pass_obj
def train_cmd(state, source, target, classes_path, init_path, out_dir, no_unsup, no_contrast, no_warmup,
              **options):
    """One semi-supervised training stage on a manifest."""
    run = state.run_config(train=options, paths={'source': source, 'target': target, 'out': out_dir})
    class_map = class_map_for(run, classes_path)
    config = run.train_config()
    weights = config.weights
    if no_unsup:
        weights = replace(weights, lambda_u=0.0)
    if no_contrast:
        weights = replace(weights, lambda_c=0.0)
    config = replace(config, weights=weights)

    out_dir = run.paths.get('out') or 'train-out'
    outputs = {name: os.path.join(out_dir, name) for name in ('student.ilmw', 'teacher.ilmw', 'trace.yaml')}
    for path in outputs.values():
        new_output(state, path)

    samples = {}
    if run.paths.get('source'):
        samples.update(load_samples(load_manifest(run.paths['source'])))
    samples.update(load_samples(load_manifest(path_option(run, None, 'target'))))
    labeled = [samples[i] for i in sorted(samples) if samples[i].is_labeled]
    unlabeled = [samples[i] for i in sorted(samples) if not samples[i].is_labeled]
    logger.info(f"Training on {len(labeled)} labeled and {len(unlabeled)} unlabeled images")

    if init_path:
        student = load_model(init_path)
    else:
        feature_dim = next(iter(samples.values())).features.dim
        student = ModelParams.initialize(
            feature_dim, len(class_map), config.embed_dim, seed=derive_seed(run.seed, 0, 2)
        )
        if labeled and config.uses_unlabeled and run.loop.get('warmup', True) and not no_warmup:
            student = TrainingService.warmup(
                student, labeled, config, epochs=run.loop.get('pretrain_epochs'), seed=derive_seed(run.seed, 0, 0)
            ).student
    result = TrainingService.train_stage(
        student, student, labeled, unlabeled, config, seed=derive_seed(run.seed, 1, 0)
    )
    save_model(outputs['student.ilmw'], result.student)
    save_model(outputs['teacher.ilmw'], result.teacher)
    write_loss_trace(outputs['trace.yaml'], result.trace)
    click.echo(f"final loss {result.final_loss():.6f}")
