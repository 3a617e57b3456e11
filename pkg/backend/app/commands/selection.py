import logging
import os

import click

from backend.app.commands import class_map_for, new_output, path_option
from backend.app.ml.model import load_model, predict_labels
from backend.app.models.manifest import load_manifest
from backend.app.services.annotation_service import labelme_path, save_labelme, write_labelme
from backend.app.services.selection_service import (
    SelectionBudget,
    rank_and_select,
    read_score_table,
    score_images,
    write_score_table,
)
from backend.app.services.training_service import load_samples
from backend.app.utils.error_handlers import ConfigError

logger = logging.getLogger(__name__)


@click.command('score')
@click.option('--checkpoint', type=click.Path(dir_okay=False), required=True, help='Teacher checkpoint.')
@click.option('--manifest', type=click.Path(dir_okay=False), default=None, help='Target manifest.')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default='scores.tsv')
@click.pass_obj
def score_cmd(state, checkpoint, manifest, out_path):
    """Rank unlabeled target images by mean pixel entropy."""
    run = state.run_config(paths={'target': manifest})
    new_output(state, out_path)
    params = load_model(checkpoint)
    unlabeled = load_manifest(path_option(run, None, 'target')).unlabeled()
    samples = load_samples(unlabeled)
    records = score_images(params, [(i, samples[i].features) for i in unlabeled.ids], run.threads)
    write_score_table(out_path, records, force=state.force)
    logger.info(f"Scored {len(records)} images into {out_path}")
    click.echo(out_path)


@click.command('select')
@click.option('--scores', type=click.Path(dir_okay=False), required=True)
@click.option('--budget', required=True, help="Image count ('30') or fraction ('1.2%', '0.05').")
@click.option('--reference', type=int, default=None,
              help='Pool size fractions refer to (defaults to the number of scored images).')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default='selected.txt')
@click.option('--export-dir', type=click.Path(file_okay=False), default=None,
              help='Write Labelme predictions of the selected images here.')
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
@click.option('--manifest', type=click.Path(dir_okay=False), default=None)
@click.option('--classes', 'classes_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def select_cmd(state, scores, budget, reference, out_path, export_dir, checkpoint, manifest, classes_path):
    """Apply a budget to a score table and export the picks for correction."""
    run = state.run_config(paths={'target': manifest})
    new_output(state, out_path)
    selected = rank_and_select(read_score_table(scores), SelectionBudget.parse(budget), reference)
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, 'w') as handle:
        handle.writelines(f"{image_id}\n" for image_id in selected)
    logger.info(f"Selected {len(selected)} images")

    if export_dir:
        if not checkpoint:
            raise ConfigError("--export-dir needs --checkpoint to predict the exported masks")
        class_map = class_map_for(run, classes_path)
        params = load_model(checkpoint)
        target = load_manifest(path_option(run, None, 'target')).subset(selected)
        samples = load_samples(target)
        for image_id in selected:
            document = write_labelme(
                predict_labels(params, samples[image_id].features), class_map, image_path=f"{image_id}.png"
            )
            path = labelme_path(export_dir, image_id)
            new_output(state, path)
            save_labelme(path, document)
        logger.info(f"Exported {len(selected)} Labelme files to {export_dir}")
    click.echo("\n".join(selected))
