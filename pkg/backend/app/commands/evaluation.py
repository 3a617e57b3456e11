import logging

import click

from backend.app.commands import new_output, path_option
from backend.app.ml.evaluation import (
    confusion_for_pairs,
    dump_report,
    evaluate_model,
    evaluation_report,
    format_report,
)
from backend.app.ml.model import load_model
from backend.app.ml.pseudo_label import LabelMask
from backend.app.models.class_map import ClassMap, resolve_subset
from backend.app.models.manifest import load_manifest
from backend.app.services.training_service import load_samples
from backend.app.utils.error_handlers import ConfigError, StorageError

logger = logging.getLogger(__name__)


@click.command('eval')
@click.option('--manifest', type=click.Path(dir_okay=False), default=None, help='Labeled ground-truth manifest.')
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None)
@click.option('--predictions', type=click.Path(dir_okay=False), default=None,
              help='Manifest whose label files are predicted masks, matched by id.')
@click.option('--classes', 'classes_path', type=click.Path(dir_okay=False), default=None)
@click.option('--subset', default=None, help="'19', '16', '13' or a comma separated index list.")
@click.option('--format', 'fmt', type=click.Choice(['text', 'yaml', 'json']), default='text')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def eval_cmd(state, manifest, checkpoint, predictions, classes_path, subset, fmt, out_path):
    """mIoU report for a checkpoint or a set of predicted masks."""
    run = state.run_config(paths={'eval': manifest})
    if (checkpoint is None) == (predictions is None):
        raise ConfigError("pass exactly one of --checkpoint or --predictions")
    truth = load_manifest(path_option(run, None, 'eval')).labeled()
    if out_path:
        new_output(state, out_path)

    class_map = None
    if classes_path or run.paths.get('classes'):
        class_map = ClassMap.load(classes_path or run.paths['classes'])

    if checkpoint:
        params = load_model(checkpoint)
        samples = load_samples(truth)
        cm = evaluate_model(params, [(s.features, s.label) for s in samples.values()], run.threads)
    else:
        if class_map is None:
            raise ConfigError("--predictions needs --classes to size the confusion matrix")
        predicted = load_manifest(predictions, check_files=False).by_id()
        pairs = []
        for entry in truth:
            if entry.id not in predicted or predicted[entry.id].label is None:
                raise StorageError(f"no prediction for '{entry.id}'")
            pairs.append((LabelMask.load(predicted[entry.id].label), LabelMask.load(entry.label)))
        cm = confusion_for_pairs(pairs, len(class_map), run.threads)

    names = list(class_map.names) if class_map is not None else None
    report = evaluation_report(cm, names, resolve_subset(subset, cm.classes))
    text = format_report(report) if fmt == 'text' else dump_report(report, fmt)
    if out_path:
        with open(out_path, 'w') as handle:
            handle.write(text + "\n")
    click.echo(text)
