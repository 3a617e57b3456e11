import logging
import os

import click

from backend.app.commands import class_map_for, new_output, path_option
from backend.app.ml.model import FeatureMap
from backend.app.models.manifest import save_manifest, load_manifest
from backend.app.services.annotation_service import labelme_path, read_labelme

logger = logging.getLogger(__name__)


@click.command('ingest')
@click.option('--manifest', type=click.Path(dir_okay=False), default=None, help='Target manifest.')
@click.option('--annotations', 'annotation_dir', type=click.Path(file_okay=False), required=True,
              help='Directory of corrected <id>.json Labelme files.')
@click.option('--labels-dir', type=click.Path(file_okay=False), default=None,
              help='Where the rasterized masks are written (default: <annotations>/masks).')
@click.option('--classes', 'classes_path', type=click.Path(dir_okay=False), default=None)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), required=True,
              help='Updated manifest; the input manifest is left untouched.')
@click.pass_obj
def ingest_cmd(state, manifest, annotation_dir, labels_dir, classes_path, out_path):
    """Read corrected Labelme files back in as labeled target data."""
    run = state.run_config(paths={'target': manifest})
    class_map = class_map_for(run, classes_path)
    new_output(state, out_path)
    target = load_manifest(path_option(run, None, 'target'))
    labels_dir = labels_dir or os.path.join(annotation_dir, 'masks')

    labels = {}
    for entry in target.unlabeled():
        document = labelme_path(annotation_dir, entry.id)
        if not os.path.exists(document):
            continue
        features = FeatureMap.load(entry.features)
        mask = read_labelme(document, class_map, features.height, features.width)
        path = os.path.abspath(os.path.join(labels_dir, f"{entry.id}.pgm"))
        new_output(state, path)
        mask.save(path)
        labels[entry.id] = path
    save_manifest(out_path, target.with_labels(labels))
    logger.info(f"Ingested {len(labels)} annotations into {out_path}")
    click.echo(f"ingested {len(labels)}")
