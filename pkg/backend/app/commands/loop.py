import logging
import os

import click

from backend.app.commands import class_map_for, new_output, path_option
from backend.app.models.manifest import load_manifest
from backend.app.services.annotator_service import LabelmeFileAnnotator, SimulatedAnnotator
from backend.app.services.loop_service import LoopContext, resume_loop, run_loop, snapshot_path

logger = logging.getLogger(__name__)


def _annotator(state, run, ground_truth, classes_path, inbox, out_dir):
    """Oracle when ground truth is known, otherwise the Labelme file hand-off."""
    ground_truth = ground_truth or run.paths.get('ground_truth')
    if ground_truth:
        manifest = load_manifest(ground_truth)
        return SimulatedAnnotator({entry.id: entry.label for entry in manifest.labeled()})
    return LabelmeFileAnnotator(
        class_map_for(run, classes_path),
        export_dir=os.path.join(out_dir, 'labelme'),
        inbox_dir=inbox or run.paths.get('inbox'),
        poll_interval=state.config_class.ANNOTATION_POLL_SECONDS,
    )


def _report(result):
    for metrics in result.history:
        miou = metrics.get('miou')
        click.echo(
            f"round {metrics['round']}\t{metrics.get('strategy')}\t"
            f"annotated {metrics.get('annotated', 0)}\tspent {metrics.get('budget_spent', 0)}"
            + (f"\tmIoU {miou:.4f}" if miou is not None else "")
        )
    if result.final and result.final.get('miou') is not None:
        click.echo(f"final\tmIoU {result.final['miou']:.4f}")
    click.echo(f"annotated {result.state.budget_spent} images in {result.state.round} rounds")


@click.command('loop')
@click.option('--source', type=click.Path(dir_okay=False), default=None)
@click.option('--target', type=click.Path(dir_okay=False), default=None)
@click.option('--eval', 'eval_path', type=click.Path(dir_okay=False), default=None,
              help='Labeled held-out manifest for per-round mIoU.')
@click.option('--ground-truth', type=click.Path(dir_okay=False), default=None,
              help='Manifest with target labels; enables the oracle annotator.')
@click.option('--classes', 'classes_path', type=click.Path(dir_okay=False), default=None)
@click.option('--inbox', type=click.Path(file_okay=False), default=None,
              help='Directory the corrected Labelme files appear in.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@click.option('--rounds', default=None, help="Comma separated budgets, e.g. '1%,1.2%'.")
@click.option('--epochs', type=int, default=None)
@click.option('--strategy', type=click.Choice(['entropy', 'random']), default=None)
@click.option('--score-with', type=click.Choice(['teacher', 'student']), default=None)
@click.option('--source-free', is_flag=True, default=None)
@click.option('--warmup/--no-warmup', default=None,
              help='Supervised stage on the labeled pool before round 1.')
@click.option('--reinit', 'reinit_between_rounds', is_flag=True, default=None)
@click.option('--resume', type=click.Path(dir_okay=False), default=None, help='Snapshot to continue from.')
@click.pass_obj
def loop_cmd(state, source, target, eval_path, ground_truth, classes_path, inbox, out_dir, rounds, epochs,
             strategy, score_with, source_free, warmup, reinit_between_rounds, resume):
    """Full multi-round train, select, annotate loop."""
    if resume:
        run = state.run_config(paths={'ground_truth': ground_truth, 'inbox': inbox})
        out_dir = os.path.dirname(os.path.abspath(resume))
        annotator = _annotator(state, run, ground_truth, classes_path, inbox, out_dir)
        _report(resume_loop(resume, annotator, threads=run.threads))
        return

    run = state.run_config(
        loop={
            'rounds': rounds,
            'strategy': strategy,
            'score_with': score_with,
            'source_free': source_free,
            'warmup': warmup,
            'reinit_between_rounds': reinit_between_rounds,
        },
        train={'epochs': epochs},
        paths={'source': source, 'target': target, 'eval': eval_path, 'out': out_dir},
    )
    class_map = class_map_for(run, classes_path)
    out_dir = run.paths.get('out') or 'loop-out'
    new_output(state, snapshot_path(out_dir))

    source_manifest = load_manifest(run.paths['source']) if run.paths.get('source') else None
    target_manifest = load_manifest(path_option(run, None, 'target'))
    eval_manifest = load_manifest(run.paths['eval']) if run.paths.get('eval') else None
    context = LoopContext.from_manifests(
        source_manifest, target_manifest, len(class_map),
        eval_manifest=eval_manifest, out_dir=out_dir, threads=run.threads,
    )
    annotator = _annotator(state, run, ground_truth, classes_path, inbox, out_dir)
    _report(run_loop(run.loop_config(), context, annotator))
