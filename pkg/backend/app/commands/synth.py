import logging
import os

import click

from backend.app.commands import new_output
from backend.app.ml.synthetic_data import generate

logger = logging.getLogger(__name__)


@click.command('synth')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None, help='Output directory.')
@click.option('--classes', type=int, default=None)
@click.option('--feature-dim', type=int, default=None)
@click.option('--height', type=int, default=None)
@click.option('--width', type=int, default=None)
@click.option('--patches', type=int, default=None)
@click.option('--separation', type=float, default=None)
@click.option('--shift', type=float, default=None, help='Per-class domain shift magnitude.')
@click.option('--skew', type=float, default=None, help='Long-tail exponent of the class prior.')
@click.option('--noise', type=float, default=None)
@click.option('--n-source', type=int, default=None)
@click.option('--n-target', type=int, default=None)
@click.option('--n-eval', type=int, default=None)
@click.pass_obj
def synth_cmd(state, out_dir, **options):
    """Generate a seeded source/target dataset with ground truth."""
    run = state.run_config(synth=options, paths={'out': out_dir})
    out_dir = run.paths.get('out') or 'synthetic'
    new_output(state, os.path.join(out_dir, 'source.yaml'))
    dataset = generate(run.synth_config(), out_dir, threads=run.threads, force=state.force)
    for name, path in dataset.paths.items():
        click.echo(f"{name}\t{path}")
