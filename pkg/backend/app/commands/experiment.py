import logging

import click

from backend.app.commands import new_output
from backend.app.services.experiment_service import run_ablation
from backend.app.utils.error_handlers import ConfigError
from backend.app.utils import storage

logger = logging.getLogger(__name__)


def parse_seeds(text):
    """'0-19' or '0,3,7' -> list of ints."""
    seeds = []
    try:
        for part in str(text).split(','):
            part = part.strip()
            if not part:
                continue
            if '-' in part:
                low, high = part.split('-', 1)
                seeds.extend(range(int(low), int(high) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds '{text}'") from None
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


@click.command('ablate')
@click.option('--seeds', default='0-19', show_default=True)
@click.option('--rounds', default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--n-target', type=int, default=None)
@click.option('--n-eval', type=int, default=None)
@click.option('--shift', type=float, default=None)
@click.option('--source-free', is_flag=True, help='Also report source-free round-0 versus final mIoU.')
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def ablate_cmd(state, seeds, rounds, epochs, n_target, n_eval, shift, source_free, out_path):
    """Source-only vs +SSL vs +contrastive+active vs random selection over seeds."""
    run = state.run_config(
        synth={'n_target': n_target, 'n_eval': n_eval, 'shift': shift},
        loop={'rounds': rounds},
        train={'epochs': epochs},
    )
    if out_path:
        new_output(state, out_path)
    report = run_ablation(
        run.synth_config(), run.loop_config(), parse_seeds(seeds),
        threads=run.threads, include_source_free=source_free,
    )
    if out_path:
        storage.write_yaml(out_path, report)
    for arm, values in report['arms'].items():
        click.echo(f"{arm}\tmean mIoU {values['mean']:.4f}")
    click.echo(f"active beats random\t{report['active_beats_random']:.2f}")
    if source_free:
        click.echo(f"source-free improved\t{report['source_free']['improved']:.2f}")
