import logging

import click

from backend.config import Config
from backend.app.utils.error_handlers import register_error_handlers

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


class AppState:
    """Global options shared by every subcommand through the click context."""

    def __init__(self, config_class, config_path=None, seed=None, threads=None, force=False):
        self.config_class = config_class
        self.config_path = config_path
        self.seed = seed
        self.threads = threads
        self.force = force

    def run_config(self, **sections):
        """RunConfig from defaults, the --config file and command-line overrides."""
        from backend.app.models.run_config import RunConfig

        overrides = {}
        for key, values in sections.items():
            values = {name: value for name, value in (values or {}).items() if value is not None}
            if values:
                overrides[key] = values
        if self.seed is not None:
            overrides['seed'] = self.seed
        if self.threads is not None:
            overrides['threads'] = self.threads
        return RunConfig.load(self.config_path, overrides, self.config_class)


def create_app(config_class=Config):
    """Build the `ilm` command group with every subcommand registered."""

    @click.group()
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='YAML run configuration (sections synth, train, loop, paths).')
    @click.option('--seed', type=int, default=None, help='Seed for every random choice.')
    @click.option('--threads', type=int, envvar='ILM_THREADS', default=None,
                  help='Worker threads for scoring, evaluation and generation.')
    @click.option('--log-level', type=click.Choice(LOG_LEVELS, case_sensitive=False),
                  envvar='ILM_LOG_LEVEL', default=None)
    @click.option('--force', is_flag=True, help='Overwrite existing outputs.')
    @click.pass_context
    def cli(ctx, config_path, seed, threads, log_level, force):
        """Iterative active and semi-supervised domain adaptation for segmentation."""
        logging.basicConfig(
            level=(log_level or config_class.LOG_LEVEL).upper(),
            format=LOG_FORMAT,
            force=True,
        )
        ctx.obj = AppState(config_class, config_path, seed, threads, force)

    # Register commands
    from backend.app.commands.synth import synth_cmd
    from backend.app.commands.train import train_cmd
    from backend.app.commands.selection import score_cmd, select_cmd
    from backend.app.commands.annotation import ingest_cmd
    from backend.app.commands.loop import loop_cmd
    from backend.app.commands.evaluation import eval_cmd
    from backend.app.commands.experiment import ablate_cmd

    for command in (synth_cmd, train_cmd, score_cmd, select_cmd, ingest_cmd, loop_cmd, eval_cmd, ablate_cmd):
        cli.add_command(command)

    register_error_handlers(cli)
    return cli
