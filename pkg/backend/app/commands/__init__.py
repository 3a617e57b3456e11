# commands/__init__.py (helpers shared by the subcommands)
from backend.app.models.class_map import ClassMap
from backend.app.utils.error_handlers import ConfigError
from backend.app.utils import storage


def class_map_for(run, path=None):
    """Class map from --classes, then paths.classes in the run configuration."""
    path = path or run.paths.get('classes')
    if not path:
        raise ConfigError("a class map is required (--classes or paths.classes)")
    return ClassMap.load(path)


def path_option(run, value, key):
    """Command-line path, falling back to the run configuration's paths section."""
    value = value or run.paths.get(key)
    if not value:
        raise ConfigError(f"missing path '{key}' (pass it on the command line or in paths.{key})")
    return value


def new_output(state, path):
    return storage.ensure_new_path(path, state.force)
