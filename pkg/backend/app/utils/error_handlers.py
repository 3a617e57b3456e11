import json
import logging
import traceback

import click

# Set up logging
logger = logging.getLogger(__name__)

EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class IlmError(Exception):
    """Base error for the loop toolkit; `code` is the CLI exit status."""
    code = EXIT_NUMERIC
    kind = "Error"


class InvalidInputError(IlmError, ValueError):
    """Numeric precondition violated (shape, range, emptiness)"""
    kind = "InvalidInput"


class NumericError(IlmError, ArithmeticError):
    """Non-finite values produced during training or scoring"""
    kind = "NumericFailure"


class ConfigError(IlmError):
    """Invalid or unknown configuration values"""
    code = EXIT_CONFIG
    kind = "InvalidConfig"

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class StorageError(IlmError, OSError):
    """Unreadable, malformed or clashing files"""
    code = EXIT_IO
    kind = "IOError"


class AnnotationError(IlmError):
    """Labelme documents that cannot be rasterized"""
    code = EXIT_IO
    kind = "AnnotationError"


class MissingGroundTruthError(AnnotationError, KeyError):
    """No stored mask for a requested image id"""
    kind = "MissingGroundTruth"

    def __init__(self, image_id):
        super().__init__(f"no ground truth for image '{image_id}'")
        self.image_id = image_id

    def __str__(self):
        return self.args[0]


class RoundAbortedError(IlmError):
    """Annotation failed mid-round; the pool was snapshotted for --resume"""
    code = EXIT_IO
    kind = "RoundAborted"

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


def error_payload(error):
    """Build the single-line machine-parsable error record for an exception."""
    if isinstance(error, IlmError):
        payload = {
            "success": False,
            "error": error.kind,
            "message": str(error),
            "code": error.code,
        }
        if isinstance(error, ConfigError) and error.errors:
            payload["errors"] = error.errors
        if isinstance(error, RoundAbortedError) and error.snapshot_path:
            payload["snapshot"] = str(error.snapshot_path)
        return payload
    if isinstance(error, OSError):
        return {"success": False, "error": "IOError", "message": str(error), "code": EXIT_IO}
    if isinstance(error, ArithmeticError):
        return {"success": False, "error": "NumericFailure", "message": str(error), "code": EXIT_NUMERIC}
    return {
        "success": False,
        "error": "Server Error",
        "message": f"An unexpected error occurred: {type(error).__name__}: {error}",
        "code": EXIT_UNEXPECTED,
    }


def register_error_handlers(cli):
    """Register error handlers on the root command group"""
    invoke = cli.invoke

    def handled_invoke(ctx):
        try:
            return invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort, click.ClickException):
            raise
        except (IlmError, OSError, ArithmeticError) as error:
            payload = error_payload(error)
            logger.error(f"{payload['error']}: {payload['message']}")
            logger.debug(traceback.format_exc())
            click.echo(json.dumps(payload, sort_keys=True), err=True)
            ctx.exit(payload["code"])
        except Exception as error:
            payload = error_payload(error)
            logger.error(f"Unhandled exception: {error}")
            logger.error(traceback.format_exc())
            click.echo(json.dumps(payload, sort_keys=True), err=True)
            ctx.exit(payload["code"])

    cli.invoke = handled_invoke
    return cli
