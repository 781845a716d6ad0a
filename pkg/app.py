import logging
import sys
from typing import Callable

import click

from commands.adapter_commands import adapter
from commands.run_commands import run as run_group
from commands.spectral_commands import spectral
from settings import get_settings
from soma.errors import DataError, DivergenceError, FoundationError, NumericError, SomaError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1

_error_handlers: dict[type[BaseException], Callable[[BaseException], int]] = {}


def errorhandler(exc_type: type[BaseException]):
    '''
    Register a function turning an exception into an exit code. The handler
    of the most specific registered class in the exception's MRO is used.
    '''
    def register(fn):
        _error_handlers[exc_type] = fn
        return fn
    return register


def _find_handler(exc: BaseException) -> Callable[[BaseException], int] | None:
    for cls in type(exc).__mro__:
        if cls in _error_handlers:
            return _error_handlers[cls]
    return None


@click.group()
def main():
    '''SoMA: SVD-based minor-component adapters and their benchmark.'''
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.WARNING),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def register_commands(group: click.Group, source: click.Group):
    for name, command in source.commands.items():
        group.add_command(command, name)


register_commands(main, spectral)
register_commands(main, adapter)
register_commands(main, run_group)


@errorhandler(SomaError)
def handle_soma_error(e):
    click.echo(f'error: {e}', err=True)
    return e.exit_code


@errorhandler(DataError)
def handle_data_error(e):
    click.echo(f'error: {e}', err=True)
    return DataError.exit_code


@errorhandler(NumericError)
def handle_numeric_error(e):
    click.echo(f'numeric failure: {e}', err=True)
    return NumericError.exit_code


@errorhandler(DivergenceError)
def handle_divergence(e):
    click.echo(f'numeric failure: loss became {e.loss} at step {e.step}', err=True)
    return NumericError.exit_code


@errorhandler(FoundationError)
def handle_foundation_error(e):
    click.echo(f'numeric failure: {e}; the benchmark is not valid with this protocol', err=True)
    return NumericError.exit_code


@errorhandler(OSError)
def handle_os_error(e):
    click.echo(f'error: {e}', err=True)
    return DataError.exit_code


def run(argv: list[str] | None = None) -> int:
    '''
    Run the command line in-process and return its exit code:
    0 success, 1 usage, 2 bad data, 3 numeric failure.
    '''
    try:
        rv = main.main(args=argv, prog_name='soma', standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except Exception as e:
        handler = _find_handler(e)
        if handler is None:
            raise
        return handler(e)
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(run())
