import logging
import sys
from functools import partial

from django.core.management.base import BaseCommand, CommandError

from main.exceptions import EXIT_INPUT_ERROR, DecotrError, command_error_for

logger = logging.getLogger(__name__)


def _usage_error(parser, message):
    # argparse exits with 2, which belongs to numerical failures here
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_INPUT_ERROR, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=EXIT_INPUT_ERROR)


class PipelineCommand(BaseCommand):
    """
    Base for the pipeline commands: subclasses implement ``run`` and every
    pipeline failure leaves through :func:`command_error_for` with its exit code.
    Bad flags count as input errors.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def run(self, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except (DecotrError, OSError, ArithmeticError) as exc:
            logger.error(f"[{self.command_name().upper()}] failed: {exc}")
            raise command_error_for(exc)

    @classmethod
    def command_name(cls) -> str:
        return cls.__module__.rsplit(".", 1)[-1]
