from django.core.management.base import CommandError

EXIT_INPUT_ERROR = 1
EXIT_NUMERICAL_ERROR = 2


class DecotrError(Exception):
    """Base class for every failure raised by the pipeline."""

    exit_code = EXIT_INPUT_ERROR


class DimensionError(DecotrError, ValueError):
    pass


class DomainError(DecotrError, ArithmeticError):
    exit_code = EXIT_NUMERICAL_ERROR


class ContractError(DecotrError, ValueError):
    pass


class TensorIndexError(DecotrError, IndexError):
    pass


class GeometryError(DecotrError, ValueError):
    pass


class EmptyCloudError(GeometryError):
    pass


class ConfigError(DecotrError, ValueError):
    pass


class InputError(DecotrError, OSError):
    def __init__(self, message, path=None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{self.path}: {message}" if self.path else message)


class NumericalError(DecotrError, ArithmeticError):
    exit_code = EXIT_NUMERICAL_ERROR


def command_error_for(exc):
    """
    Translate a pipeline failure into a CommandError carrying the exit code:
    1 for input/config problems, 2 for numerical failures.
    """
    if isinstance(exc, CommandError):
        return exc

    if isinstance(exc, DecotrError):
        return CommandError(str(exc), returncode=exc.exit_code)

    if isinstance(exc, OSError):
        path = getattr(exc, "filename", None)
        message = exc.strerror or str(exc)
        return CommandError(
            f"{path}: {message}" if path else message, returncode=EXIT_INPUT_ERROR
        )

    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return CommandError(str(exc), returncode=EXIT_NUMERICAL_ERROR)

    return CommandError(str(exc), returncode=EXIT_INPUT_ERROR)
