"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class D24FADError(Exception):
    exit_code = 1


class ConfigError(D24FADError, ValueError):
    exit_code = 2


class DataError(D24FADError, ValueError):
    """Not enough images, bad folder layout, empty inputs."""
    exit_code = 2


class LayoutError(DataError):
    pass


class ShapeError(D24FADError, ValueError):
    exit_code = 2


class PreconditionError(D24FADError, ValueError):
    exit_code = 2


class StateError(D24FADError, RuntimeError):
    exit_code = 3


class IncompatibleCheckpointError(D24FADError, RuntimeError):
    exit_code = 3


class NumericError(D24FADError, FloatingPointError):
    """A loss term or logit went non-finite."""
    exit_code = 4

    def __init__(self, message, term=None, episode_id=None):
        super().__init__(message)
        self.term = term
        self.episode_id = episode_id


class UndefinedMetricError(D24FADError, ValueError):
    exit_code = 2
