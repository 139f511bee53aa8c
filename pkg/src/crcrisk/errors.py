"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class CrcRiskError(Exception):
    exit_code = 1


class ConfigError(CrcRiskError, ValueError):
    exit_code = 2


class MissingArtifactError(CrcRiskError, FileNotFoundError):
    exit_code = 3


class FormatError(CrcRiskError, ValueError):
    """A file on disk does not match the expected layout or version."""

    exit_code = 3


class NumericalError(CrcRiskError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(CrcRiskError, ValueError):
    exit_code = 5


class ShapeError(CrcRiskError, ValueError):
    exit_code = 4


class EmptyMaskError(CrcRiskError, ValueError):
    exit_code = 4


class NoTissueError(CrcRiskError, ValueError):
    """Raised when a patient or slide has no tissue patch to sample from."""

    exit_code = 4
