"""Exception hierarchy shared by every module; each class carries its CLI exit code."""


class SpecRecError(Exception):
    exit_code = 2


class UsageError(SpecRecError):
    exit_code = 1


class DomainError(SpecRecError, ValueError):
    """A value outside the domain of an operation."""
    exit_code = 2


class ShapeError(SpecRecError, ValueError):
    exit_code = 2


class DataFormatError(SpecRecError):
    """Malformed OCT1 / CKP1 / PGM / manifest input."""
    exit_code = 2


class NumericalError(SpecRecError):
    """Non-finite loss or a failed gradient check."""
    exit_code = 3
