"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: argument/data errors exit 2,
numerical errors exit 3.
"""


class MpokitError(Exception):
    """Base class for all toolkit errors."""


class ArgumentError(MpokitError, ValueError):
    """Invalid argument: bad shape, permutation, dtype, or factor scheme."""


class NumericalError(MpokitError, ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class SvdConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.6g})")
        self.residual = residual


class DivergenceError(NumericalError):
    """Training produced a non-finite loss. ``history`` holds completed epochs."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class PlanError(ArgumentError):
    """Compression plan failed validation; ``path`` locates the bad field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


class CheckpointError(MpokitError):
    """Base for container read/write failures."""


class TruncatedFileError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class OffsetOverlapError(CheckpointError):
    pass


class OffsetOverflowError(CheckpointError):
    pass


class UnknownDTypeError(CheckpointError):
    pass


class NameCollisionError(CheckpointError):
    pass


class VerificationError(MpokitError):
    """A compressed layer violates its recorded error bound."""
