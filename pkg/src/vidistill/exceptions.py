"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VidistillError(Exception):
    exit_code = 1


class InvalidInputError(VidistillError, ValueError):
    exit_code = 3


class InvalidConfigError(VidistillError, ValueError):
    exit_code = 2


class NonFiniteLossError(VidistillError, FloatingPointError):
    exit_code = 6

    def __init__(self, message: str, iteration: int | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostics = diagnostics or {}


class DegenerateTrajectoryError(VidistillError, ValueError):
    exit_code = 7


class BudgetExceededError(VidistillError):
    exit_code = 4

    def __init__(self, needed: int, budget: int):
        super().__init__(f"artifact needs {needed} bytes, budget is {budget} bytes")
        self.needed = needed
        self.budget = budget


class ArtifactFormatError(VidistillError):
    exit_code = 5


class MagicError(ArtifactFormatError):
    pass


class VersionError(ArtifactFormatError):
    pass


class TruncatedError(ArtifactFormatError):
    pass


class ChecksumError(ArtifactFormatError):
    pass
