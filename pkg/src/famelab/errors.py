"""Exception types shared across the package.

Every error raised on a documented failure path derives from FamelabError so
callers can catch the whole family at the CLI boundary.
"""


class FamelabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FamelabError, ValueError):
    """An argument violates a documented precondition."""


class NotFoundError(FamelabError, LookupError):
    """A named entity (class id, preset, pool bucket) does not exist."""


class DegeneratePointError(FamelabError, ArithmeticError):
    """A density evaluation underflowed to zero where a finite value is required."""


class TrainingDivergedError(FamelabError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class DivergedError(FamelabError, RuntimeError):
    """An ODE trajectory left the finite range mid-integration."""

    def __init__(self, class_id, index, step, message=""):
        self.class_id = class_id
        self.index = index
        self.step = step
        super().__init__(
            message
            or f"trajectory diverged (class={class_id}, index={index}, step={step})"
        )


class MalformedFileError(FamelabError, RuntimeError):
    """A binary artifact failed structural validation."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class MalformedPoolError(MalformedFileError):
    """A failure-pool file failed structural validation."""


class IncompatiblePoolError(FamelabError, RuntimeError):
    """A failure pool does not match the schedule or dimension it is used with."""


class PoolBuildFailedError(FamelabError, RuntimeError):
    """No usable candidates were available when building a failure pool."""


class ScorerFailedError(FamelabError, RuntimeError):
    """An external scorer command failed or produced unusable output."""


class PipelineStageError(FamelabError, RuntimeError):
    """A pipeline stage failed; carries the stage name for the failure marker."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
