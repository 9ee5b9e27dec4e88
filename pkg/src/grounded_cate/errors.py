"""Exception hierarchy shared by every module."""


class GroundedCateError(Exception):
    """Base class for all package errors."""


class DataError(GroundedCateError):
    """Malformed or inconsistent tabular input."""


class SchemaMismatchError(DataError):
    """Two datasets that must be combined disagree on their feature columns."""


class SplitError(DataError):
    """A requested split would leave one side empty."""


class SingularDesignError(GroundedCateError):
    """A least-squares design is rank deficient beyond the condition threshold."""


class IdentifiabilityError(SingularDesignError):
    """The correction design is singular on the experimental sample.

    The correction parameters are only identified when the second-moment
    matrix of the mapped features is non-singular on the unconfounded data.
    """


class OverlapError(GroundedCateError):
    """A propensity score lies outside ``[margin, 1 - margin]``."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyArmError(GroundedCateError):
    """A treatment arm required for fitting has no rows."""


class AlgorithmStepError(GroundedCateError):
    """Failure inside one step of the two-stage grounding procedure."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ArtifactError(GroundedCateError):
    """A serialized model or config could not be parsed."""
