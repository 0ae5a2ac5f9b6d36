"""Exception types shared across the package."""


class LgmError(Exception):
    """Base class for all package errors."""


class ModelSpecError(LgmError):
    """Raised when a model specification document is invalid."""


class DataError(LgmError):
    """Raised when a data table fails validation against a model."""


class NotPositiveDefinite(LgmError):
    """Raised when a matrix expected to be positive definite is not."""


class NonConvergence(LgmError):
    """Raised when an iterative routine exhausts its iteration budget."""


class MarginalError(LgmError):
    """Raised when a marginal density grid or operation is invalid."""


class FitFailed(LgmError):
    """Raised when the fit pipeline fails even after the safe retry.

    Carries the pipeline stage and the underlying diagnostic message.
    """

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__("fit failed during %s: %s" % (stage, message))


class ConfigNotStored(LgmError):
    """Raised when sampling needs per-point factors that were not kept."""
