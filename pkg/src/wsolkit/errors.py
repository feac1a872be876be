"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so new error conditions should
reuse one of the classes below instead of raising bare exceptions.
"""


class ShapeError(ValueError):
    """Tensor extents are invalid or incompatible for an operation."""


class NumericError(ValueError):
    """Non-finite values where finite input is required."""


class GraphStateError(RuntimeError):
    """Differentiation graph used out of order (e.g. backward twice)."""


class OracleError(RuntimeError):
    """A verification harness detected an unusable target function."""


class DataError(ValueError):
    """Inconsistent evaluation data (missing ground truth, bad ids)."""


class FormatError(ValueError):
    """Malformed binary or text artifact (bad magic, version, layout)."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, unparsable value)."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; carries diagnostics."""

    def __init__(self, message, epoch=None, batch_index=None, last_losses=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.last_losses = last_losses
