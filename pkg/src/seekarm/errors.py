"""Exception types shared across the toolkit."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its documented contract."""


class OutOfWorkspaceError(ContractViolation):
    """A commanded keypoint lies outside the arm's workspace."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite numbers are required."""


class DegenerateCovarianceError(NumericError):
    """A covariance matrix could not be factorized even after jitter."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupted or incompatible with the configuration."""


class ConfigError(ValueError):
    """A configuration document failed validation.

    ``path`` names the offending field as a dotted path, e.g. ``ppo.gamma``.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class OptimizationAborted(RuntimeError):
    """Keypoint search cannot continue (e.g. every candidate failed)."""
