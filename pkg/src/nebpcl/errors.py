"""Exception types raised across the package."""


class NebpError(Exception):
    """Base class for all package errors."""


class ConfigError(NebpError, ValueError):
    """Invalid or unparsable configuration."""


class EmptyArea(ConfigError):
    pass


class NotNormalized(NebpError, ValueError):
    pass


class BadCovariance(NebpError, ValueError):
    pass


class ParticleCountMismatch(NebpError, ValueError):
    pass


class DegenerateMessage(NebpError, ArithmeticError):
    """All particle weights of an agent collapsed to zero (or became non-finite)."""

    def __init__(self, message="degenerate particle weights", agent=None, step=None):
        self.agent = agent
        self.step = step
        where = []
        if agent is not None:
            where.append(f"agent={agent}")
        if step is not None:
            where.append(f"step={step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ShapeMismatch(NebpError, ValueError):
    pass


class NotScalarLoss(NebpError, ValueError):
    pass


class EmptyDataset(NebpError, ValueError):
    pass


class CheckpointIo(NebpError, OSError):
    pass


class CheckpointMismatch(NebpError, ValueError):
    pass


class EmptyRecords(NebpError, ValueError):
    pass


class SingularCovariance(NebpError, ArithmeticError):
    pass


class BadAlpha(NebpError, ValueError):
    pass


class NonFiniteLoss(NebpError, ArithmeticError):
    pass
