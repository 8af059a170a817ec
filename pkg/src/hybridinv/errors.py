"""Exception hierarchy shared by all modules."""


class HybridInvError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(HybridInvError, ValueError):
    pass


class ShapeMismatch(HybridInvError, ValueError):
    pass


class MaxIterationsExceeded(HybridInvError, ArithmeticError):
    """Active-set iteration cap hit; ``solution`` holds the partial iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class EmptyGrid(HybridInvError, ValueError):
    pass


class ProtocolMismatch(HybridInvError, ValueError):
    pass


class InvalidSpec(HybridInvError, ValueError):
    pass


class UnknownLayerTag(HybridInvError, KeyError):
    pass


class EmptyDataset(HybridInvError, ValueError):
    pass


class ConfigError(HybridInvError, ValueError):
    pass


class MissingArtifact(HybridInvError, FileNotFoundError):
    pass


class Misalignment(HybridInvError, ValueError):
    pass
