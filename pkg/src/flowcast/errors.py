"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent model/run configuration."""


class InvalidGraphError(ValueError):
    """Raised when a static adjacency matrix cannot yield a valid Laplacian."""


class ParseError(ValueError):
    """Raised on malformed input files; message carries line/column context."""


class InsufficientDataError(ValueError):
    """Raised when a series segment is too short to produce a single window."""


class MissingGradientError(RuntimeError):
    """Raised when an optimizer step finds a parameter without a gradient."""

    def __init__(self, name: str):
        super().__init__(f"parameter '{name}' has no gradient; run backward() first")
        self.name = name


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN/Inf."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
