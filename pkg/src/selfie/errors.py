"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of range, unknown, or inconsistent."""


class DataFormatError(ValueError):
    """An input file does not match its documented binary layout."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, truncated, or from a different setup."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a per-layer activation report."""

    def __init__(self, message: str, layer_report: list[tuple[str, float]] | None = None):
        super().__init__(message)
        self.layer_report = layer_report or []
