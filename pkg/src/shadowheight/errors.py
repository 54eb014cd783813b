"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class SpecError(ValueError):
    """Architecture description is internally inconsistent."""

    def __init__(self, block, message):
        super().__init__(f"block {block!r}: {message}")
        self.block = block


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


class GenerationError(RuntimeError):
    pass


class DataError(Exception):
    """Unreadable or inconsistent input data."""
