"""Exception types raised across the package."""


class AvsslError(Exception):
    """Base class for all package errors."""


class InputTooShort(AvsslError):
    pass


class EmptyPool(AvsslError):
    pass


class ZeroPowerSignal(AvsslError):
    pass


class TooShortToJumble(AvsslError):
    pass


class ShapeError(AvsslError):
    pass


class AlignmentError(AvsslError):
    pass


class GroupTooSmall(AvsslError):
    pass


class BatchTooSmall(AvsslError):
    pass


class InvalidWeight(AvsslError):
    pass


class TooShort(AvsslError):
    pass


class LabelError(AvsslError):
    pass


class DegenerateTest(AvsslError):
    pass


class MissingModality(AvsslError):
    pass


class CheckpointError(AvsslError):
    pass


class MissingLabels(AvsslError):
    pass


class ModeViolation(AvsslError):
    pass


class SplitError(AvsslError):
    pass


class EmptySubset(AvsslError):
    pass


class TrainingDiverged(AvsslError):
    """Raised when a loss becomes non-finite or spikes during training."""


class ConfigError(AvsslError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
