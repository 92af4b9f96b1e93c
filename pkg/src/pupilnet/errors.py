"""Exception hierarchy shared by all modules.

Everything derives from :class:`PupilnetError` so the CLI can map library
failures to exit status 1 (validation) or 2 (runtime).
"""


class PupilnetError(Exception):
    """Base class for toolkit errors."""


class ValidationError(PupilnetError, ValueError):
    """Input violates a documented precondition."""


class DegenerateInput(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class RejectedByFilter(ValidationError):
    """Fitted pupil failed the solidity/aspect outlier filter."""

    measure = ""

    def __init__(self, value: float, threshold: float = 0.5):
        self.value = float(value)
        self.threshold = threshold
        super().__init__(f"{self.measure} {self.value:.3f} < {threshold}")


class RejectedBySolidity(RejectedByFilter):
    measure = "solidity"


class RejectedByAspect(RejectedByFilter):
    measure = "aspect ratio"


class NonSquareInput(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class SingularTransform(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnsupportedOp(ValidationError):
    pass


class UnknownLabel(ValidationError):
    pass


class MissingRegion(ValidationError):
    def __init__(self, region: str):
        self.region = region
        super().__init__(f"annotation has no {region} pixels")


class TooFewSamples(ValidationError):
    pass


class GeometryViolation(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DivergenceDetected(PupilnetError, RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")


class NonMonotoneTime(ValidationError):
    pass


class NoBaseline(ValidationError):
    pass


class NoConstriction(PupilnetError):
    """Velocity threshold never crossed; carries the static metrics that were computed."""

    def __init__(self, metrics=None):
        self.metrics = metrics
        super().__init__("no constriction onset detected")
