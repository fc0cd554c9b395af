"""Exception hierarchy shared by all calibration stages."""


class CalibrationError(Exception):
    """Base class for every error raised by planecalib."""


class NonPositiveDepth(CalibrationError):
    pass


class UndistortDivergence(CalibrationError):
    def __init__(self, message, pixel=None):
        super().__init__(message)
        self.pixel = pixel


class InvalidIntrinsics(CalibrationError, ValueError):
    pass


class EmptyCloud(CalibrationError, ValueError):
    pass


class DegenerateNeighborhood(CalibrationError):
    pass


class InsufficientOverlap(CalibrationError):
    pass


class InsufficientParallax(CalibrationError):
    pass


class NegativeDepth(CalibrationError):
    pass


class DegenerateMotion(CalibrationError):
    pass


class NoValidPairs(CalibrationError):
    pass


class ZeroVariance(CalibrationError):
    pass


class DegenerateProblem(CalibrationError):
    """Point-to-plane constraints leave a direction unobservable."""

    def __init__(self, message, weak_direction=None, ratio=None):
        super().__init__(message)
        self.weak_direction = weak_direction
        self.ratio = ratio


class NumericalFailure(CalibrationError):
    pass


class SingularNormalEquations(CalibrationError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class InvisibleScene(CalibrationError):
    pass


class SceneSpecError(CalibrationError, ValueError):
    pass


class ParseError(CalibrationError):
    pass


class UnsupportedLayout(CalibrationError):
    pass


class SchemaError(CalibrationError):
    """Structured-text validation failure; ``violations`` lists every problem found."""

    def __init__(self, violations, source=None):
        self.violations = list(violations)
        self.source = source
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(self.violations))
