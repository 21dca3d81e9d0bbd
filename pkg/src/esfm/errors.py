"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``DataError`` (bad input, exit 3) and ``NumericalError`` (exit 4).
"""


class ESFMError(Exception):
    pass


class DataError(ESFMError):
    pass


class NumericalError(ESFMError):
    pass


# measurements
class DuplicateObservation(DataError):
    def __init__(self, i, j):
        super().__init__(f"duplicate observation for camera {i}, track {j}")
        self.camera, self.track = i, j


class IndexOutOfRange(DataError):
    pass


class TrackTooShort(DataError):
    def __init__(self, j, count=None):
        msg = f"track {j} has fewer than 2 observations"
        if count is not None:
            msg += f" ({count})"
        super().__init__(msg)
        self.track = j


class EmptyCamera(DataError):
    def __init__(self, i):
        super().__init__(f"camera {i} observes no tracks")
        self.camera = i


class SingularIntrinsics(DataError):
    pass


class NonUpperTriangular(DataError):
    pass


# geometry
class DegenerateQuaternion(NumericalError):
    pass


class SingularCameraBlock(NumericalError):
    pass


class TooFewViews(DataError):
    pass


class PointAtInfinity(NumericalError):
    pass


class DegenerateSystem(NumericalError):
    pass


class TooFewPoints(DataError):
    pass


class DegenerateConfiguration(NumericalError):
    pass


class MissingGroundTruth(DataError):
    pass


# model / autograd
class InvalidWidths(DataError):
    pass


class WidthMismatch(DataError):
    pass


class IncompleteTape(ESFMError):
    pass


class NonSmoothPoint(NumericalError):
    pass


# optimisation
class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, value, stage="optimize"):
        super().__init__(f"{stage}: non-finite loss {value!r} at epoch {epoch}")
        self.epoch, self.value, self.stage = epoch, value, stage


class ShapeMismatch(DataError):
    pass


class EmptySubset(DataError):
    pass


class ModeMismatch(DataError):
    pass


class DisconnectedScene(DataError):
    pass


class SingularNormalEquations(NumericalError):
    pass


# io
class ParseError(DataError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class HeaderMismatch(DataError):
    pass


class CountMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class InfeasibleConfig(DataError):
    pass
