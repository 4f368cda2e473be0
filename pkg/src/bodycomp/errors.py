"""Exception hierarchy shared by all modules."""


class BodyCompError(Exception):
    """Base class for every error raised by this package."""


# ingest
class UnparseableFile(BodyCompError):
    pass


class MissingPixelSpacing(BodyCompError):
    pass


class InconsistentSliceGeometry(BodyCompError):
    pass


class NonUniformSliceSpacing(BodyCompError):
    pass


class UnsupportedDatatype(BodyCompError):
    pass


class OrientationUnresolvable(BodyCompError):
    pass


class RootNotFound(BodyCompError):
    pass


# segmentation providers
class MaskNotFound(BodyCompError):
    pass


class ShapeMismatch(BodyCompError, ValueError):
    pass


class RuntimeUnavailable(BodyCompError):
    pass


class UnknownLabel(BodyCompError):
    pass


# spine
class EmptyLevel(BodyCompError):
    pass


class EmptySlice(BodyCompError):
    pass


class EmptyMask(BodyCompError):
    pass


class CenterOutOfBounds(BodyCompError):
    pass


class RoiExceedsVolume(BodyCompError):
    pass


class EmptyRoi(BodyCompError):
    pass


# tissue
class MasksOverlap(BodyCompError):
    pass


# rendering
class FewerThanTwoCenters(BodyCompError):
    pass


class PathOutOfBounds(BodyCompError):
    pass


# phantoms / config
class SpecInfeasible(BodyCompError):
    pass


class ConfigError(BodyCompError, ValueError):
    pass
