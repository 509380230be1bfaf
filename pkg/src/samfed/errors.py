"""Exception types raised across the package."""


class SamFedError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SamFedError, ValueError):
    pass


class NonFinite(SamFedError, FloatingPointError):
    pass


class NonScalarLoss(SamFedError, ValueError):
    pass


class TapeReuse(SamFedError, RuntimeError):
    pass


class InvalidConfig(SamFedError, ValueError):
    pass


class UnknownLayer(SamFedError, KeyError):
    pass


class RankTooLarge(SamFedError, ValueError):
    pass


class EmptyDataset(SamFedError, ValueError):
    pass


class EmptyBatch(SamFedError, ValueError):
    pass


class LabelOutOfRange(SamFedError, ValueError):
    pass


class ClassCountMismatch(SamFedError, ValueError):
    pass


class FingerprintMismatch(SamFedError, ValueError):
    pass


class ZeroWeight(SamFedError, ValueError):
    pass


class MissingSoftLabels(SamFedError, ValueError):
    pass


class NotInitialized(SamFedError, RuntimeError):
    pass


class InsufficientData(SamFedError, ValueError):
    pass


class InvalidSize(SamFedError, ValueError):
    pass


class MissingPair(SamFedError, FileNotFoundError):
    pass


class MalformedPgm(SamFedError, ValueError):
    pass


class BadCheckpoint(SamFedError, ValueError):
    pass


class ConfigError(SamFedError, ValueError):
    pass


class EmptyPublicSet(SamFedError, ValueError):
    pass
