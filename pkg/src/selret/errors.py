"""Exception types raised across the toolkit.

Every failure mode that callers are expected to handle gets its own class so
that CLI exit codes and tests can discriminate without string matching.
"""


class SelretError(Exception):
    """Base class for all toolkit errors."""


# ---- volume / mask / manifest I/O ----

class MissingHeader(SelretError):
    pass


class MalformedHeader(SelretError):
    pass


class SizeMismatch(SelretError):
    pass


class NonFiniteData(SelretError):
    pass


class NonBinaryLabel(SelretError):
    pass


class DuplicateCaseId(SelretError):
    pass


class InconsistentAnnotation(SelretError):
    pass


class IoFailure(SelretError):
    pass


# ---- preprocessing ----

class InvalidSpacing(SelretError):
    pass


class EmptyForeground(SelretError):
    pass


class ZeroStd(SelretError):
    pass


# ---- metrics ----

class DimsMismatch(SelretError):
    pass


class EmptyMask(SelretError):
    pass


class GeometryMismatch(SelretError):
    pass


# ---- selection / scoring ----

class NoEarlyMasks(SelretError):
    pass


# ---- augmentation / ensembling ----

class EmptyEnsemble(SelretError):
    pass


# ---- segmenter bridge ----

class LaunchFailure(SelretError):
    pass


class ProtocolViolation(SelretError):
    pass


class TrainerFailure(SelretError):
    pass


class UnknownCheckpoint(SelretError):
    pass


class MissingGroundTruth(SelretError):
    pass


class EmptyTrainingSet(SelretError):
    pass


# ---- phantom generation ----

class DimsTooSmall(SelretError):
    pass


# ---- pipeline state ----

class StateCorruption(SelretError):
    pass


class EmptyState(SelretError):
    pass


class ConfigError(SelretError):
    pass
