"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`BifpError`,
so the CLI can report ``type(exc).__name__`` as a machine-parsable class.
"""


class BifpError(Exception):
    pass


# partitioning / data
class ClipTooShort(BifpError):
    pass


class EmptyPartition(BifpError):
    pass


class DatasetError(BifpError):
    pass


class DatasetEmpty(DatasetError):
    pass


# augmentation
class IncompatiblePolicy(BifpError):
    pass


# encoders
class ShapeMismatch(BifpError):
    pass


class EmptySequence(BifpError):
    pass


# contrastive
class ZeroVector(BifpError):
    pass


class BatchTooSmall(BifpError):
    pass


class MissingPositive(BifpError):
    pass


class ModeMismatch(BifpError):
    pass


class VariantRequiresBlocks(BifpError):
    pass


# training / checkpoints
class NonFiniteLoss(BifpError):
    pass


class CheckpointError(BifpError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


# evaluation
class HeadShapeMismatch(BifpError):
    pass


class UnknownFreezePoint(BifpError):
    pass


class TooFewBlocks(BifpError):
    pass


# synthetic data
class SpecTooSmall(BifpError):
    pass


# cli
class ConfigError(BifpError):
    pass
