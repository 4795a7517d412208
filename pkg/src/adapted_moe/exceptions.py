"""Exception hierarchy shared across the package."""


class AdaptedMoEError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AdaptedMoEError, ValueError):
    """Tensor shapes do not agree."""


class DegenerateVectorError(AdaptedMoEError, ValueError):
    """A vector is too close to zero to be normalized."""


class TensorFileError(AdaptedMoEError):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class ManifestError(AdaptedMoEError):
    """Base class for manifest problems."""


class MalformedManifestError(ManifestError):
    """Manifest is not valid JSON or lacks required structure."""


class ManifestValidationError(ManifestError):
    """A sample violates the split constraints."""


class MissingFileError(ManifestError, FileNotFoundError):
    """A file referenced by a manifest does not exist."""


class EmptyExpertError(AdaptedMoEError):
    """An expert has no routed samples to train on."""


class CheckpointError(AdaptedMoEError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptSectionError(CheckpointError):
    pass
