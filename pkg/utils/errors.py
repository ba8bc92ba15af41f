"""
Error categories for the DLL laboratory
Every error raised on purpose derives from DllError and carries the exit code
the command-line surface reports for its category.
"""


class DllError(Exception):
    """Base class for all deliberate failures"""
    exit_code = 1
    category = 'error'


class ConfigurationError(DllError):
    """Bad configuration: unknown keys, invalid ranges, unsupported grid sizes"""
    exit_code = 2
    category = 'config'


class UsageError(DllError):
    """API misuse: shape mismatches, backward through unrecorded values"""
    exit_code = 2
    category = 'usage'


class DigestMismatchError(DllError):
    """Upstream artifact digests disagree"""
    exit_code = 3
    category = 'digest'


class NumericsError(DllError):
    """Non-finite values or divergence during a computation"""
    exit_code = 4
    category = 'numerics'


class IllConditionedBasisError(NumericsError):
    """Gram matrix of a basis is too ill-conditioned to project onto"""


class FactorizationError(NumericsError):
    """Covariance factorization of a random-field spec failed"""


class PrerequisiteError(DllError):
    """A required upstream artifact is missing or of the wrong kind"""
    exit_code = 5
    category = 'prerequisite'


class ArtifactFormatError(DllError):
    """A dataset or checkpoint file is malformed"""
    exit_code = 6
    category = 'format'
