"""Exception taxonomy shared across the package.

Every error raised on a contract violation derives from GlabError so the
command line front end can catch one base class and exit cleanly.
"""


class GlabError(Exception):
    """Base class for all package errors."""


class InvalidSize(GlabError):
    """A size argument is out of range (nonpositive, too large, ...)."""


class ShapeMismatch(GlabError):
    """An array does not have the shape the operation requires."""


class InvalidPermutation(GlabError):
    """An index vector is not a permutation of 0..n-1."""


class NotPowerOfTwo(GlabError):
    """The token count must be a power of two for this transform."""


class DecompositionFailed(GlabError):
    """A matrix factorization produced non-finite output twice in a row."""


class InvalidConfig(GlabError):
    """A configuration value or key violates the documented schema."""


class InvalidStep(GlabError):
    """A diffusion timestep is outside the valid range."""


class InvalidCondition(GlabError):
    """A class index is outside the embedding table."""


class InvalidHook(GlabError):
    """A hook references a layer or site that does not exist."""


class EmptyDataset(GlabError):
    """A dataset has no samples."""


class IoError(GlabError):
    """A file could not be read, parsed, or written."""


class UnsupportedMethod(GlabError):
    """The requested guidance method cannot run on this model."""


class UsageError(GlabError):
    """Bad command line arguments."""
