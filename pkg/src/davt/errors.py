"""Exception hierarchy shared across the package."""


class DavtError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DavtError):
    """Tensor shapes or extents do not fit the operation."""


class GradientError(DavtError):
    """Misuse of the gradient tape (non-scalar loss, double backward, ...)."""


class ConfigError(DavtError):
    """A configuration value is out of range or otherwise invalid."""


class DataError(DavtError):
    """Dataset files or manifests are malformed."""


class PpmError(DataError):
    """A PPM file could not be parsed or written."""


class CheckpointError(DavtError):
    """A checkpoint file is unreadable, corrupt, or from another version."""
