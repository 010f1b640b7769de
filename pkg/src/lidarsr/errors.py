"""Exception hierarchy shared by every module."""


class LidarSRError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(LidarSRError, ValueError):
    """An input point or value lies outside the domain of an operation."""


class ConfigError(LidarSRError, ValueError):
    """A configuration value violates its documented range."""


class ShapeError(LidarSRError, ValueError):
    """Operand dimensions are inconsistent."""


class FormatError(LidarSRError, ValueError):
    """A file is truncated, corrupted or otherwise unreadable."""


class UnsupportedFormatError(FormatError):
    """A file is well formed but uses a layout we do not handle."""


class EmptyDomainError(LidarSRError, ValueError):
    """A metric was asked to average over zero pixels."""


class PipelineError(LidarSRError, RuntimeError):
    """A pipeline stage failed and the run was shut down."""
