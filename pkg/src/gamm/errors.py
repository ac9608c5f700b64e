"""Exception hierarchy shared by every gamm module."""


class GammError(Exception):
    """Base class for all errors raised by gamm."""


class GraphFormatError(GammError, ValueError):
    """A dataset directory or graph construction is malformed."""


class GraphError(GammError, ValueError):
    """A graph-level computation is undefined for the given graph."""


class SpecError(GammError, ValueError):
    """A mechanism specification is invalid for the target graph."""


class UnsupportedMechanismError(SpecError):
    """The requested mechanism cannot be sampled under a fully observed topology."""


class MaskFormatError(GammError, ValueError):
    """A serialized mask file is malformed."""


class MetricError(GammError, ValueError):
    """A reconstruction metric is undefined (e.g. nothing was masked)."""


class ExternalImputerError(GammError, RuntimeError):
    """An external imputation plugin failed or violated the exchange protocol."""


class ConfigError(GammError, ValueError):
    """An experiment configuration failed validation."""
