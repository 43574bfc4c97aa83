"""Exception hierarchy shared by every floe module."""


class FloeError(Exception):
    """Base class for all floe errors."""


class EmptyInput(FloeError, ValueError):
    pass


class DegenerateVector(FloeError, ValueError):
    """A vector with zero norm was given where a direction is required."""


class ShapeMismatch(FloeError, ValueError):
    pass


class RankOutOfRange(FloeError, ValueError):
    pass


class TooFewPoints(FloeError, ValueError):
    pass


class DegenerateClustering(FloeError):
    """Silhouette is undefined because fewer than two distinct clusters exist."""


class UnknownRank(FloeError, KeyError):
    pass


class InfeasibleRank(FloeError, ValueError):
    pass


class UnknownDomain(FloeError, KeyError):
    pass


class VocabMismatch(FloeError, ValueError):
    pass


class InvalidDistribution(FloeError, ValueError):
    pass


class InvalidWeight(FloeError, ValueError):
    pass


class InferenceError(FloeError, RuntimeError):
    """The local model failed; there is no fallback below the SLM."""


class ConfigRejected(FloeError, ValueError):
    pass


class ConfigError(FloeError, ValueError):
    """A scenario or rules file failed validation."""


class FormatError(FloeError, ValueError):
    """A binary adapter file or wire frame is malformed."""
