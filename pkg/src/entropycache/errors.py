"""Exception types raised across the package.

Every error carries a stable class name so callers (and the CLI) can match on
it; the names double as the error codes printed by the harness.
"""


class EntropyCacheError(Exception):
    """Base class for all package errors."""


# mathcore
class NonFiniteLogits(EntropyCacheError, ValueError):
    pass


class ZeroNormVector(EntropyCacheError, ValueError):
    pass


class OddRotaryDim(EntropyCacheError, ValueError):
    pass


# model
class ConfigTooLarge(EntropyCacheError, ValueError):
    pass


class TokenOutOfRange(EntropyCacheError, ValueError):
    pass


class ColdCache(EntropyCacheError, RuntimeError):
    pass


class OutputsNotRecomputed(EntropyCacheError, ValueError):
    pass


# decoding
class GenerationComplete(EntropyCacheError, RuntimeError):
    pass


# policy
class NoDecodedTokens(EntropyCacheError, ValueError):
    pass


class DoubleDecode(EntropyCacheError, ValueError):
    pass


# metrics
class DegenerateRanks(EntropyCacheError, ValueError):
    pass


class DegenerateCovariance(EntropyCacheError, ValueError):
    pass


# weightsio
class WriteFailed(EntropyCacheError, OSError):
    pass


class ChecksumMismatch(EntropyCacheError, ValueError):
    pass


class ConfigMismatch(EntropyCacheError, ValueError):
    pass


class NotAWeightsFile(EntropyCacheError, ValueError):
    pass


class Truncated(EntropyCacheError, ValueError):
    pass


# harness
class NoBaselineReference(EntropyCacheError, ValueError):
    pass
