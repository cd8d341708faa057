"""Exception types shared across the package."""


class DilocoError(Exception):
    """Base class for all package errors."""


class ShapeError(DilocoError, ValueError):
    """Vectors or buffers with incompatible layouts or lengths."""


class ConfigError(DilocoError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class NumericError(DilocoError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CollectiveError(DilocoError):
    """A collective round could not complete."""


class QuorumError(CollectiveError):
    """Fewer live contributors than the configured quorum."""


class ExcludedError(CollectiveError):
    """This peer was left out of a committed round and must re-join."""


class JoinError(CollectiveError):
    """Rendezvous failed; retriable."""
