"""Exception types shared across the package."""


class ShiftSimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ShiftSimError):
    """A configuration is internally inconsistent (bad shapes, bad degrees)."""


class UnsupportedConfigError(ConfigError):
    """A configuration is well formed but outside the supported envelope."""


class NumericsError(ShiftSimError):
    """A kernel produced a non-finite value (overflow or invalid operand)."""


class ProtocolError(ShiftSimError):
    """A collective was used out of rendezvous, deadlocked, or was aborted."""


class CapacityError(ShiftSimError):
    """A sequence or cache exceeded the configured maximum context length."""


class VerificationError(ShiftSimError):
    """An equivalence or invariance check failed."""
