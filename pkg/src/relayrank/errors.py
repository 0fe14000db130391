"""Exception hierarchy. Rejections that are part of normal operation
(admission refused, cache miss) are values, not exceptions."""


class RelayError(Exception):
    """Base class for all library errors."""


class ConfigError(RelayError, ValueError):
    pass


class ShapeError(RelayError, ValueError):
    pass


class StaleCacheError(RelayError):
    pass


class LifecycleError(RelayError):
    """Illegal prefix-cache state transition."""


class AccountingError(RelayError):
    """Live-cache bookkeeping went out of sync (double release, unknown key)."""


class PoolError(RelayError):
    pass


class NoCapacityError(RelayError):
    pass


class ProtocolError(RelayError, ValueError):
    pass


class OversizeError(RelayError):
    pass


class WindowFullError(RelayError):
    """Only unexpired live caches remain; nothing may be evicted."""


class InvariantViolation(RelayError):
    """Raised by the simulator auditor; carries the offending trace record."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record
