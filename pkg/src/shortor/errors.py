"""Exception types shared across the package."""


class ShorTorError(Exception):
    """Base class for all errors raised by this package."""


class TopologyError(ShorTorError, ValueError):
    """Invalid topology configuration or malformed latency/relay file."""


class SendOnMissingLink(ShorTorError):
    """A cell was sent over a relay pair with no latency entry."""

    def __init__(self, src: int, dst: int):
        super().__init__(f"SEND_ON_MISSING_LINK: no latency for {src}->{dst}")
        self.src = src
        self.dst = dst


class HorizonExceeded(ShorTorError):
    """The event loop reached its horizon with events still pending."""

    def __init__(self, horizon_ms: float, pending: int):
        super().__init__(f"horizon {horizon_ms} ms exceeded with {pending} pending events")
        self.horizon_ms = horizon_ms
        self.pending = pending


class NoRoute(ShorTorError):
    """Every path between two relays is missing."""


class CircuitLengthError(ShorTorError, ValueError):
    """Via routing only applies to circuits of exactly three relays."""


class LoopViolation(ShorTorError):
    """A via coincides with (or is related to) a relay already on the path."""


class Exhausted(ShorTorError):
    """No eligible relay is left for some circuit position."""
