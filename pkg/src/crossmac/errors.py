"""Exception types raised across the simulator."""


class CrossmacError(Exception):
    """Base class for simulator errors."""


class PastTime(CrossmacError):
    """Attempt to schedule an event before the current clock."""


class HandlerPanic(CrossmacError):
    """An event handler raised; carries the failing event's identity."""

    def __init__(self, message: str, tick: int, seq: int, target: str):
        super().__init__(message)
        self.tick = tick
        self.seq = seq
        self.target = target


class BelowReferenceDistance(CrossmacError):
    """Path-loss query below the model's reference distance."""


class RadioBusy(CrossmacError):
    """A node tried to transmit while its radio was already transmitting."""


class UnknownSignal(CrossmacError):
    """SINR query for a signal the channel does not know."""


class IllegalTransition(CrossmacError):
    """MAC state machine received an event it cannot handle; harness bug."""


class InvalidScenario(CrossmacError):
    """Scenario failed validation; ``problems`` lists field-level diagnostics."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.problems))


class MixedScenarios(CrossmacError):
    """Aggregation refused because run results came from different scenarios."""


class ZeroBaseline(CrossmacError):
    """Gain computation against a zero-valued baseline mean."""
