"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad dimensions, misaligned capacities, unknown names)."""


class AllocationError(RuntimeError):
    """A tier pool cannot satisfy an allocation request."""

    def __init__(self, message: str, requested_bytes: int = 0, available_bytes: int = 0):
        super().__init__(message)
        self.requested_bytes = requested_bytes
        self.available_bytes = available_bytes


class MoveError(RuntimeError):
    """A page move cannot be carried out (full destination, tier policy, mid-move)."""


class InfeasibleScheduleError(RuntimeError):
    """No task schedule fits the GPU budget; names the first offending layer."""

    def __init__(self, layer: int, needed_bytes: int, available_bytes: int):
        super().__init__(
            f"layer {layer} cannot be scheduled: needs {needed_bytes} bytes, "
            f"only {available_bytes} available under the budget"
        )
        self.layer = layer
        self.needed_bytes = needed_bytes
        self.available_bytes = available_bytes


class SimulationError(RuntimeError):
    """Malformed schedule detected during discrete-event replay."""


class ProtocolError(RuntimeError):
    """Violation of the lock-free update protocol (shape mismatch, bad layer)."""
