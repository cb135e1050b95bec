"""Exception types shared across the package."""


class NoStoppingTime(RuntimeError):
    """The worst-case output velocity never reaches zero within the scan horizon.

    Signals that the available actuation cannot bring the worst-case output
    trajectory to rest; surfaced instead of being handled silently.
    """

    def __init__(self, message, t=None, y_dot=None):
        super().__init__(message)
        self.t = t
        self.y_dot = y_dot


class Infeasible(RuntimeError):
    """The safety QP has an empty feasible set at the current step."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ConfigInfeasible(ValueError):
    """A filter configuration is structurally invalid (e.g. nonpositive
    acceleration bound: the input limit is too small for the construction)."""


class SimulationFailed(RuntimeError):
    """A closed-loop run aborted before its configured duration."""

    def __init__(self, cause, step_index, t, trace=None):
        super().__init__(f"run failed at step {step_index} (t={t:.4f} s): {cause}")
        self.cause = cause
        self.step_index = step_index
        self.t = t
        self.trace = trace
