"""Exception types shared across the package."""


class HoldLqgError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(HoldLqgError, ValueError):
    """Invalid model, pmf, or configuration data."""


class SequencingError(HoldLqgError, RuntimeError):
    """A backward-recursion quantity was requested before its stage ran."""


class SynthesisError(HoldLqgError, RuntimeError):
    """Gain synthesis failed (for example an indefinite stage Hessian)."""


class ScheduleError(HoldLqgError, LookupError):
    """A gain-schedule entry for a requested (t, tau) pair is missing."""


class ProtocolError(HoldLqgError, ValueError):
    """An acknowledgment referenced a control signal that was never sent."""


class EnumerationBudgetError(HoldLqgError, RuntimeError):
    """Exact enumeration would exceed the configured realization budget."""


class CoverageError(HoldLqgError, ValueError):
    """Gain comparison inputs do not cover the same (t, tau) pairs."""
