"""Finite-horizon LQG control over links with random delays and losses.

Hold-input actuation, acknowledgment-driven feedback synthesis, closed
loop simulation with Monte Carlo evaluation, and an exact enumeration
oracle for desk-scale certification.
"""

from .delay_model import DelayPmf
from .errors import (
    CoverageError,
    EnumerationBudgetError,
    HoldLqgError,
    ProtocolError,
    ScheduleError,
    SequencingError,
    SynthesisError,
    ValidationError,
)
from .gain_synth import (
    GainSchedule,
    RiccatiSolution,
    StageCache,
    SystemModel,
    riccati_reference,
    synthesize,
)
from .linform import ControlLinForm, StackedGainRow, axpy, evaluate, to_stacked_row
from .netsim import (
    PolicyStats,
    SchedulePolicy,
    SimTrace,
    StateFeedbackPolicy,
    make_policy,
    monte_carlo,
    run_batch,
    run_episode,
    sample_applied_ages,
)
from .oracle import (
    OracleResult,
    compare_gains,
    enumerate_realizations,
    exact_cost,
    optimal_policy_dp,
    stationarity_certificate,
)
from .runtime import ControllerState, control, observe, on_ack

__version__ = "0.1.0"

__all__ = [
    "ControlLinForm",
    "ControllerState",
    "CoverageError",
    "DelayPmf",
    "EnumerationBudgetError",
    "GainSchedule",
    "HoldLqgError",
    "OracleResult",
    "PolicyStats",
    "ProtocolError",
    "RiccatiSolution",
    "ScheduleError",
    "SchedulePolicy",
    "SequencingError",
    "SimTrace",
    "StackedGainRow",
    "StageCache",
    "StateFeedbackPolicy",
    "SynthesisError",
    "SystemModel",
    "ValidationError",
    "axpy",
    "compare_gains",
    "control",
    "enumerate_realizations",
    "evaluate",
    "exact_cost",
    "make_policy",
    "monte_carlo",
    "observe",
    "on_ack",
    "optimal_policy_dp",
    "riccati_reference",
    "run_batch",
    "run_episode",
    "sample_applied_ages",
    "stationarity_certificate",
    "synthesize",
    "to_stacked_row",
]
