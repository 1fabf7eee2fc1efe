"""Online controller: acknowledgment tracking and gain-schedule lookup.

The controller keeps the stacked information vector the synthesized
feedback acts on: every control sent since (and including) the last
acknowledged one, plus the latest observed state.  Acknowledgments
arrive as sets of send times (several packets can reach the actuator in
one sample); obsolete acknowledgments are discarded, so the tracked
timestamp ``tau`` is nondecreasing.

States are immutable; each operation returns a new state, which makes
replays trivially reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import ProtocolError, ScheduleError
from .gain_synth import GainSchedule


@dataclass(frozen=True)
class ControllerState:
    """Acknowledgment state just before computing the control at time t.

    ``pending`` holds v_{t-1} .. v_{max(tau, 0)} newest first (empty at
    t = 0, where only the virtual, already-acknowledged zero control
    predates the horizon).  ``tau`` is the send time of the most recently
    acknowledged applied signal, -1 if nothing has ever arrived.
    """

    t: int
    tau: int
    pending: tuple[np.ndarray, ...]
    x: np.ndarray

    @classmethod
    def initial(cls, x0) -> "ControllerState":
        return cls(t=0, tau=-1, pending=(), x=np.asarray(x0, dtype=float))

    @property
    def expected_pending(self) -> int:
        return self.t - self.tau - (1 if self.tau == -1 else 0)


def on_ack(state: ControllerState, acked: Iterable[int]) -> ControllerState:
    """Fold a set of acknowledged send times into the controller state.

    Send times must refer to packets already sent (0 .. t-1); anything
    else raises :class:`ProtocolError`.  Acknowledgments older than the
    current ``tau`` are obsolete and ignored.
    """
    acked = set(int(a) for a in acked)
    if not acked:
        return state
    bad = [a for a in acked if a < 0 or a >= state.t]
    if bad:
        raise ProtocolError(f"acknowledgment for never-sent timestamp(s) {sorted(bad)}")
    tau_new = max(state.tau, max(acked))
    if tau_new == state.tau:
        return state
    return replace(state, tau=tau_new, pending=state.pending[: state.t - tau_new])


def control(
    state: ControllerState, schedule: GainSchedule
) -> tuple[np.ndarray, ControllerState]:
    """Compute v_t from the schedule and append it to the pending stack."""
    t, tau = state.t, state.tau
    if t > schedule.horizon:
        raise ScheduleError(f"controller time {t} beyond schedule horizon {schedule.horizon}")
    row = schedule.row(t, tau)
    if len(state.pending) != state.expected_pending:
        raise ScheduleError(
            f"pending stack holds {len(state.pending)} controls, expected {state.expected_pending}"
        )
    zeta = np.concatenate([*state.pending, state.x]) if state.pending else state.x
    if row.shape[1] != zeta.shape[0]:
        raise ScheduleError(
            f"gain row width {row.shape[1]} does not match stacked vector {zeta.shape[0]}"
        )
    v = row @ zeta
    new = replace(state, t=t + 1, pending=(v,) + state.pending)
    return v, new


def observe(state: ControllerState, x) -> ControllerState:
    """Record the measured plant state (full observation)."""
    return replace(state, x=np.asarray(x, dtype=float))
