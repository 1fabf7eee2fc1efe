"""Controller-side acknowledgment tracking and gain lookup."""

import numpy as np
import pytest

from holdlqg import (
    ControllerState,
    DelayPmf,
    ProtocolError,
    ScheduleError,
    control,
    observe,
    on_ack,
    riccati_reference,
    synthesize,
)

from _utils import scalar_model, scalar_pmf, two_state_model


def drive(schedule, steps, x0):
    """Run the controller with no acknowledgments at all."""
    state = ControllerState.initial(x0)
    vs = []
    for _ in range(steps):
        v, state = control(state, schedule)
        vs.append(v)
    return vs, state


class TestOnAck:
    def state(self, t=4, tau=1):
        pending = tuple(np.array([float(10 + j)]) for j in range(t - 1, tau - 1, -1))
        return ControllerState(t=t, tau=tau, pending=pending, x=np.zeros(1))

    def test_empty_ack_is_identity(self):
        s = self.state()
        assert on_ack(s, set()) is s

    def test_obsolete_ack_discarded(self):
        s = self.state(tau=1)
        s2 = on_ack(s, {0})
        assert s2.tau == 1
        assert s2.pending == s.pending

    def test_newer_ack_truncates_pending(self):
        s = self.state(t=4, tau=1)
        s2 = on_ack(s, {0, 3})
        assert s2.tau == 3
        assert len(s2.pending) == 1  # just v_3
        assert s2.pending[0].item() == 13.0

    def test_never_sent_timestamp_rejected(self):
        s = self.state(t=4)
        with pytest.raises(ProtocolError):
            on_ack(s, {4})
        with pytest.raises(ProtocolError):
            on_ack(s, {-2})

    def test_tau_monotone_under_random_ack_streams(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            state = ControllerState.initial(np.zeros(1))
            t_max = 12
            taus = [state.tau]
            for t in range(t_max):
                state = ControllerState(
                    t=t + 1, tau=state.tau,
                    pending=(np.zeros(1),) + state.pending, x=state.x,
                )
                size = int(rng.integers(0, min(3, t + 2)))
                acked = set(int(a) for a in rng.choice(t + 1, size=size, replace=False))
                state = on_ack(state, acked)
                taus.append(state.tau)
                state = ControllerState(
                    t=state.t, tau=state.tau,
                    pending=state.pending[: state.expected_pending], x=state.x,
                )
            assert all(a <= b for a, b in zip(taus, taus[1:]))


class TestControl:
    def test_zero_delay_reduces_to_state_feedback(self):
        model = two_state_model(N=3)
        sched = synthesize(model, DelayPmf.zero_delay())
        ric = riccati_reference(model)
        state = ControllerState.initial(np.array([1.0, -0.5]))
        for t in range(model.N + 1):
            if t > 0:
                state = on_ack(state, {t - 1})  # zero delay: instant ack
            v, state = control(state, sched)
            assert np.abs(v + ric.gains[t] @ state.x).max() <= 1e-9
            state = observe(state, model.A @ state.x + model.B @ v)

    def test_terminal_stage_reference_value(self):
        model = scalar_model(N=3)
        sched = synthesize(model, scalar_pmf())
        state = ControllerState(
            t=3, tau=2, pending=(np.array([0.7]),), x=np.array([1.0])
        )
        v, _ = control(state, sched)
        assert v.item() == pytest.approx(-0.6, abs=1e-12)

    def test_total_loss_emits_zero(self):
        model = scalar_model(N=2)
        sched = synthesize(model, DelayPmf.total_loss())
        vs, _ = drive(sched, 3, np.array([2.0]))
        assert all(v.item() == 0.0 for v in vs)

    def test_pending_is_appended_and_width_checked(self):
        model = scalar_model(N=3)
        sched = synthesize(model, scalar_pmf())
        state = ControllerState.initial(np.array([1.0]))
        v, state = control(state, sched)
        assert state.t == 1 and len(state.pending) == 1
        corrupted = ControllerState(t=state.t, tau=state.tau, pending=(), x=state.x)
        with pytest.raises(ScheduleError):
            control(corrupted, sched)

    def test_beyond_horizon_rejected(self):
        model = scalar_model(N=1)
        sched = synthesize(model, scalar_pmf())
        state = ControllerState.initial(np.array([1.0]))
        _, state = control(state, sched)
        _, state = control(state, sched)
        with pytest.raises(ScheduleError):
            control(state, sched)

    def test_replay_is_bit_identical(self):
        model = scalar_model(N=3)
        sched = synthesize(model, scalar_pmf())

        def run():
            state = ControllerState.initial(np.array([1.0]))
            out = []
            for t in range(model.N + 1):
                if t == 2:
                    state = on_ack(state, {0})
                v, state = control(state, sched)
                out.append(v.item())
                state = observe(state, state.x * 1.1)
            return out

        assert run() == run()
