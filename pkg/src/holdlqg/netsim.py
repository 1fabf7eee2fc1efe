"""Plant, delay/loss channel, hold-input actuator, and Monte Carlo runs.

Per-sample event order (used identically by the simulator and the exact
oracle): the controller computes and sends v_t knowing the acknowledgment
state after time t-1; packets whose delay expires at t arrive (a
zero-delay v_t arrives immediately); the actuator keeps the newest-sent
arrived control; acknowledgments for the arrivals reach the controller
instantly (they inform v_{t+1}); cost u_t'R u_t + x_t'Q x_t accrues; the
plant steps.  With this order the applied input at time t can be the
control sent at time t, matching the applied-age law of
:class:`~holdlqg.delay_model.DelayPmf`, and the controller always knows
the send time of the previously applied input.

Randomness is counter-based: every (master seed, trial index, role)
triple opens an independent, reproducible stream, so trials are
order-independent and different policies can share the exact same delay
and noise realizations (common random numbers).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .delay_model import DelayPmf
from .errors import ValidationError
from .gain_synth import GainSchedule, SystemModel, riccati_reference

LOST = -1

_ROLE_DELAY = 0
_ROLE_NOISE = 1

#: two-sided 99% normal quantile used for Monte Carlo confidence intervals
Z99 = 2.5758293035489004

BASELINE_NAMES = ("lqr-hold", "zero-input", "open-loop")


@dataclass(frozen=True)
class Packet:
    """A control payload in flight; ``delay`` is samples or LOST (-1)."""

    send_time: int
    payload: np.ndarray
    delay: int

    @property
    def arrival_time(self) -> int | None:
        return None if self.delay == LOST else self.send_time + self.delay


@dataclass(frozen=True)
class ActuatorState:
    """Held input and the send time it was sent at (-1 before anything arrives)."""

    applied: np.ndarray
    applied_send_time: int

    @classmethod
    def initial(cls, m: int) -> "ActuatorState":
        return cls(applied=np.zeros(m), applied_send_time=-1)


def actuator_step(act: ActuatorState, arrivals) -> ActuatorState:
    """Hold-input update: keep the newest-sent arrived control."""
    newest = act.applied_send_time
    payload = None
    for pkt in arrivals:
        if pkt.send_time > newest:
            newest = pkt.send_time
            payload = pkt.payload
    if payload is None:
        return act
    return ActuatorState(applied=np.asarray(payload, dtype=float), applied_send_time=newest)


def plant_step(x, u, w=None, *, A, B) -> np.ndarray:
    """x_{k+1} = A x_k + B u_k + w_k."""
    out = A @ x + B @ u
    if w is not None:
        out = out + w
    return out


# -- policies -------------------------------------------------------------


class SchedulePolicy:
    """Acknowledgment-aware policy driven by a synthesized gain schedule."""

    actuator = "hold"

    def __init__(self, schedule: GainSchedule, name: str = "optimal"):
        self.schedule = schedule
        self.name = name

    def act_batch(self, t, X, tau_prev, buf):
        T = X.shape[0]
        v = np.empty((T, self.schedule.m))
        for tau in np.unique(tau_prev):
            rows = np.where(tau_prev == tau)[0]
            gain = self.schedule.row(t, int(tau))
            lo = max(int(tau), 0)
            if t > lo:
                pend = buf[rows, lo:t][:, ::-1, :].reshape(rows.size, -1)
                zeta = np.hstack([pend, X[rows]])
            else:
                zeta = X[rows]
            v[rows] = zeta @ gain.T
        return v


class StateFeedbackPolicy:
    """Time-varying state feedback v_t = -gains[t] x_t (network-oblivious)."""

    def __init__(self, gains: np.ndarray, name: str, actuator: str = "hold"):
        self.gains = np.asarray(gains, dtype=float)
        self.name = name
        self.actuator = actuator

    def act_batch(self, t, X, tau_prev, buf):
        return -(X @ self.gains[t].T)


def make_policy(name: str, model: SystemModel, schedule: GainSchedule | None = None):
    """Policy factory for the CLI baseline names plus "optimal"."""
    if name == "optimal":
        if schedule is None:
            raise ValidationError("the optimal policy needs a gain schedule")
        return SchedulePolicy(schedule)
    if name == "lqr-hold":
        return StateFeedbackPolicy(riccati_reference(model).gains, name, actuator="hold")
    if name == "zero-input":
        return StateFeedbackPolicy(riccati_reference(model).gains, name, actuator="zero")
    if name == "open-loop":
        zeros = np.zeros((model.N + 1, model.m, model.n))
        return StateFeedbackPolicy(zeros, name, actuator="hold")
    raise ValidationError(f"unknown policy/baseline name {name!r}")


# -- randomness -----------------------------------------------------------


def draw_delays(pmf: DelayPmf, count: int, seed: int, trial: int) -> np.ndarray:
    """Per-packet delays for one trial; LOST (-1) marks dropped packets."""
    rng = np.random.default_rng([int(seed), int(trial), _ROLE_DELAY])
    u = rng.random(count)
    cum = np.cumsum(pmf.probs) if pmf.probs else np.zeros(0)
    idx = np.searchsorted(cum, u, side="right")
    return np.where(idx <= pmf.d_max, idx, LOST).astype(int)


def draw_noise(cov: np.ndarray, count: int, seed: int, trial: int) -> np.ndarray:
    """Gaussian process-noise draws w_0..w_{count-1} for one trial."""
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    rng = np.random.default_rng([int(seed), int(trial), _ROLE_NOISE])
    return rng.standard_normal((count, chol.shape[0])) @ chol.T


def _applied_senders(delays: np.ndarray, N: int) -> np.ndarray:
    """Hold-input applied send time after the arrivals of each sample."""
    T = delays.shape[0]
    send = np.arange(N + 1)
    arr = np.where(delays != LOST, send[None, :] + delays, N + 2)
    best = np.full((T, N + 1), -1, dtype=int)
    rows = np.repeat(np.arange(T), N + 1)
    cols = arr.ravel()
    vals = np.tile(send, T)
    ok = cols <= N
    np.maximum.at(best, (rows[ok], cols[ok]), vals[ok])
    return np.maximum.accumulate(best, axis=1)


# -- episode and batch simulation -----------------------------------------


@dataclass(frozen=True)
class SimTrace:
    """Full per-step record of one closed-loop episode."""

    x: np.ndarray            # (N+2, n)
    v: np.ndarray            # (N+1, m) sent controls
    u: np.ndarray            # (N+1, m) applied inputs
    applied_send: np.ndarray  # (N+1,) send time of u_t, -1 if none
    acks: tuple[frozenset, ...]  # send times acknowledged at each sample
    step_cost: np.ndarray    # (N+1,)
    terminal_cost: float

    @property
    def applied_age(self) -> np.ndarray:
        t = np.arange(self.u.shape[0])
        return t - self.applied_send

    @property
    def cum_cost(self) -> np.ndarray:
        return np.cumsum(self.step_cost)

    @property
    def total_cost(self) -> float:
        return float(self.step_cost.sum() + self.terminal_cost)

    def to_csv(self, path) -> None:
        """Write the trace; a final row t = N+1 carries the terminal cost."""
        n = self.x.shape[1]
        m = self.v.shape[1]
        N = self.v.shape[0] - 1
        header = (
            ["t"]
            + [f"x{i}" for i in range(n)]
            + [f"v{i}" for i in range(m)]
            + [f"u{i}" for i in range(m)]
            + ["applied_age", "tau", "step_cost", "cum_cost"]
        )
        cum = self.cum_cost
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(N + 1):
                w.writerow(
                    [t]
                    + [repr(float(val)) for val in self.x[t]]
                    + [repr(float(val)) for val in self.v[t]]
                    + [repr(float(val)) for val in self.u[t]]
                    + [int(self.applied_age[t]), int(self.applied_send[t]),
                       repr(float(self.step_cost[t])), repr(float(cum[t]))]
                )
            w.writerow(
                [N + 1]
                + [repr(float(val)) for val in self.x[N + 1]]
                + [repr(0.0)] * (2 * m)
                + [-1, int(self.applied_send[N]), repr(self.terminal_cost),
                   repr(self.total_cost)]
            )


def run_batch(
    model: SystemModel,
    pmf: DelayPmf,
    policy,
    x0,
    delays: np.ndarray,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate many episodes at once; returns realized costs per episode.

    ``delays`` is (trials, N+1) with LOST = -1; ``noise`` is (trials,
    N+1, n) or None.  Episode ``i`` reproduces ``run_episode`` with the
    same delay/noise rows exactly.
    """
    costs, _ = _run_batch_impl(model, pmf, policy, x0, delays, noise, record=False)
    return costs


def _run_batch_impl(model, pmf, policy, x0, delays, noise, record):
    N, n, m = model.N, model.n, model.m
    T = delays.shape[0]
    if delays.shape != (T, N + 1):
        raise ValidationError(f"delays must be (trials, {N + 1}), got {delays.shape}")
    hold = getattr(policy, "actuator", "hold") == "hold"
    senders = _applied_senders(delays, N)
    X = np.broadcast_to(np.asarray(x0, dtype=float), (T, n)).copy()
    buf = np.zeros((T, N + 1, m))
    cost = np.zeros(T)
    rows = np.arange(T)
    rec = {"x": [], "v": [], "u": [], "sender": [], "step": []} if record else None
    for t in range(N + 1):
        tau_prev = senders[:, t - 1] if t > 0 else np.full(T, -1, dtype=int)
        v = policy.act_batch(t, X, tau_prev, buf)
        buf[:, t] = v
        if hold:
            ap = senders[:, t]
            u = np.zeros((T, m))
            have = ap >= 0
            u[have] = buf[rows[have], ap[have]]
        else:
            ap = np.where(delays[:, t] == 0, t, -1)
            u = np.where((delays[:, t] == 0)[:, None], v, 0.0)
        step = ((u @ model.R) * u).sum(axis=1) + ((X @ model.Q) * X).sum(axis=1)
        cost += step
        if record:
            rec["x"].append(X.copy())
            rec["v"].append(v.copy())
            rec["u"].append(u.copy())
            rec["sender"].append(ap.copy())
            rec["step"].append(step.copy())
        X = X @ model.A.T + u @ model.B.T
        if noise is not None:
            X = X + noise[:, t]
    terminal = ((X @ model.S_terminal) * X).sum(axis=1)
    cost += terminal
    if record:
        rec["x"].append(X.copy())
        rec["terminal"] = terminal
    return cost, rec


def run_episode(
    model: SystemModel,
    pmf: DelayPmf,
    policy,
    x0,
    seed: int,
    trial: int = 0,
    noise_cov: np.ndarray | None = None,
) -> SimTrace:
    """Simulate one episode; reproducible from (seed, trial)."""
    N = model.N
    delays = draw_delays(pmf, N + 1, seed, trial)[None, :]
    noise = None
    if noise_cov is not None:
        noise = draw_noise(noise_cov, N + 1, seed, trial)[None, :]
    _, rec = _run_batch_impl(model, pmf, policy, x0, delays, noise, record=True)
    senders = np.array([s[0] for s in rec["sender"]])
    acks = []
    seen = -1
    hold = getattr(policy, "actuator", "hold") == "hold"
    for t in range(N + 1):
        if hold:
            arrived = {
                int(j)
                for j in range(t + 1)
                if delays[0, j] != LOST and j + delays[0, j] == t
            }
        else:
            arrived = {t} if delays[0, t] == 0 else set()
        acks.append(frozenset(a for a in arrived if a > seen))
        seen = max(seen, senders[t])
    return SimTrace(
        x=np.stack([r[0] for r in rec["x"]]),
        v=np.stack([r[0] for r in rec["v"]]),
        u=np.stack([r[0] for r in rec["u"]]),
        applied_send=senders,
        acks=tuple(acks),
        step_cost=np.array([s[0] for s in rec["step"]]),
        terminal_cost=float(rec["terminal"][0]),
    )


# -- Monte Carlo ----------------------------------------------------------


@dataclass(frozen=True)
class PolicyStats:
    """Sample statistics of realized episode costs for one policy."""

    policy: str
    trials: int
    mean_cost: float
    std: float
    ci99_lo: float
    ci99_hi: float
    seed: int

    @property
    def ci_halfwidth(self) -> float:
        return 0.5 * (self.ci99_hi - self.ci99_lo)


def monte_carlo(
    model: SystemModel,
    pmf: DelayPmf,
    policies: dict[str, object],
    trials: int,
    seed: int,
    x0,
    noise_cov: np.ndarray | None = None,
) -> dict[str, PolicyStats]:
    """Common-random-numbers cost estimate for several policies.

    All policies see identical per-trial delay and noise streams, so
    cost differences are paired.  Returns mean, sample std, and a 99%
    normal confidence interval per policy.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    N = model.N
    delays = np.empty((trials, N + 1), dtype=int)
    for i in range(trials):
        delays[i] = draw_delays(pmf, N + 1, seed, i)
    noise = None
    if noise_cov is not None:
        noise = np.empty((trials, N + 1, model.n))
        for i in range(trials):
            noise[i] = draw_noise(noise_cov, N + 1, seed, i)
    out = {}
    for name, policy in policies.items():
        costs = run_batch(model, pmf, policy, x0, delays, noise)
        mean = float(costs.mean())
        std = float(costs.std(ddof=1)) if trials > 1 else 0.0
        hw = float(Z99 * std / np.sqrt(trials))
        out[name] = PolicyStats(
            policy=name,
            trials=trials,
            mean_cost=mean,
            std=std,
            ci99_lo=mean - hw,
            ci99_hi=mean + hw,
            seed=seed,
        )
    return out


def write_results_csv(path, results: dict[str, PolicyStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "trials", "mean_cost", "std", "ci99_lo", "ci99_hi", "seed"])
        for name in results:
            st = results[name]
            w.writerow(
                [st.policy, st.trials, repr(st.mean_cost), repr(st.std),
                 repr(st.ci99_lo), repr(st.ci99_hi), st.seed]
            )


def sample_applied_ages(
    pmf: DelayPmf, n_steps: int, seed: int, burn_in: int = 200
) -> np.ndarray:
    """Ages of the held input over a long packet stream (steady state).

    Returns ``t - applied_send_time`` for each sample after the burn-in;
    samples where nothing has arrived yet appear as ``t + 1``.
    """
    delays = draw_delays(pmf, n_steps, seed, 0)[None, :]
    senders = _applied_senders(delays, n_steps - 1)[0]
    ages = np.arange(n_steps) - senders
    return ages[burn_in:]
