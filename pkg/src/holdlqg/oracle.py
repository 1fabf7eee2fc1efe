"""Exact ground truth at desk scale.

Every quantity the synthesis engine produces can be checked against a
brute-force construction that never touches the recursion code:

* :func:`enumerate_realizations` lists every joint delay/loss assignment
  for the packets sent over the horizon, with its probability;
* :func:`exact_cost` replays a policy over all realizations and returns
  the exact expected cost;
* :func:`optimal_policy_dp` recovers the optimal policy by probing the
  expected cost as a quadratic in one decision variable per information
  state (the acknowledgment history) and eliminating decisions backward;
* :func:`compare_gains` and :func:`stationarity_certificate` turn the
  recovered policy into pass/fail evidence for a synthesized schedule.

The information state used here is the full acknowledgment history, not
just the current acknowledgment timestamp.  The reduction to (t, tau,
stacked controls, state) is *verified*, not assumed: gains recovered for
histories sharing (t, tau) are pooled into a single feedback row and the
pooling residual is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .delay_model import DelayPmf
from .errors import CoverageError, EnumerationBudgetError, SynthesisError
from .gain_synth import GainSchedule, SystemModel

LOST = -1

_PD_TOL = 1e-10

DEFAULT_BUDGET = 1_000_000


def enumerate_realizations(
    pmf: DelayPmf, N: int, budget: int = DEFAULT_BUDGET
) -> list[tuple[tuple[int, ...], float]]:
    """All joint delay assignments for packets 0..N with probabilities.

    A lost packet is encoded as ``LOST`` (-1).  Zero-probability options
    are pruned, so the returned probabilities are positive and sum to 1
    (within roundoff).  Raises :class:`EnumerationBudgetError` when the
    outcome count would exceed ``budget``.
    """
    delays, probs = _realization_matrix(pmf, N, budget)
    return [
        (tuple(int(d) for d in delays[r]), float(probs[r]))
        for r in range(delays.shape[0])
    ]


def _realization_matrix(pmf: DelayPmf, N: int, budget: int) -> tuple[np.ndarray, np.ndarray]:
    opt_d = [d for d in range(pmf.d_max + 1) if pmf.prob(d) > 0.0]
    opt_p = [pmf.prob(d) for d in opt_d]
    if pmf.loss_mass > 0.0:
        opt_d.append(LOST)
        opt_p.append(pmf.loss_mass)
    n_opt = len(opt_d)
    n_packets = N + 1
    total = n_opt**n_packets if n_opt else 0
    if total > budget:
        raise EnumerationBudgetError(
            f"{n_opt}^{n_packets} = {total} realizations exceed budget {budget}"
        )
    if n_opt == 0:  # degenerate: loss_mass clamped to zero mass? cannot happen
        raise EnumerationBudgetError("delay pmf has no outcomes")
    idx = np.indices((n_opt,) * n_packets).reshape(n_packets, -1).T
    delays = np.asarray(opt_d)[idx]
    probs = np.asarray(opt_p)[idx].prod(axis=1)
    return delays, probs


def _tau_paths(delays: np.ndarray, N: int) -> np.ndarray:
    """Send time of the held (newest arrived) packet after arrivals at t."""
    R = delays.shape[0]
    send = np.arange(N + 1)
    arr = np.where(delays != LOST, send[None, :] + delays, N + 2)
    best = np.full((R, N + 1), -1, dtype=int)
    rows = np.repeat(np.arange(R), N + 1)
    cols = arr.ravel()
    vals = np.tile(send, R)
    ok = cols <= N
    np.maximum.at(best, (rows[ok], cols[ok]), vals[ok])
    return np.maximum.accumulate(best, axis=1)


class _Evaluator:
    """Vectorized exact-cost evaluation over all realizations.

    The per-sample event order matches the simulator: the controller
    computes and sends v_t knowing the acknowledgment state after time
    t-1, then arrivals at t (including a zero-delay v_t) update the held
    input u_t, then cost accrues and the plant steps.
    """

    def __init__(self, model: SystemModel, pmf: DelayPmf, budget: int = DEFAULT_BUDGET):
        self.model = model
        self.delays, self.probs = _realization_matrix(pmf, model.N, budget)
        self.taus = _tau_paths(self.delays, model.N)
        self.n_realizations = self.delays.shape[0]
        self._build_atoms()

    def _build_atoms(self) -> None:
        N = self.model.N
        R = self.n_realizations
        keys: list[tuple[int, ...]] = []
        times: list[int] = []
        key_to_id: dict[tuple[int, ...], int] = {}
        atom_idx = np.zeros((R, N + 1), dtype=int)
        for t in range(N + 1):
            if t == 0:
                key_to_id[()] = len(keys)
                keys.append(())
                times.append(0)
                atom_idx[:, 0] = key_to_id[()]
                continue
            uniq, inv = np.unique(self.taus[:, :t], axis=0, return_inverse=True)
            ids = np.empty(uniq.shape[0], dtype=int)
            for u, row in enumerate(uniq):
                key = tuple(int(v) for v in row)
                key_to_id[key] = len(keys)
                keys.append(key)
                times.append(t)
                ids[u] = key_to_id[key]
            atom_idx[:, t] = ids[inv]
        self.atom_keys = keys
        self.atom_times = times
        self.key_to_id = key_to_id
        self.atom_idx = atom_idx
        self.n_atoms = len(keys)

    # -- cost of atom-indexed decision tables ------------------------------

    def cost_of_table(self, z: np.ndarray, x0: np.ndarray) -> float:
        """Exact expected cost of the policy v[atom] = z[atom]."""
        return float(self.cost_of_tables(z.reshape(1, self.n_atoms, self.model.m), x0)[0])

    def cost_of_tables(self, Zs: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`cost_of_table` over a batch of decision tables."""
        model = self.model
        N, m, n = model.N, model.m, model.n
        B_, R = Zs.shape[0], self.n_realizations
        X = np.broadcast_to(np.asarray(x0, dtype=float), (B_, R, n)).copy()
        buf = np.zeros((B_, R, N + 1, m))
        cost = np.zeros((B_, R))
        rows = np.arange(R)
        for t in range(N + 1):
            v = Zs[:, self.atom_idx[:, t]]
            buf[:, :, t] = v
            ap = self.taus[:, t]
            u = np.zeros((B_, R, m))
            have = ap >= 0
            u[:, have] = buf[:, rows[have], ap[have]]
            cost += ((u @ model.R) * u).sum(axis=-1) + ((X @ model.Q) * X).sum(axis=-1)
            X = X @ model.A.T + u @ model.B.T
        cost += ((X @ model.S_terminal) * X).sum(axis=-1)
        return cost @ self.probs

    def batched_costs(self, zs: list[np.ndarray], x0, chunk: int = 512) -> np.ndarray:
        """Exact costs for a list of flat decision vectors."""
        out = np.empty(len(zs))
        m = self.model.m
        for lo in range(0, len(zs), chunk):
            batch = np.stack(zs[lo : lo + chunk]).reshape(-1, self.n_atoms, m)
            out[lo : lo + len(batch)] = self.cost_of_tables(batch, x0)
        return out

    def decisions_of_schedule(self, schedule: GainSchedule, x0: np.ndarray) -> np.ndarray:
        """Per-atom decisions induced by running a schedule from x0."""
        model = self.model
        m, n = model.m, model.n
        z = np.zeros((self.n_atoms, m))
        x_at: list[np.ndarray] = [np.zeros(n)] * self.n_atoms
        for a, key in enumerate(self.atom_keys):
            t = self.atom_times[a]
            if t == 0:
                x = np.asarray(x0, dtype=float)
            else:
                parent = self.key_to_id[key[:-1]]
                tau_prev = key[-1]
                u = z[self.key_to_id[key[:tau_prev]]] if tau_prev >= 0 else np.zeros(m)
                x = model.A @ x_at[parent] + model.B @ u
            x_at[a] = x
            tau = key[-1] if key else -1
            pending = [z[self.key_to_id[key[:s]]] for s in range(t - 1, max(tau, 0) - 1, -1)]
            zeta = np.concatenate(pending + [x]) if pending else x
            z[a] = schedule.row(t, tau) @ zeta
        return z.ravel()


def exact_cost(model, pmf, policy, x0, budget: int = DEFAULT_BUDGET) -> float:
    """Exact expected cost of an arbitrary deterministic policy.

    ``policy(atom, t, pending, x) -> v`` receives the acknowledgment
    history ``atom`` (tuple of applied send times through t-1), the
    pending controls newest first (down to the acknowledged one; empty
    when nothing is outstanding), and the current state.
    """
    ev = _Evaluator(model, pmf, budget)
    N, m = model.N, model.m
    x0 = np.asarray(x0, dtype=float)
    total = 0.0
    for r in range(ev.n_realizations):
        x = x0.copy()
        sent: list[np.ndarray] = []
        cost = 0.0
        for t in range(N + 1):
            atom = tuple(int(v) for v in ev.taus[r, :t])
            tau = atom[-1] if atom else -1
            pending = [sent[s] for s in range(t - 1, max(tau, 0) - 1, -1)]
            v = np.asarray(policy(atom, t, pending, x), dtype=float).reshape(m)
            sent.append(v)
            ap = ev.taus[r, t]
            u = sent[ap] if ap >= 0 else np.zeros(m)
            cost += float(u @ model.R @ u + x @ model.Q @ x)
            x = model.A @ x + model.B @ u
        cost += float(x @ model.S_terminal @ x)
        total += ev.probs[r] * cost
    return float(total)


def schedule_policy(schedule: GainSchedule):
    """Adapt a gain schedule to the :func:`exact_cost` policy signature."""

    def policy(atom, t, pending, x):
        tau = atom[-1] if atom else -1
        zeta = np.concatenate([np.concatenate(pending), x]) if pending else np.asarray(x, dtype=float)
        return schedule.row(t, tau) @ zeta

    return policy


def linear_policy(gains: np.ndarray):
    """State-feedback policy v_t = -gains[t] @ x_t (ignores the history)."""

    def policy(atom, t, pending, x):
        return -gains[t] @ x

    return policy


@dataclass(frozen=True)
class OracleResult:
    """Optimal policy recovered by enumeration and backward elimination."""

    gains: dict[tuple[int, int], np.ndarray]
    residuals: dict[tuple[int, int], float]
    identifiable: dict[tuple[int, int], bool]
    value: np.ndarray  # optimal expected cost is x0' value x0
    hessian_flags: dict[tuple[int, ...], str]
    n_atoms: int
    n_realizations: int


def optimal_policy_dp(
    model: SystemModel, pmf: DelayPmf, budget: int = DEFAULT_BUDGET
) -> OracleResult:
    """Recover the optimal policy without the recursion machinery.

    The expected cost is probed into an exact quadratic over one decision
    vector per acknowledgment history plus the initial state, decisions
    are eliminated newest first (Gaussian elimination on the stationarity
    system), and each eliminated decision's law is re-expressed over the
    stacked vector [pending controls; current state].  Laws of histories
    sharing (t, tau) are pooled; the pooled residual measures how well a
    single (t, tau)-indexed feedback row explains every history.
    """
    ev = _Evaluator(model, pmf, budget)
    N, n, m = model.N, model.n, model.m
    zdim = ev.n_atoms * m
    dim = zdim + n

    # Probe the exact quadratic J(z, x0) = z'Pz + 2 x0'G z + x0'H x0.
    # Decisions of mutually inconsistent acknowledgment histories never
    # co-occur in a realization, so only prefix-comparable atom pairs can
    # couple; everything else is structurally zero and is not probed.
    K = np.zeros((dim, dim))
    zero_z = np.zeros(zdim)

    def unit(i):
        e = np.zeros(zdim)
        e[i] = 1.0
        return e

    diag_z = ev.batched_costs([unit(i) for i in range(zdim)], np.zeros(n))
    for i in range(zdim):
        K[i, i] = diag_z[i]
    pairs = []
    for a1 in range(ev.n_atoms):
        k1 = ev.atom_keys[a1]
        for a2 in range(a1, ev.n_atoms):
            k2 = ev.atom_keys[a2]
            if a1 != a2 and k2[: len(k1)] != k1:
                continue  # inconsistent histories: coupling is exactly zero
            for r1 in range(m):
                i = a1 * m + r1
                for r2 in range(m):
                    j = a2 * m + r2
                    if j > i:
                        pairs.append((i, j))
    if pairs:
        costs = ev.batched_costs([unit(i) + unit(j) for i, j in pairs], np.zeros(n))
        for (i, j), c in zip(pairs, costs):
            K[i, j] = K[j, i] = 0.5 * (c - diag_z[i] - diag_z[j])
    diag_x = np.array([ev.cost_of_table(zero_z, np.eye(n)[a]) for a in range(n)])
    for a in range(n):
        K[zdim + a, zdim + a] = diag_x[a]
        for b in range(a + 1, n):
            c = ev.cost_of_table(zero_z, np.eye(n)[a] + np.eye(n)[b])
            K[zdim + a, zdim + b] = K[zdim + b, zdim + a] = 0.5 * (c - diag_x[a] - diag_x[b])
    for a in range(n):
        x0a = np.eye(n)[a]
        costs = ev.batched_costs([unit(i) for i in range(zdim)], x0a)
        for i in range(zdim):
            K[i, zdim + a] = K[zdim + a, i] = 0.5 * (costs[i] - diag_z[i] - diag_x[a])

    # Backward elimination, newest decisions first.
    order = sorted(range(ev.n_atoms), key=lambda a: (-ev.atom_times[a], a))
    active = np.ones(dim, dtype=bool)
    laws = np.zeros((ev.n_atoms, m, dim))
    flags: dict[tuple[int, ...], str] = {}
    for a in order:
        sl = np.arange(a * m, (a + 1) * m)
        rest = np.where(active)[0]
        rest = rest[~np.isin(rest, sl)]
        Paa = K[np.ix_(sl, sl)]
        Paa = 0.5 * (Paa + Paa.T)
        eig = np.linalg.eigvalsh(Paa)
        lo = float(eig.min())
        scale = max(1.0, float(np.abs(eig).max()))
        if lo < -_PD_TOL * scale:
            raise SynthesisError(
                f"oracle decision Hessian indefinite at history {ev.atom_keys[a]}"
            )
        if lo > _PD_TOL * scale:
            Pinv = np.linalg.inv(Paa)
            flags[ev.atom_keys[a]] = "pd"
        else:
            Pinv = np.linalg.pinv(Paa, hermitian=True)
            flags[ev.atom_keys[a]] = "psd-pseudoinverse"
        C = K[np.ix_(sl, rest)]
        laws[a][:, rest] = -Pinv @ C
        K[np.ix_(rest, rest)] -= C.T @ Pinv @ C
        K[sl, :] = 0.0
        K[:, sl] = 0.0
        active[sl] = False

    value = K[zdim:, zdim:].copy()
    value = 0.5 * (value + value.T)

    # Re-express each law over [pending controls; state] and pool by (t, tau).
    xmaps = np.zeros((ev.n_atoms, n, dim))
    for a, key in enumerate(ev.atom_keys):
        t = ev.atom_times[a]
        if t == 0:
            xmaps[a][:, zdim:] = np.eye(n)
            continue
        parent = ev.key_to_id[key[:-1]]
        tau_prev = key[-1]
        umap = np.zeros((m, dim))
        if tau_prev >= 0:
            sender = ev.key_to_id[key[:tau_prev]]
            umap[:, sender * m : (sender + 1) * m] = np.eye(m)
        xmaps[a] = model.A @ xmaps[parent] + model.B @ umap

    classes: dict[tuple[int, int], list[int]] = {}
    for a, key in enumerate(ev.atom_keys):
        t = ev.atom_times[a]
        tau = key[-1] if key else -1
        classes.setdefault((t, tau), []).append(a)

    gains: dict[tuple[int, int], np.ndarray] = {}
    residuals: dict[tuple[int, int], float] = {}
    identifiable: dict[tuple[int, int], bool] = {}
    for (t, tau), atoms in sorted(classes.items()):
        width = m * (t - max(tau, 0)) + n
        mcat = []
        vcat = []
        for a in atoms:
            key = ev.atom_keys[a]
            zeta_map = np.zeros((width, dim))
            rpos = 0
            for s in range(t - 1, max(tau, 0) - 1, -1):
                sender = ev.key_to_id[key[:s]]
                zeta_map[rpos : rpos + m, sender * m : (sender + 1) * m] = np.eye(m)
                rpos += m
            zeta_map[rpos:, :] = xmaps[a]
            mcat.append(zeta_map)
            vcat.append(laws[a])
        mcat = np.hstack(mcat)
        vcat = np.hstack(vcat)
        L, *_ = np.linalg.lstsq(mcat.T, vcat.T, rcond=None)
        L = L.T
        residuals[(t, tau)] = float(np.abs(L @ mcat - vcat).max(initial=0.0))
        identifiable[(t, tau)] = bool(np.linalg.matrix_rank(mcat) == width)
        gains[(t, tau)] = L

    return OracleResult(
        gains=gains,
        residuals=residuals,
        identifiable=identifiable,
        value=value,
        hessian_flags=flags,
        n_atoms=ev.n_atoms,
        n_realizations=ev.n_realizations,
    )


@dataclass(frozen=True)
class GainComparison:
    """Per-(t, tau) deviation of a schedule from the oracle gains."""

    entries: tuple[tuple[int, int, float, float], ...]  # (t, tau, deviation, residual)
    max_deviation: float
    max_residual: float

    def to_json_obj(self) -> dict:
        return {
            "max_deviation": self.max_deviation,
            "max_pooling_residual": self.max_residual,
            "entries": [
                {"t": t, "tau": tau, "deviation": d, "pooling_residual": r}
                for (t, tau, d, r) in self.entries
            ],
        }

    def text(self) -> str:
        lines = [
            f"(t={t}, tau={tau:+d})  |schedule - oracle|_inf = {d:.3e}   pooling residual = {r:.3e}"
            for (t, tau, d, r) in self.entries
        ]
        lines.append(f"max deviation = {self.max_deviation:.3e}")
        return "\n".join(lines)


def compare_gains(schedule: GainSchedule, result: OracleResult) -> GainComparison:
    """Max absolute deviation between schedule rows and oracle gains."""
    entries = []
    for (t, tau), L in sorted(result.gains.items()):
        try:
            row = schedule.row(t, tau)
        except Exception as exc:
            raise CoverageError(f"schedule lacks a row for (t={t}, tau={tau})") from exc
        if row.shape != L.shape:
            raise CoverageError(
                f"shape mismatch at (t={t}, tau={tau}): schedule {row.shape} vs oracle {L.shape}"
            )
        dev = float(np.abs(row - L).max(initial=0.0))
        entries.append((t, tau, dev, result.residuals[(t, tau)]))
    max_dev = max((e[2] for e in entries), default=0.0)
    max_res = max((e[3] for e in entries), default=0.0)
    return GainComparison(entries=tuple(entries), max_deviation=max_dev, max_residual=max_res)


def stationarity_certificate(
    model: SystemModel,
    pmf: DelayPmf,
    schedule: GainSchedule,
    x0_list=None,
    budget: int = DEFAULT_BUDGET,
) -> float:
    """Max |dJ/dv| over all information states at the schedule's policy.

    The gradient is probed by central differences on the exact expected
    cost (exact for quadratics).  A vanishing certificate means no
    single-decision deviation can improve the schedule anywhere.
    """
    ev = _Evaluator(model, pmf, budget)
    n = model.n
    if x0_list is None:
        x0_list = [np.eye(n)[:, a] for a in range(n)] + [np.ones(n)]
    zdim = ev.n_atoms * model.m
    eye = np.eye(zdim)
    worst = 0.0
    for x0 in x0_list:
        z = ev.decisions_of_schedule(schedule, np.asarray(x0, dtype=float))
        plus = ev.batched_costs([z + eye[i] for i in range(zdim)], x0)
        minus = ev.batched_costs([z - eye[i] for i in range(zdim)], x0)
        worst = max(worst, float(np.abs(0.5 * (plus - minus)).max()))
    return worst
