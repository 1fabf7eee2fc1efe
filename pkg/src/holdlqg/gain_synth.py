"""Offline synthesis of the optimal acknowledgment-aware gain schedule.

For a plant actuated over a link with i.i.d. random packet delays and
losses, a hold-input actuator, and instant lossless acknowledgments, the
finite-horizon quadratic-optimal control sent at time ``t`` is linear in
the stacked vector of still-unacknowledged controls plus the current
state.  This module runs the backward recursion that produces, for every
stage time ``t`` and every feasible acknowledgment timestamp ``tau``, the
feedback row realizing

    v_t = -A11(t)^{-1} A12(t, tau) [v_{t-1}; ...; v_tau; x_t].

The recursion propagates a value-like matrix sequence ``S``, input-cost
aggregates ``T_c``, a state cross term ``M``, and a family of coefficient
tables (the ``K`` tables) that carry cross terms between past controls
backward through the horizon.  Every table is independent of ``tau`` and
indexed by the stage offset ``k = N - t`` plus one or two removal
counters ``b``/``h``; the tau-dependent linear forms are reconstructed
from the tables on demand.  Everything here is deterministic: two runs
on the same inputs produce bit-identical schedules.

The expected-cost Hessian in ``v_t`` is assembled from the tables and
symmetrized before inversion (only its symmetric part enters the cost).
A positive-definite Hessian inverts normally; a semidefinite one falls
back to a symmetric pseudo-inverse (flagged, minimum-norm control); an
indefinite one aborts synthesis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .delay_model import DelayPmf
from .errors import ScheduleError, SequencingError, SynthesisError, ValidationError
from .linform import ControlLinForm, StackedGainRow, to_stacked_row

SCHEDULE_FORMAT = "holdlqg-gain-schedule"
SCHEDULE_VERSION = 1

FLAG_PD = "pd"
FLAG_PSD = "psd-pseudoinverse"

_PD_TOL = 1e-10
_SYM_TOL = 1e-9


def _check_symmetric(name: str, x: np.ndarray) -> np.ndarray:
    scale = 1.0 + np.abs(x).max(initial=0.0)
    if np.abs(x - x.T).max(initial=0.0) > _SYM_TOL * scale:
        raise ValidationError(f"{name} must be symmetric")
    return 0.5 * (x + x.T)


@dataclass(frozen=True)
class SystemModel:
    """Plant matrices, cost weights, and horizon for one experiment.

    ``R`` must be symmetric positive definite; ``Q`` and ``S_terminal``
    symmetric positive semidefinite.  The horizon ``N`` counts decision
    instants ``t = 0 .. N``.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S_terminal: np.ndarray
    N: int

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValidationError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValidationError(f"B must have {n} rows, got {B.shape}")
        m = B.shape[1]
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        S = np.atleast_2d(np.asarray(self.S_terminal, dtype=float))
        if Q.shape != (n, n):
            raise ValidationError(f"Q must be {n}x{n}, got {Q.shape}")
        if S.shape != (n, n):
            raise ValidationError(f"S_terminal must be {n}x{n}, got {S.shape}")
        if R.shape != (m, m):
            raise ValidationError(f"R must be {m}x{m}, got {R.shape}")
        Q = _check_symmetric("Q", Q)
        R = _check_symmetric("R", R)
        S = _check_symmetric("S_terminal", S)
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValidationError("R must be positive definite") from None
        for name, X in (("Q", Q), ("S_terminal", S)):
            w = np.linalg.eigvalsh(X)
            if float(w.min()) < -_SYM_TOL * (1.0 + float(np.abs(w).max())):
                raise ValidationError(f"{name} must be positive semidefinite")
        if int(self.N) != self.N or self.N < 0:
            raise ValidationError(f"horizon N must be a nonnegative integer, got {self.N}")
        for name, val in (("A", A), ("B", B), ("Q", Q), ("R", R), ("S_terminal", S)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "N", int(self.N))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class RiccatiSolution:
    """Classical finite-horizon LQR reference (validation baseline)."""

    gains: np.ndarray  # (N+1, m, n), feedback v_t = -gains[t] @ x_t
    value: np.ndarray  # (N+2, n, n), value[t] = S_t


def riccati_reference(model: SystemModel) -> RiccatiSolution:
    """Standard backward Riccati recursion for the delay-free problem."""
    n, m, N = model.n, model.m, model.N
    A, B, Q, R = model.A, model.B, model.Q, model.R
    S = np.zeros((N + 2, n, n))
    L = np.zeros((N + 1, m, n))
    S[N + 1] = model.S_terminal
    for t in range(N, -1, -1):
        H = R + B.T @ S[t + 1] @ B
        L[t] = np.linalg.solve(H, B.T @ S[t + 1] @ A)
        St = Q + A.T @ S[t + 1] @ A - A.T @ S[t + 1] @ B @ L[t]
        S[t] = 0.5 * (St + St.T)
    return RiccatiSolution(gains=L, value=S)


@dataclass(frozen=True)
class StageGains:
    """Feedback rows for one stage time ``t``."""

    t: int
    a11: np.ndarray
    a11_inv: np.ndarray
    flag: str
    rows: dict[int, StackedGainRow] = field(repr=False)

    def row(self, tau: int) -> StackedGainRow:
        if tau not in self.rows:
            raise ScheduleError(f"no gain for tau={tau} at stage t={self.t}")
        return self.rows[tau]


@dataclass(frozen=True)
class GainSchedule:
    """Complete feedback schedule: one row per (t, tau).

    ``row(t, tau)`` returns the dense feedback matrix applied to the
    stacked vector [v_{t-1}; ...; v_{max(tau,0)}; x_t] (the virtual
    pre-horizon control ``v_{-1} = 0`` is already dropped from tau = -1
    rows).
    """

    n: int
    m: int
    horizon: int
    stages: tuple[StageGains, ...]

    def stage(self, t: int) -> StageGains:
        if not 0 <= t <= self.horizon:
            raise ScheduleError(f"stage time {t} outside horizon 0..{self.horizon}")
        return self.stages[t]

    def row(self, t: int, tau: int) -> np.ndarray:
        return self.stage(t).row(tau).as_matrix()

    def iter_rows(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for st in self.stages:
            for tau in sorted(st.rows):
                yield st.t, tau, st.rows[tau].as_matrix()

    # -- serialization ----------------------------------------------------

    def to_json_obj(self) -> dict:
        stages = []
        for st in self.stages:
            gains = []
            for tau in sorted(st.rows):
                mat = st.rows[tau].as_matrix()
                gains.append(
                    {"tau": tau, "shape": [int(mat.shape[0]), int(mat.shape[1])], "data": mat.tolist()}
                )
            stages.append(
                {"t": st.t, "A11": st.a11.tolist(), "A11_flags": st.flag, "gains": gains}
            )
        return {
            "format": SCHEDULE_FORMAT,
            "version": SCHEDULE_VERSION,
            "n": self.n,
            "m": self.m,
            "horizon": self.horizon,
            "stages": stages,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "GainSchedule":
        if obj.get("format") != SCHEDULE_FORMAT:
            raise ValidationError("not a gain-schedule document")
        n, m, N = int(obj["n"]), int(obj["m"]), int(obj["horizon"])
        if len(obj["stages"]) != N + 1:
            raise ValidationError("schedule stage count does not match horizon")
        stages = []
        for t, entry in enumerate(obj["stages"]):
            if int(entry["t"]) != t:
                raise ValidationError("schedule stages out of order")
            a11 = np.asarray(entry["A11"], dtype=float)
            if a11.shape != (m, m):
                raise ValidationError(f"A11 at t={t} has shape {a11.shape}")
            flag = entry["A11_flags"]
            if flag not in (FLAG_PD, FLAG_PSD):
                raise ValidationError(f"unknown A11 flag {flag!r}")
            a11_inv, _ = _invert_stage_hessian(a11, t)
            rows = {}
            for g in entry["gains"]:
                tau = int(g["tau"])
                mat = np.asarray(g["data"], dtype=float)
                want = (m, m * (t - tau) + n) if tau >= 0 else (m, m * t + n)
                if tuple(g["shape"]) != want or mat.shape != want:
                    raise ValidationError(f"gain at (t={t}, tau={tau}) has shape {mat.shape}, expected {want}")
                rows[tau] = StackedGainRow(control_block=mat[:, : want[1] - n], state_block=mat[:, want[1] - n :])
            if sorted(rows) != list(range(-1, t)):
                raise ValidationError(f"stage t={t} must cover tau=-1..{t - 1}")
            stages.append(StageGains(t=t, a11=a11, a11_inv=a11_inv, flag=flag, rows=rows))
        return cls(n=n, m=m, horizon=N, stages=tuple(stages))

    @classmethod
    def load(cls, path) -> "GainSchedule":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))


def _invert_stage_hessian(a11: np.ndarray, t: int) -> tuple[np.ndarray, str]:
    """Invert a symmetrized stage Hessian, flagging the semidefinite case."""
    eig = np.linalg.eigvalsh(a11)
    lo = float(eig.min())
    scale = max(1.0, float(np.abs(eig).max()))
    if lo < -_PD_TOL * scale:
        raise SynthesisError(
            f"stage t={t}: quadratic coefficient A11 is indefinite "
            f"(min eigenvalue {lo:.3e})"
        )
    if lo > _PD_TOL * scale:
        return np.linalg.inv(a11), FLAG_PD
    return np.linalg.pinv(a11, hermitian=True), FLAG_PSD


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Elementwise num/den with 0 wherever den == 0.

    The ratios fed through here are conditional probabilities; a zero
    denominator only occurs on probability-zero information states, whose
    contribution is zero.
    """
    den = np.broadcast_to(den, num.shape)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0.0)


# Table names: C-tables carry the coefficient of the newest still-present
# control, RL-tables the coefficient of the oldest (acknowledged) one.
_KB_MM = ("KzetaC", "KzetaRL", "KetaC", "KetaRL", "KbetaC", "KbetaRL",
          "KalphaCs", "KalphaRL", "KuuCs", "KuuRL", "KrCs", "KrRL")
_KB_MN = ("KthetaC", "KthetaRL", "KuxC", "KuxRL", "Kgx")
_KBH_MM = ("KguC", "KguRL", "KalphaCdC", "KalphaCdRL",
           "KuuCdC", "KuuCdRL", "KrCdC", "KrCdRL")


class StageCache:
    """Backward-recursion state: S sequence, stage Hessians, K tables.

    Stages must run in order ``k = 0, 1, ..., N`` (stage 0 runs at
    construction).  ``k_family_step`` advances one stage; accessors raise
    :class:`SequencingError` when asked for a quantity whose stage has
    not run yet.
    """

    def __init__(self, model: SystemModel, pmf: DelayPmf):
        self.model = model
        self.pmf = pmf
        n, m, N = model.n, model.m, model.N
        count = N + 3
        self._p = pmf.prob_vec(count)
        self._P = pmf.cum_vec(count)
        self._Pbar = pmf.comp_cum_vec(count)
        self._pd = pmf.applied_age_vec(count)
        self._Pd = pmf.cum_applied_vec(count)
        self._Pbard = pmf.comp_cum_applied_vec(count)
        # Powers of A and A^{g+1} B, used throughout the direct sums.
        self._Apow = np.zeros((N + 3, n, n))
        self._Apow[0] = np.eye(n)
        for g in range(1, N + 3):
            self._Apow[g] = self._Apow[g - 1] @ model.A
        self._ABpow = self._Apow[1 : N + 2] @ model.B  # index g -> A^{g+1} B
        self._S = np.zeros((N + 2, n, n))
        self._S[N + 1] = model.S_terminal
        self._stages: list[dict] = []
        self._done = -1
        self._run_stage(0)

    # -- small helpers ----------------------------------------------------

    @property
    def last_completed_stage(self) -> int:
        return self._done

    def _require_stage(self, k: int) -> dict:
        if k > self._done:
            raise SequencingError(f"stage k={k} has not run yet (done through {self._done})")
        return self._stages[k]

    def s_matrix(self, t: int) -> np.ndarray:
        """S_t for t = N-k; available once stage k has run."""
        k = self.model.N - t
        self._require_stage(max(k, 0))
        return self._S[t].copy()

    # -- recursion quantities ----------------------------------------------

    def r_weight(self, i: int) -> np.ndarray:
        """Effective input weight P_d(N-i) R for the control sent at time i."""
        N = self.model.N
        if not 0 <= i <= N:
            raise ValidationError(f"r_weight index {i} outside 0..{N}")
        return self._Pd[N - i] * self.model.R

    def tc(self, k: int, b: int) -> np.ndarray:
        """Quadratic input-cost aggregate T_c(k, b)."""
        N = self.model.N
        if k < 0 or b < 1 or k + b > N + 1:
            raise ValidationError(f"tc arguments (k={k}, b={b}) out of range")
        if k - 1 > self._done:
            raise SequencingError(f"tc(k={k}) needs S_{{{N - k + 1}}}; run stage {k - 1} first")
        B = self.model.B
        out = self._Pd[k + b - 1] * self.model.R
        for g in range(k + 1):
            out = out + self._pd[g + b - 1] * (B.T @ self._S[N - k + 1 + g] @ B)
        return out

    def m_matrix(self, k: int) -> np.ndarray:
        """State cross term M(N-k)."""
        N = self.model.N
        if not 0 <= k <= N:
            raise ValidationError(f"m_matrix stage offset {k} outside 0..{N}")
        if k - 1 > self._done:
            raise SequencingError(f"m_matrix(k={k}) needs S_{{{N - k + 1}}}; run stage {k - 1} first")
        YS = self.model.B.T @ self._S[N - k + 1 : N + 2]
        return np.einsum("g,gij,gjl->il", self._pd[: k + 1], YS, self._Apow[1 : k + 2])

    def s_update(self, k: int) -> np.ndarray:
        """Run stage k if needed and return S_{N-k}."""
        if k > self._done + 1:
            raise SequencingError(f"s_update(k={k}) out of order (done through {self._done})")
        if k == self._done + 1:
            self._run_stage(k)
        return self._S[self.model.N - k].copy()

    def k_family_step(self, k: int) -> None:
        """Populate every K table for stage k (k = 1..N, in order)."""
        if not 1 <= k <= self.model.N:
            raise ValidationError(f"k_family_step stage offset {k} outside 1..{self.model.N}")
        if k != self._done + 1:
            raise SequencingError(
                f"k_family_step(k={k}) out of order (done through {self._done})"
            )
        self._run_stage(k)

    def k_zeta(self, k: int, tau: int, b: int = 1) -> ControlLinForm:
        """Cross-term form K_zeta(k, tau, b) over v_{N-k-b} .. v_tau."""
        return self._form_from_tables(k, tau, b, "KzetaC", "KzetaRL")

    def k_eta(self, k: int, tau: int, b: int = 1) -> ControlLinForm:
        """K_eta(k, tau, b) = K_zeta - K_gu; the form entering A12."""
        return self._form_from_tables(k, tau, b, "KetaC", "KetaRL")

    def k_gu(self, k: int, tau: int, b: int = 1, h: int = 1) -> ControlLinForm:
        """Propagated cross-term form K_gu(k, tau, b, h)."""
        return self._form_from_tables(k, tau, b, "KguC", "KguRL", h=h)

    def k_beta(self, k: int, tau: int, b: int = 1) -> ControlLinForm:
        """Hessian-coupling form K_beta(k, tau, b)."""
        return self._form_from_tables(k, tau, b, "KbetaC", "KbetaRL")

    def kzeta_c(self, k: int, b: int) -> np.ndarray:
        return self._require_stage(k)["tables"]["KzetaC"][b].copy()

    def kzeta_rl(self, k: int, b: int) -> np.ndarray:
        return self._require_stage(k)["tables"]["KzetaRL"][b].copy()

    def table(self, k: int, name: str) -> np.ndarray:
        """Raw stage-k coefficient table (read-only view for tests/tools)."""
        stage = self._require_stage(k)
        if name in ("Ke", "Kgg", "M", "A11", "A11_inv"):
            return stage[name]
        return stage["tables"][name]

    def _form_from_tables(self, k, tau, b, cname, rlname, h=None):
        N, m = self.model.N, self.model.m
        if not 1 <= k <= N:
            raise ValidationError(f"stage offset {k} outside 1..{N}")
        if b < 1 or tau < -1 or tau > N - k - b:
            raise ValidationError(f"(tau={tau}, b={b}) invalid at stage k={k}")
        tabs = self._require_stage(k)["tables"]
        ctab, rtab = tabs[cname], tabs[rlname]
        coeffs = {}
        for t_off in range(b, N - k - tau):
            coeffs[N - k - t_off] = ctab[t_off] if h is None else ctab[t_off, h]
        rl = rtab[N - k - tau] if h is None else rtab[N - k - tau, h]
        coeffs[tau] = rl
        return ControlLinForm.build(coeffs, shape=(m, m), span=(tau, N - k - b))

    def assemble_gain(self, k: int) -> tuple[np.ndarray, dict[int, StackedGainRow]]:
        """Stage Hessian A11(N-k) and per-tau linear rows A12(N-k, tau).

        The returned rows are the raw A12 blocks; the emitted feedback is
        ``-A11^{-1} A12`` (see :func:`synthesize`).
        """
        st = self._require_stage(k)
        N, m = self.model.N, self.model.m
        t_stage = N - k
        state_coeff = st["M"] - st["Kgx1"]
        etaC = st["tables"]["KetaC"]
        etaRL = st["tables"]["KetaRL"]
        rows = {}
        for tau in range(-1, t_stage):
            coeffs = {}
            for t_off in range(1, t_stage - tau):  # v_{t-1} .. v_{tau+1}
                coeffs[t_stage - t_off] = etaC[t_off]
            if tau >= 0:
                coeffs[tau] = etaRL[t_stage - tau]
            form = ControlLinForm.build(coeffs, shape=(m, m)) if coeffs else ControlLinForm.zero((m, m))
            rows[tau] = to_stacked_row(form, state_coeff, max(tau, 0), t_stage)
        return st["A11"].copy(), rows

    # -- the backward pass -------------------------------------------------

    def _zeta_core(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """K_e(k) and the per-lag aggregate W used by the K_zeta tables."""
        n, m, N = self.model.n, self.model.m, self.model.N
        Ke = np.zeros((m, m))
        W = np.zeros((k, m, m))
        pbard = self._Pbard[:k]
        if k == 0 or not pbard.any():
            return Ke, W
        Y = self.model.B.T @ self._S[N - k + 2 : N + 2]  # (k, m, n), index a
        AB = self._ABpow[:k]  # (k, n, m), index a-c
        P = self._P
        for c in range(k):
            Gc = Y[c:] @ AB[: k - c]
            wa = pbard[c:]
            Ke += np.einsum("a,aij->ij", wa * P[c], Gc)
            W[c] = np.einsum("a,aij->ij", wa * (P[c + 1 : k + 1] - P[c]), Gc)
        return Ke, W

    def _zeta_weights(self, k: int, Bk: int) -> tuple[np.ndarray, np.ndarray]:
        """Conditional application weights w1[b, c] and wRL[b, c]."""
        P, Pbar = self._P, self._Pbar
        C = np.arange(k)
        r = np.ones((Bk + 1, k))
        if Bk >= 2:
            hh = np.arange(2, Bk + 1)
            r[2:] = _safe_div(Pbar[np.add.outer(hh - 1, C)], Pbar[hh - 2][:, None])
        prod_c = np.cumprod(r, axis=0)
        q = np.zeros((Bk + 1, k))
        bb = np.arange(1, Bk + 1)
        q[1:] = _safe_div(P[np.add.outer(bb, C)] - P[bb - 1][:, None], Pbar[bb - 1][:, None])
        w1 = q * prod_c
        s = np.ones((Bk + 1, k))
        if Bk >= 1:
            hh = np.arange(1, Bk + 1)
            s[1:] = _safe_div(Pbar[np.add.outer(hh, C)], Pbar[hh - 1][:, None])
        prod_s = np.cumprod(s, axis=0)
        wrl = np.zeros((Bk + 1, k))
        wrl[1:] = prod_s[:Bk]
        return w1, wrl

    def _run_stage(self, k: int) -> None:
        model, N = self.model, self.model.N
        n, m = model.n, model.m
        A, B, Q = model.A, model.B, model.Q
        Bk = N - k + 1
        p, Pbar = self._p, self._Pbar
        p0, pbar0 = p[0], Pbar[0]
        mm = (Bk + 1, m, m)
        mn = (Bk + 1, m, n)
        mmhh = (Bk + 1, Bk + 1, m, m)
        tabs = {name: np.zeros(mm) for name in _KB_MM}
        tabs.update({name: np.zeros(mn) for name in _KB_MN})
        tabs.update({name: np.zeros(mmhh) for name in _KBH_MM})
        Ke = np.zeros((m, m))
        Kgg = np.zeros((m, m))

        if k >= 1:
            prev = self._stages[k - 1]["tables"]
            A11p = self._stages[k - 1]["A11_inv"]
            pb = p[1 : Bk + 1][:, None, None]
            Pbb = Pbar[1 : Bk + 1][:, None, None]
            Pbm1 = Pbar[0:Bk][:, None, None]
            pb4 = pb[:, None]
            Pbb4 = Pbb[:, None]
            Pbm14 = Pbm1[:, None]

            Ke, W = self._zeta_core(k)
            w1, wrl = self._zeta_weights(k, Bk)
            tabs["KzetaC"] = np.einsum("bc,cij->bij", w1, W)
            tabs["KzetaRL"] = np.einsum("bc,cij->bij", wrl, W)

            ec_p1 = prev["KetaC"][2:]    # KetaC(k-1, b+1), b = 1..Bk
            erl_p1 = prev["KetaRL"][2:]
            ec1 = prev["KetaC"][1]
            erl1 = prev["KetaRL"][1]
            thC_p = prev["KthetaC"]
            thRL_p = prev["KthetaRL"]
            thCB = thC_p @ B             # index h: KthetaC(k-1, h) B
            thRLB_p1 = (thRL_p @ B)[2:]  # KthetaRL(k-1, b+1) B

            # beta: coupling of older controls through the previous Hessian
            t_ec1 = ec1.T @ A11p
            mix_b = pb * erl_p1 + Pbb * ec_p1
            tabs["KbetaC"][1:] = t_ec1 @ mix_b
            tabs["KbetaRL"][1:] = t_ec1 @ (Pbm1 * erl_p1)

            # gu: every bilinear cross between the newest control and older ones
            tabs["KguC"][1:, 1:] = (
                pb4 * thCB[None, 1 : Bk + 1]
                + tabs["KbetaC"][1:, None]
                + Pbb4 * prev["KuuCdC"][2:, 2:]
                + pb4 * prev["KuuCdRL"][2:, 2:]
                + Pbb4 * prev["KrCdC"][2:, 1 : Bk + 1]
                + pb4 * prev["KrCdRL"][2:, 1 : Bk + 1]
            )
            tabs["KguRL"][1:, 1:] = (
                Pbm14
                * (thCB[None, 1 : Bk + 1] + prev["KuuCdRL"][2:, 2:] + prev["KrCdRL"][2:, 1 : Bk + 1])
                + tabs["KbetaRL"][1:, None]
            )

            tabs["KetaC"] = tabs["KzetaC"] - tabs["KguC"][:, 1]
            tabs["KetaRL"] = tabs["KzetaRL"] - tabs["KguRL"][:, 1]

            Kgg = (
                p0 * erl1.T @ A11p @ erl1
                + pbar0 * ec1.T @ A11p @ ec1
                + 2.0 * pbar0 * prev["KuuCs"][1]
                + pbar0 * prev["KrCs"][1]
                + p0 * (2.0 * prev["KuuRL"][1] + prev["KrRL"][1])
            )

        a11_raw = self.tc(k, 1) + 2.0 * Ke
        if k >= 1:
            a11_raw = a11_raw - Kgg - 2.0 * p0 * (self._stages[k - 1]["tables"]["KthetaRL"][1] @ B)
        a11 = 0.5 * (a11_raw + a11_raw.T)
        a11_inv, flag = _invert_stage_hessian(a11, N - k)

        M = self.m_matrix(k)
        if k >= 1:
            prev = self._stages[k - 1]["tables"]
            tabs["Kgx"][1:] = pbar0 * (prev["KthetaC"][1 : Bk + 1] @ A) + p0 * (
                prev["KthetaRL"][1 : Bk + 1] @ A
            )
            tabs["KuxC"][1:] = pb * (prev["KthetaRL"][2:] @ A) + Pbb * (prev["KthetaC"][2:] @ A)
            tabs["KuxRL"][1:] = Pbm1 * (prev["KthetaRL"][2:] @ A)
        kgx1 = tabs["Kgx"][1]
        D = a11_inv @ (M - kgx1)
        tabs["KthetaC"] = np.swapaxes(tabs["KetaC"], -1, -2) @ D + tabs["KuxC"]
        tabs["KthetaRL"] = np.swapaxes(tabs["KetaRL"], -1, -2) @ D + tabs["KuxRL"]

        if k >= 1:
            # alpha: scalar-remainder quadratics through the previous Hessian
            t_ec_h = np.swapaxes(ec_p1, -1, -2) @ A11p  # index h: KetaC(k-1,h+1)^T A11p
            tabs["KalphaCs"][1:] = (
                pb * (np.swapaxes(erl_p1, -1, -2) @ A11p @ erl_p1)
                + Pbb * (np.swapaxes(ec_p1, -1, -2) @ A11p @ ec_p1)
            )
            tabs["KalphaRL"][1:] = Pbm1 * (np.swapaxes(erl_p1, -1, -2) @ A11p @ erl_p1)
            tabs["KalphaCdC"][1:, 1:] = np.einsum("hij,bjl->bhil", t_ec_h, mix_b)
            tabs["KalphaCdRL"][1:, 1:] = np.einsum("hij,bjl->bhil", t_ec_h, Pbm1 * erl_p1)

            # uu: held-input cross terms propagated one stage back
            tabs["KuuCs"][1:] = pb * (thRLB_p1 + prev["KuuRL"][2:]) + Pbb * prev["KuuCs"][2:]
            tabs["KuuRL"][1:] = Pbm1 * (thRLB_p1 + prev["KuuRL"][2:])
            tabs["KuuCdC"][1:, 1:] = (
                pb4 * thCB[None, 1 : Bk + 1]
                + Pbb4 * prev["KuuCdC"][2:, 2:]
                + pb4 * prev["KuuCdRL"][2:, 2:]
            )
            tabs["KuuCdRL"][1:, 1:] = Pbm14 * (thCB[None, 1 : Bk + 1] + prev["KuuCdRL"][2:, 2:])

            # r: alpha remainders accumulated across stages
            tabs["KrCs"][1:] = Pbb * prev["KrCs"][2:] + pb * prev["KrRL"][2:] + tabs["KalphaCs"][1:]
            tabs["KrRL"][1:] = Pbm1 * prev["KrRL"][2:] + tabs["KalphaRL"][1:]
            tabs["KrCdC"][1:, 1:] = (
                Pbb4 * prev["KrCdC"][2:, 2:] + pb4 * prev["KrCdRL"][2:, 2:] + tabs["KalphaCdC"][1:, 1:]
            )
            tabs["KrCdRL"][1:, 1:] = Pbm14 * prev["KrCdRL"][2:, 2:] + tabs["KalphaCdRL"][1:, 1:]

        TX = A.T @ self._S[N - k + 1] @ A
        MK = M - kgx1
        S_new = TX + Q - MK.T @ a11_inv @ MK
        self._S[N - k] = 0.5 * (S_new + S_new.T)

        self._stages.append(
            {
                "tables": tabs,
                "A11_raw": a11_raw,
                "A11": a11,
                "A11_inv": a11_inv,
                "flag": flag,
                "M": M,
                "Kgx1": kgx1,
                "Ke": Ke,
                "Kgg": Kgg,
            }
        )
        self._done = k

    def schedule(self) -> GainSchedule:
        """Emit the feedback schedule once all stages have run."""
        if self._done < self.model.N:
            raise SequencingError(
                f"schedule requested with stages done through {self._done} < N={self.model.N}"
            )
        N, m, n = self.model.N, self.model.m, self.model.n
        stages = []
        for k in range(N, -1, -1):
            st = self._stages[k]
            a11, a12_rows = self.assemble_gain(k)
            rows = {}
            for tau, raw in a12_rows.items():
                rows[tau] = StackedGainRow(
                    control_block=-st["A11_inv"] @ raw.control_block,
                    state_block=-st["A11_inv"] @ raw.state_block,
                )
            stages.append(
                StageGains(t=N - k, a11=a11, a11_inv=st["A11_inv"].copy(), flag=st["flag"], rows=rows)
            )
        return GainSchedule(n=n, m=m, horizon=N, stages=tuple(stages))


def synthesize(model: SystemModel, pmf: DelayPmf) -> GainSchedule:
    """Run the full backward pass and emit the gain schedule.

    Deterministic: repeated calls produce bit-identical schedules.
    Raises :class:`SynthesisError` if any stage Hessian is indefinite.
    """
    cache = StageCache(model, pmf)
    for k in range(1, model.N + 1):
        cache.k_family_step(k)
    return cache.schedule()
