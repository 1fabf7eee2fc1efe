"""Linear forms over timestamped control signals.

The feedback laws synthesized in :mod:`holdlqg.gain_synth` are linear in
the controls sent since the last acknowledged one, with one coefficient
matrix per absolute send timestamp.  ``ControlLinForm`` is that sparse
representation; ``StackedGainRow`` is its dense counterpart laid out over
the stacked controller vector [v_{t-1}; ...; v_tau; x_t].

Coefficients are indexed by absolute send timestamp, never by relative
offset, which keeps the two index conventions used during synthesis from
drifting against each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class ControlLinForm:
    """Sparse linear form  v  ->  sum_j coeff[j] @ v_j.

    Attributes
    ----------
    coeffs : tuple of (timestamp, coefficient) pairs, newest first
    shape : (rows, cols) of every coefficient matrix
    span : inclusive timestamp range (lo, hi) the form may reference
    """

    coeffs: tuple[tuple[int, np.ndarray], ...]
    shape: tuple[int, int]
    span: tuple[int, int]

    @classmethod
    def build(
        cls,
        coeffs: Mapping[int, np.ndarray],
        shape: tuple[int, int] | None = None,
        span: tuple[int, int] | None = None,
    ) -> "ControlLinForm":
        items = sorted(coeffs.items(), key=lambda kv: -kv[0])
        if shape is None:
            if not items:
                raise ValueError("empty form needs an explicit coefficient shape")
            shape = items[0][1].shape
        arrs = []
        for j, c in items:
            c = np.asarray(c, dtype=float)
            if c.shape != tuple(shape):
                raise ValueError(f"coefficient at {j} has shape {c.shape}, expected {shape}")
            arrs.append((int(j), c))
        if span is None:
            span = (items[-1][0], items[0][0]) if items else (0, -1)
        lo, hi = span
        if any(not lo <= j <= hi for j, _ in arrs):
            raise ValueError(f"coefficients outside span [{lo}, {hi}]")
        return cls(tuple(arrs), (int(shape[0]), int(shape[1])), (int(lo), int(hi)))

    @classmethod
    def zero(cls, shape: tuple[int, int]) -> "ControlLinForm":
        return cls.build({}, shape=shape)

    def coeff(self, j: int) -> np.ndarray:
        for jj, c in self.coeffs:
            if jj == j:
                return c
        return np.zeros(self.shape)

    @property
    def timestamps(self) -> tuple[int, ...]:
        return tuple(j for j, _ in self.coeffs)


def evaluate(form: ControlLinForm, history: Mapping[int, np.ndarray]) -> np.ndarray:
    """Apply the form to a concrete control history.

    ``history`` maps send timestamps to control vectors and must cover
    every coefficient timestamp; a missing one raises ``LookupError``.
    """
    out = np.zeros(form.shape[0])
    for j, coeff in form.coeffs:
        if j not in history:
            raise LookupError(f"control history is missing timestamp {j}")
        out = out + coeff @ np.asarray(history[j], dtype=float)
    return out


def axpy(a: np.ndarray | float, x: ControlLinForm, y: ControlLinForm) -> ControlLinForm:
    """Coefficient-wise a @ x + y; the span is the union of both spans."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(y.shape[0])
    if a.shape[1] != x.shape[0] or a.shape[0] != y.shape[0] or x.shape[1] != y.shape[1]:
        raise ValueError(
            f"axpy dimension mismatch: a{a.shape} @ x{x.shape} vs y{y.shape}"
        )
    out: dict[int, np.ndarray] = {j: c.copy() for j, c in y.coeffs}
    for j, c in x.coeffs:
        out[j] = out.get(j, np.zeros(y.shape)) + a @ c
    lo = min(x.span[0], y.span[0])
    hi = max(x.span[1], y.span[1])
    if hi < lo:  # both empty with default spans
        return ControlLinForm.build(out, shape=y.shape)
    return ControlLinForm.build(out, shape=y.shape, span=(lo, hi))


@dataclass(frozen=True)
class StackedGainRow:
    """Dense row blocks over the stacked vector [v_{t-1}; ...; v_tau; x_t].

    ``control_block`` acts on the pending controls ordered newest first;
    ``state_block`` acts on the current plant state.
    """

    control_block: np.ndarray
    state_block: np.ndarray

    @property
    def width(self) -> int:
        return self.control_block.shape[1] + self.state_block.shape[1]

    def as_matrix(self) -> np.ndarray:
        return np.hstack([self.control_block, self.state_block])


def to_stacked_row(
    form: ControlLinForm,
    state_coeff: np.ndarray,
    tau: int,
    t: int,
) -> StackedGainRow:
    """Densify a form onto [v_{t-1}; ...; v_tau; x_t], newest control first.

    Timestamp ``t-1`` occupies the leading block, ``tau`` the last control
    block.  Every form timestamp must lie inside [tau, t-1].
    """
    state_coeff = np.asarray(state_coeff, dtype=float)
    rows, cols = form.shape
    if form.coeffs and not (tau <= form.span[0] and form.span[1] <= t - 1):
        raise ValueError(
            f"form span {form.span} outside stacked range [{tau}, {t - 1}]"
        )
    width = t - tau
    block = np.zeros((rows, cols * width))
    for j, coeff in form.coeffs:
        pos = t - 1 - j  # newest first
        block[:, pos * cols : (pos + 1) * cols] = coeff
    return StackedGainRow(control_block=block, state_block=state_coeff)
