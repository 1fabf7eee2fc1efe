"""Probability algebra for a link with random packet delays and losses.

The channel is described by a truncated probability mass function over
integer delays ``d = 0 .. d_max``; residual mass is packet loss.  Three
families of quantities are derived from it and everything downstream
(gain synthesis, simulation, the enumeration oracle) consumes the channel
exclusively through them:

* ``cum(i)`` / ``comp_cum(i)``: probability that a packet arrives within
  ``i`` samples of being sent, and the complement;
* ``applied_age_pmf(i)``: probability that a hold-input actuator is
  currently applying the signal sent ``i`` samples ago;
* ``cum_applied(i)`` / ``comp_cum_applied(i)``: cumulative applied-age
  probability and its complement.

Ages are well defined for arbitrarily large ``i`` (with positive loss
mass the applied signal can be arbitrarily old, or missing entirely), so
the accessors accept any nonnegative index and the cached tables grow on
demand.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ValidationError

#: Construction tolerance: probabilities may violate [0, 1] or the total
#: mass may exceed 1 by at most this much before construction fails.
EPS_NUM = 1e-12


class DelayPmf:
    """Truncated delay pmf with explicit loss mass.

    Parameters
    ----------
    probs : sequence of float
        ``probs[d]`` is the probability that a packet is delayed exactly
        ``d`` samples.  May be empty (every packet is lost).  Values are
        clamped to [0, 1]; violations beyond ``EPS_NUM`` raise.

    Notes
    -----
    Instances are immutable apart from internal memo tables and are safe
    to share across readers.
    """

    __slots__ = ("probs", "d_max", "loss_mass", "_total", "_cum", "_pd", "_pbard")

    def __init__(self, probs: Sequence[float]):
        values = [float(p) for p in probs]
        for d, p in enumerate(values):
            if p < -EPS_NUM or p > 1.0 + EPS_NUM:
                raise ValidationError(f"delay pmf: p({d})={p!r} outside [0, 1]")
        values = [min(1.0, max(0.0, p)) for p in values]
        total = float(sum(values))
        if total > 1.0 + EPS_NUM:
            raise ValidationError(f"delay pmf: total mass {total!r} exceeds 1")
        total = min(1.0, total)
        self.probs = tuple(values)
        self.d_max = len(values) - 1
        self._total = total
        self.loss_mass = min(1.0, max(0.0, 1.0 - total))
        cum = []
        acc = 0.0
        for p in values:
            acc = min(acc + p, 1.0)
            cum.append(acc)
        self._cum = cum
        # Applied-age tables (grown on demand).  The complement is kept
        # multiplicatively (a product of per-packet complements), which
        # preserves arbitrarily small positive tails that the subtractive
        # form 1 - sum(p_d) would round away.
        self._pd: list[float] = []
        self._pbard: list[float] = []

    # -- constructors ---------------------------------------------------

    @classmethod
    def zero_delay(cls) -> "DelayPmf":
        """Every packet arrives in the sample it was sent."""
        return cls([1.0])

    @classmethod
    def total_loss(cls) -> "DelayPmf":
        """No packet ever arrives."""
        return cls([])

    # -- per-packet delay law -------------------------------------------

    def prob(self, d: int) -> float:
        """p(d): probability of a delay of exactly ``d`` samples."""
        if d < 0:
            raise ValidationError(f"delay pmf: negative delay {d}")
        return self.probs[d] if d <= self.d_max else 0.0

    def cum(self, i: int) -> float:
        """P(i): probability a packet arrives within ``i`` samples.

        Saturates at ``1 - loss_mass`` for ``i >= d_max``.
        """
        if i < 0:
            raise ValidationError(f"delay pmf: cumulative index {i} is negative")
        if i >= len(self._cum):
            return self._total
        return self._cum[i]

    def comp_cum(self, i: int) -> float:
        """P̄(i) = 1 - P(i); by convention P̄(-1) = 1."""
        if i < 0:
            if i == -1:
                return 1.0
            raise ValidationError(f"delay pmf: complement index {i} < -1")
        return 1.0 - self.cum(i)

    @property
    def arrival_mass(self) -> float:
        """Total probability that a packet ever arrives."""
        return self._total

    # -- applied-age law (hold-input actuator) ---------------------------

    def _grow(self, i: int) -> None:
        while len(self._pd) <= i:
            j = len(self._pd)
            tail = self._pbard[j - 1] if j else 1.0
            self._pd.append(self.cum(j) * tail)
            self._pbard.append(tail * self.comp_cum(j))

    def applied_age_pmf(self, i: int) -> float:
        """p_d(i): probability the applied signal was sent ``i`` samples ago."""
        if i < 0:
            raise ValidationError(f"delay pmf: applied age {i} is negative")
        self._grow(i)
        return self._pd[i]

    def cum_applied(self, i: int) -> float:
        """P_d(i): probability the applied signal is at most ``i`` samples old."""
        if i < 0:
            if i == -1:
                return 0.0
            raise ValidationError(f"delay pmf: applied-age index {i} < -1")
        self._grow(i)
        return 1.0 - self._pbard[i]

    def comp_cum_applied(self, i: int) -> float:
        """P̄_d(i): probability the applied signal is older than ``i`` samples.

        Equals the product of the first ``i + 1`` per-packet complements,
        so it stays strictly positive whenever loss or slow arrivals make
        arbitrarily old applied inputs possible.  P̄_d(-1) = 1.
        """
        if i < 0:
            if i == -1:
                return 1.0
            raise ValidationError(f"delay pmf: applied-age index {i} < -1")
        self._grow(i)
        return self._pbard[i]

    # -- vector views used by the synthesis kernels ----------------------

    def prob_vec(self, count: int) -> np.ndarray:
        """[p(0), ..., p(count-1)]."""
        return np.array([self.prob(i) for i in range(count)])

    def cum_vec(self, count: int) -> np.ndarray:
        """[P(0), ..., P(count-1)]."""
        return np.array([self.cum(i) for i in range(count)])

    def comp_cum_vec(self, count: int) -> np.ndarray:
        """[P̄(0), ..., P̄(count-1)]."""
        return np.array([self.comp_cum(i) for i in range(count)])

    def applied_age_vec(self, count: int) -> np.ndarray:
        """[p_d(0), ..., p_d(count-1)]."""
        return np.array([self.applied_age_pmf(i) for i in range(count)])

    def cum_applied_vec(self, count: int) -> np.ndarray:
        """[P_d(0), ..., P_d(count-1)]."""
        return np.array([self.cum_applied(i) for i in range(count)])

    def comp_cum_applied_vec(self, count: int) -> np.ndarray:
        """[P̄_d(0), ..., P̄_d(count-1)]."""
        return np.array([self.comp_cum_applied(i) for i in range(count)])

    def __repr__(self) -> str:
        return f"DelayPmf(probs={list(self.probs)!r}, loss_mass={self.loss_mass!r})"
