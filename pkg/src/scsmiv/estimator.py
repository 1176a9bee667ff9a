"""Recursive G-estimator of the cumulative treatment-effect curve.

The curve B(t) jumps only at observed event times. Processing events in
increasing time order, each jump is the ratio of the centered-instrument-
weighted event count to the centered-instrument-weighted treated at-risk sum,
both discounted by the accumulated exponent exp(sum_{l<k} D(t_l-) dB(t_l)).
Every quantity lives on the :class:`~scsmiv.data.EventTable` grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EventTable
from .errors import EstimationError, SingularDenominator, ZeroWeight
from .ivmodel import IvModel

DENOMINATOR_FLOOR = 1e-8

WEIGHT_AT_RISK = "at_risk"
WEIGHT_AT_RISK_TREATED = "at_risk_treated"
WEIGHT_UNIFORM = "uniform"
WEIGHT_SPECS = (WEIGHT_AT_RISK, WEIGHT_AT_RISK_TREATED, WEIGHT_UNIFORM)


@dataclass(frozen=True)
class CumulativeEffect:
    """Estimated step function: jump sizes at the event-time grid."""

    times: np.ndarray   # (K,) jump locations
    jumps: np.ndarray   # (K,) jump sizes dB(t_k)
    tau: float

    def values(self) -> np.ndarray:
        """Cumulative values B(t_k) at the grid points."""
        return np.cumsum(self.jumps)

    def value(self, t: float) -> float:
        """B(t) = sum of jumps at times <= t; 0 before the first event."""
        idx = np.searchsorted(self.times, t, side="right")
        return float(self.jumps[:idx].sum())


@dataclass(frozen=True)
class ConstantEffect:
    """Weighted time-average of the jump sizes: the constant hazards difference."""

    beta: float
    weight_spec: str
    weights: np.ndarray  # (K,) normalized weights w(t_k) applied to the jumps

    def fitted_line(self, t) -> np.ndarray:
        return self.beta * np.asarray(t, dtype=float)


def _recursion(table: EventTable, zc: np.ndarray,
               floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    """Solve the empirical estimating equation forward in time.

    Returns the jump vector. The per-subject exponent accumulates the raw sum
    D(t_l-) dB(t_l) (not its exponential), added after each step.
    """
    n = table.n
    times = table.times
    treat_at = table.treat_at
    treat_before = table.treat_before
    dn = table.dN
    floor_abs = floor * np.max(np.abs(zc))

    expsum = np.zeros(n)
    jumps = np.zeros(times.size)
    for k in range(times.size):
        w = zc * np.exp(expsum)
        num = w[dn[:, k]].sum()
        den = w @ treat_at[:, k]
        if abs(den) / n < floor_abs:
            raise SingularDenominator(times[k], den / n)
        jump = num / den
        if not np.isfinite(jump):
            raise EstimationError(
                f"non-finite jump at t={times[k]:g}; estimation diverged"
            )
        jumps[k] = jump
        expsum += treat_before[:, k] * jump
    return jumps


def estimate_cumulative_effect(table: EventTable, iv: IvModel,
                               floor: float = DENOMINATOR_FLOOR) -> CumulativeEffect:
    """Fit the cumulative effect curve on the event grid.

    Raises :class:`SingularDenominator` when the instrument-weighted treated
    at-risk sum (normalized by n) falls below ``floor`` times the largest
    |centered instrument| — the empirical signature of non-identification at
    that time point.
    """
    zc = iv.centered(table.z, table.covariates)
    jumps = _recursion(table, zc, floor)
    return CumulativeEffect(times=table.times, jumps=jumps, tau=table.tau)


def estimating_equation_residual(table: EventTable, iv: IvModel,
                                 effect: CumulativeEffect) -> np.ndarray:
    """Empirical estimating-equation value at every event time for a given curve.

    Identically zero (to rounding) when ``effect`` is the fitted curve; used
    as the defining-property self-check and by the brute-force oracle tests.
    """
    if effect.times.shape != table.times.shape or not np.array_equal(
            effect.times, table.times):
        raise ValueError("curve must live on the table's event grid")
    zc = iv.centered(table.z, table.covariates)
    residuals = np.empty(table.times.size)
    expsum = np.zeros(table.n)
    for k in range(table.times.size):
        w = zc * np.exp(expsum)
        num = w[table.dN[:, k]].sum()
        den = w @ (table.at_risk[:, k] * table.treat_at[:, k])
        residuals[k] = num - den * effect.jumps[k]
        expsum += table.treat_before[:, k] * effect.jumps[k]
    return residuals


def event_weights(table: EventTable, weight_spec: str = WEIGHT_AT_RISK) -> np.ndarray:
    """Normalized jump weights w(t_k) for the constant-effect estimator.

    The raw weight is a sum over subjects of R_i(t): the at-risk indicator
    (default), the treated at-risk indicator, or 1. Normalization divides by
    the exact integral of the raw weight over [0, tau].
    """
    if weight_spec == WEIGHT_AT_RISK:
        raw = table.at_risk.sum(axis=0).astype(float)
        integral = np.minimum(table.time, table.tau).sum()
    elif weight_spec == WEIGHT_AT_RISK_TREATED:
        raw = (table.at_risk * table.treat_at).sum(axis=0).astype(float)
        integral = table.treated_person_time.sum()
    elif weight_spec == WEIGHT_UNIFORM:
        raw = np.full(table.times.size, float(table.n))
        integral = table.n * table.tau
    else:
        raise ValueError(f"unknown weight spec {weight_spec!r}")
    if not np.any(raw > 0) or integral <= 0:
        raise ZeroWeight()
    return raw / integral


def estimate_constant_effect(effect: CumulativeEffect, table: EventTable,
                             weight_spec: str = WEIGHT_AT_RISK) -> ConstantEffect:
    """Collapse the fitted curve to a single per-unit-time hazards difference."""
    weights = event_weights(table, weight_spec)
    beta = float(weights @ effect.jumps)
    return ConstantEffect(beta=beta, weight_spec=weight_spec, weights=weights)
