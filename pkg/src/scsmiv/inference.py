"""Influence functions, variance curves, multiplier resampling, and sup tests.

The normalized estimation error of the fitted curve satisfies a triangular
linear system on the event grid: (I - H) dV = r, with H strictly lower
triangular. Solving it by forward substitution for every subject's residual
column yields per-subject influence increments; their cumulative sums are the
influence functions that drive the variance estimator, pointwise intervals,
and the wild-multiplier reference distribution of the supremum tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .data import EventTable
from .errors import SingularSystem
from .estimator import (
    DENOMINATOR_FLOOR,
    ConstantEffect,
    CumulativeEffect,
    _recursion,
)
from .ivmodel import IvModel

VARIANCE_FULL = "full"
VARIANCE_SIMPLIFIED = "simplified"
VARIANCE_MODES = (VARIANCE_FULL, VARIANCE_SIMPLIFIED)

Z_95 = 1.96


@dataclass
class InfluenceMatrix:
    """Per-subject influence values on the event grid.

    ``eps[i, k]`` estimates subject i's contribution to the asymptotic error
    of the curve at t_k, so that var(B(t_k)) ~ (1/n^2) sum_i eps[i, k]^2.
    ``eps_beta`` (filled by :func:`constant_effect_se`) is the analogous
    contribution to the constant-effect estimator.
    """

    times: np.ndarray
    eps: np.ndarray               # (n, K)
    includes_theta_correction: bool
    variance_mode: str
    eps_beta: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.eps.shape[0]


@dataclass(frozen=True)
class VarianceCurve:
    times: np.ndarray
    variance: np.ndarray   # (K,) variance of the normalized error sqrt(n)(Bhat-B)
    se: np.ndarray         # (K,) standard error of Bhat(t_k)
    lower: np.ndarray      # (K,) pointwise 95% band
    upper: np.ndarray


@dataclass(frozen=True)
class TestReport:
    """Supremum test outcome. p-values use add-one Monte Carlo smoothing."""

    statistic: float
    p_value: float | None
    n_resamples: int
    statistic_kind: str = "raw-sup"
    resampled_paths: np.ndarray | None = None   # first <=20 paths, for plotting


def _linearization(table: EventTable, zc: np.ndarray, jumps: np.ndarray,
                   variance_mode: str):
    """Build the triangular system pieces: H (K,K strictly lower) and r (K,n).

    r[k, i] = H_i(t_k) [dN_i(t_k) - D_i(t_k) dB(t_k)] with
    H_i(s) = Z_i^c exp(int_0^{s-} D_i dB) / A(s) and A the (1/n)-normalized
    instrument-weighted treated at-risk sum.

    ``full`` mode is the exact Jacobian of the fitted recursion:
    H[k, l] = (1/n) sum_i H_i(t_k) D_i(t_l-) [dN_i(t_k) - D_i(t_k) dB(t_k)],
    i.e. H = (r @ D(. -)) / n restricted to the strict lower triangle.
    ``simplified`` keeps only the event terms,
    H[k, l] = (1/n) sum_i H_i(t_k) D_i(t_l-) dN_i(t_k); the two differ by
    terms of order dB per entry, which matters for finite-sample calibration
    of the variance but not asymptotically.
    """
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"unknown variance mode {variance_mode!r}")
    n, k_grid = table.n, table.times.size
    treat_before = table.treat_before.astype(float)

    cum = np.cumsum(treat_before * jumps[None, :], axis=1)
    exponent = cum - treat_before * jumps[None, :]   # exclusive of the k-th jump
    ze = zc[:, None] * np.exp(exponent)
    a_hat = (ze * table.treat_at).sum(axis=0) / n
    h_hat = ze / a_hat[None, :]

    eps1 = table.dN - table.treat_at * jumps[None, :]
    r = (h_hat * eps1).T.copy()

    # event part, shared by both modes: rows are sums over subjects with
    # events at t_k of H_i(t_k) D_i(t_l-)
    h_mat = np.zeros((k_grid, k_grid))
    ks, subs = np.nonzero(table.dN.T)
    bounds = np.searchsorted(ks, np.arange(k_grid + 1))
    for k in range(1, k_grid):
        rows = subs[bounds[k]:bounds[k + 1]]
        if rows.size:
            h_mat[k, :k] = (h_hat[rows, k][:, None] * treat_before[rows, :k]).sum(axis=0) / n

    if variance_mode == VARIANCE_FULL:
        # subtract the dB-weighted at-risk terms. For subjects on constant
        # paths, D_i(t_l-) D_i(t_k) = D_i(t_k) for every l < k, so their sum
        # collapses to a per-row constant; switchers contribute a genuine
        # (K, K) product over their (few) columns.
        w_at = h_hat * table.treat_at
        constant_path = table.path_changes == 1
        g_row = w_at[constant_path].sum(axis=0)
        correction = np.tile((jumps * g_row / n)[:, None], (1, k_grid))
        switchers = ~constant_path
        if np.any(switchers):
            g_sw = w_at[switchers].T @ treat_before[switchers]
            correction += (jumps / n)[:, None] * g_sw
        h_mat -= np.tril(correction, k=-1)
    return h_mat, r


def _theta_jump_derivatives(table: EventTable, iv: IvModel,
                            floor: float) -> np.ndarray:
    """d(jumps)/d(theta) by central finite differences, re-running the recursion."""
    cols = []
    for j in range(iv.theta.size):
        h = 1e-4 * (1.0 + abs(iv.theta[j]))
        up, down = iv.theta.copy(), iv.theta.copy()
        up[j] += h
        down[j] -= h
        jp = _recursion(table, iv.with_theta(up).centered(table.z, table.covariates), floor)
        jm = _recursion(table, iv.with_theta(down).centered(table.z, table.covariates), floor)
        cols.append((jp - jm) / (2.0 * h))
    return np.column_stack(cols)


def influence_functions(table: EventTable, iv: IvModel, effect: CumulativeEffect,
                        variance_mode: str = VARIANCE_FULL,
                        theta_correction: bool = True,
                        floor: float = DENOMINATOR_FLOOR) -> InfluenceMatrix:
    """Solve the triangular system for every subject and cumulate increments.

    With ``theta_correction`` and an estimated instrument model, adds the
    plug-in term (dB(t)/dtheta) eps_i^theta, the derivative taken by central
    finite differences on theta.
    """
    zc = iv.centered(table.z, table.covariates)
    h_mat, r = _linearization(table, zc, effect.jumps, variance_mode)
    increments = solve_triangular(-h_mat, r, lower=True, unit_diagonal=True)
    if not np.all(np.isfinite(increments)):
        raise SingularSystem("forward substitution produced non-finite values")
    eps = np.cumsum(increments, axis=0).T

    corrected = bool(theta_correction and iv.has_estimated_theta)
    if corrected:
        djumps = _theta_jump_derivatives(table, iv, floor)
        eps = eps + iv.theta_influence @ np.cumsum(djumps, axis=0).T
    return InfluenceMatrix(
        times=table.times,
        eps=eps,
        includes_theta_correction=corrected,
        variance_mode=variance_mode,
    )


def influence_contrasts(table: EventTable, iv: IvModel, effect: CumulativeEffect,
                        contrasts: np.ndarray,
                        variance_mode: str = VARIANCE_FULL,
                        theta_correction: bool = True,
                        floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    """Per-subject influence of linear functionals of the jump vector.

    ``contrasts`` is (m, K) in increment space: row c gives the functional
    sum_k c_k dB(t_k). Returns (n, m). Equivalent to projecting the full
    influence matrix but costs one K-vector back-substitution per contrast
    instead of the K x n forward solve; used by the Monte Carlo driver where
    only a few functionals (curve values at the evaluation times, the
    constant-effect weights) are needed.
    """
    contrasts = np.atleast_2d(np.asarray(contrasts, dtype=float))
    zc = iv.centered(table.z, table.covariates)
    h_mat, r = _linearization(table, zc, effect.jumps, variance_mode)
    out = np.empty((table.n, contrasts.shape[0]))
    for m, c in enumerate(contrasts):
        v = solve_triangular(-h_mat, c, lower=True, unit_diagonal=True, trans="T")
        out[:, m] = r.T @ v
    if theta_correction and iv.has_estimated_theta:
        djumps = _theta_jump_derivatives(table, iv, floor)
        out = out + iv.theta_influence @ (djumps.T @ contrasts.T)
    return out


def variance_curve(infl: InfluenceMatrix, effect: CumulativeEffect) -> VarianceCurve:
    """Pointwise variance, standard errors and 95% band along the grid."""
    variance = np.mean(infl.eps ** 2, axis=0)
    se = np.sqrt(variance / infl.n)
    values = effect.values()
    return VarianceCurve(
        times=infl.times,
        variance=variance,
        se=se,
        lower=values - Z_95 * se,
        upper=values + Z_95 * se,
    )


def constant_effect_se(infl: InfluenceMatrix, weights) -> float:
    """Standard error of the constant-effect estimator; fills ``infl.eps_beta``.

    ``weights`` is a ConstantEffect or its (K,) weight vector. The influence
    of the estimator is the weight-contracted influence increment.
    """
    w = weights.weights if isinstance(weights, ConstantEffect) else np.asarray(weights)
    increments = np.diff(infl.eps, axis=1, prepend=0.0)
    infl.eps_beta = increments @ w
    return float(np.sqrt(np.sum(infl.eps_beta ** 2)) / infl.n)


def _multiplier_paths(eps: np.ndarray, n_resamples: int, seed: int) -> np.ndarray:
    """Wild-multiplier draws of the limit process: (n_resamples, K).

    Resample b uses an independent stream derived from (seed, b), so results
    do not depend on execution order or worker count.
    """
    n, k_grid = eps.shape
    xi = np.empty((n_resamples, n))
    for b in range(n_resamples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))
        xi[b, :] = rng.standard_normal(n)
    return (xi @ eps) / np.sqrt(n)


def multiplier_resample(infl: InfluenceMatrix, n_resamples: int, seed: int) -> np.ndarray:
    """Resampled paths of sqrt(n)(Bhat - B) from the influence functions."""
    if n_resamples <= 0:
        return np.empty((0, infl.times.size))
    return _multiplier_paths(infl.eps, n_resamples, seed)


def _sup_test(observed_path: np.ndarray, eps: np.ndarray, n_resamples: int,
              seed: int) -> TestReport:
    statistic = float(np.max(np.abs(observed_path))) if observed_path.size else 0.0
    if n_resamples <= 0:
        return TestReport(statistic=statistic, p_value=None, n_resamples=0)
    paths = _multiplier_paths(eps, n_resamples, seed)
    sups = np.max(np.abs(paths), axis=1)
    p = (1.0 + np.count_nonzero(sups >= statistic)) / (1.0 + n_resamples)
    return TestReport(
        statistic=statistic,
        p_value=float(p),
        n_resamples=n_resamples,
        resampled_paths=paths[:20].copy(),
    )


def test_causal_null(infl: InfluenceMatrix, effect: CumulativeEffect,
                     n_resamples: int = 1000, seed: int = 0) -> TestReport:
    """Sup test of B(t) = 0 for all t against the resampled limit process."""
    observed = np.sqrt(infl.n) * effect.values()
    return _sup_test(observed, infl.eps, n_resamples, seed)


def test_constant_effect(infl: InfluenceMatrix, effect: CumulativeEffect,
                         constant: ConstantEffect, n_resamples: int = 1000,
                         seed: int = 0) -> TestReport:
    """Goodness-of-fit sup test of the constant hazards-difference model.

    The observed process is sqrt(n)(Bhat(t) - beta t); its influence is the
    curve influence centered by t times the constant-effect influence.
    """
    if infl.eps_beta is None:
        constant_effect_se(infl, constant)
    observed = np.sqrt(infl.n) * (effect.values() - constant.beta * infl.times)
    centered = infl.eps - np.outer(infl.eps_beta, infl.times)
    return _sup_test(observed, centered, n_resamples, seed)
