"""Trial data generator and Monte Carlo driver.

Per subject: a bivariate normal confounder U, a randomized arm Z, a potential
switch time W with survival exp(-(base + u1 U1) t - z_coef Z) discretized
upward onto a step grid (the point mass at zero switches at the first grid
point), an event time with additive hazard base + treat d(t) + z Z + u2 U2
inverted exactly across the single switch point, and censoring that is the
minimum of the study horizon tau and an exponential draw whose rate is
calibrated once on a pilot cohort to hit the target overall censoring rate.

Replicates use counter-derived RNG streams, so results are independent of
scheduling and worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SubjectRecord, TreatmentPath, build_event_table
from .errors import ScsmivError, ValidationError
from .estimator import (
    WEIGHT_SPECS,
    estimate_constant_effect,
    estimate_cumulative_effect,
)
from .inference import (
    VARIANCE_MODES,
    constant_effect_se,
    influence_contrasts,
    influence_functions,
    test_causal_null,
    test_constant_effect,
    variance_curve,
)
from .ivmodel import EMPIRICAL, KNOWN, fit_iv_model

_PILOT_SIZE = 400_000
_PILOT_ENTROPY = 715_249_418_260_615  # fixed: the calibrated rate is a pure
                                      # function of the generating parameters
THREADS_ENV = "SCSMIV_THREADS"


@dataclass(frozen=True)
class SimConfig:
    """Generating parameters and analysis settings for one Monte Carlo study."""

    n: int = 800
    replicates: int = 1000
    seed: int = 0
    grid_step: float = 0.1
    u_mean: tuple[float, float] = (1.5, 1.5)
    u_cov: tuple[tuple[float, float], tuple[float, float]] = (
        (0.25, -1.0 / 6.0),
        (-1.0 / 6.0, 0.25),
    )
    switch_base: float = 0.05
    switch_u1: float = 0.015
    switch_z: float = 0.1
    event_base: float = 0.25
    event_treatment: float = 0.1
    event_z: float = 0.0
    event_u2: float = 0.15
    censor_target: float = 0.22
    censor_rate: float | None = None   # calibrated when None
    eval_times: tuple[float, ...] = (1.0, 2.0, 3.0)
    tau: float = 3.0
    iv_mode: str = EMPIRICAL
    pz: float | None = None            # used by iv_mode='known'
    weight_spec: str = "at_risk"
    variance_mode: str = "full"
    test_resamples: int = 0            # 0 switches the sup tests off
    test_seed: int = 1
    workers: int | None = None

    def validate(self) -> "SimConfig":
        if self.n < 2 or self.replicates < 1:
            raise ValidationError("need n >= 2 and replicates >= 1")
        if self.grid_step <= 0:
            raise ValidationError("grid_step must be positive")
        cov = np.asarray(self.u_cov)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValidationError("u_cov must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValidationError("u_cov must be positive definite")
        for name in ("switch_base", "switch_u1", "switch_z", "event_base",
                     "event_treatment", "event_z", "event_u2"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if not 0.0 <= self.censor_target < 1.0:
            raise ValidationError("censor_target must lie in [0, 1)")
        if self.tau <= 0 or any(t <= 0 or t > self.tau for t in self.eval_times):
            raise ValidationError("eval_times must lie in (0, tau]")
        if self.weight_spec not in WEIGHT_SPECS:
            raise ValidationError(f"unknown weight spec {self.weight_spec!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValidationError(f"unknown variance mode {self.variance_mode!r}")
        if self.iv_mode not in (KNOWN, EMPIRICAL):
            raise ValidationError("simulation iv_mode must be 'known' or 'empirical'")
        if self.test_resamples < 0:
            raise ValidationError("test_resamples must be >= 0")
        return self


def true_cumulative_effect(t, treatment_rate: float = 0.1):
    """True curve of the generating model: a line with the treatment slope."""
    return treatment_rate * np.asarray(t, dtype=float)


def _replicate_rng(cfg: SimConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, index))
    )


def _draw_latent(cfg: SimConfig, rng: np.random.Generator, n: int):
    """U, Z, the discretized switch time, and the latent event time."""
    chol = np.linalg.cholesky(np.asarray(cfg.u_cov))
    u = np.asarray(cfg.u_mean) + rng.standard_normal((n, 2)) @ chol.T
    z = (rng.random(n) < 0.5).astype(np.int8)

    switch_rate = cfg.switch_base + cfg.switch_u1 * u[:, 0]
    e_switch = rng.exponential(size=n)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_raw = np.where(
            switch_rate > 0,
            np.maximum((e_switch - cfg.switch_z * z) / switch_rate, 0.0),
            np.inf,
        )
    w_grid = np.ceil(w_raw / cfg.grid_step - 1e-12) * cfg.grid_step
    w_grid = np.maximum(w_grid, cfg.grid_step)

    base = cfg.event_base + cfg.event_u2 * u[:, 1] + cfg.event_z * z
    h_before = np.maximum(base + cfg.event_treatment * z, 0.0)
    h_after = np.maximum(base + cfg.event_treatment * (1 - z), 0.0)
    e_event = rng.exponential(size=n)
    t_event = _invert_piecewise(e_event, h_before, h_after, w_grid)
    return u, z, w_grid, t_event


def _invert_piecewise(e, h_before, h_after, w):
    """Exact inversion of the two-segment cumulative hazard at exponential draws."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_first = np.where(h_before > 0, e / h_before, np.inf)
        used = np.where(np.isinf(w), e, h_before * w)
        t_second = w + np.where(h_after > 0, (e - used) / h_after, np.inf)
    return np.where(t_first <= w, t_first, t_second)


def _pilot_event_times(cfg: SimConfig):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=_PILOT_ENTROPY, spawn_key=(1,))
    )
    _, _, _, t_event = _draw_latent(cfg, rng, _PILOT_SIZE)
    return t_event


def _dgp_key(cfg: SimConfig) -> tuple:
    return (cfg.grid_step, cfg.u_mean, cfg.u_cov, cfg.switch_base, cfg.switch_u1,
            cfg.switch_z, cfg.event_base, cfg.event_treatment, cfg.event_z,
            cfg.event_u2, cfg.censor_target, cfg.tau)


@lru_cache(maxsize=32)
def _calibrated_rate(key: tuple) -> float:
    (grid_step, u_mean, u_cov, s_base, s_u1, s_z,
     e_base, e_trt, e_z, e_u2, target, tau) = key
    cfg = SimConfig(grid_step=grid_step, u_mean=u_mean, u_cov=u_cov,
                    switch_base=s_base, switch_u1=s_u1, switch_z=s_z,
                    event_base=e_base, event_treatment=e_trt, event_z=e_z,
                    event_u2=e_u2, censor_target=target, tau=tau)
    t_event = _pilot_event_times(cfg)

    def censored_share(rate: float) -> float:
        admin = t_event > tau
        early = ~admin
        return float(np.mean(admin + early * -np.expm1(-rate * np.minimum(t_event, tau))))

    if censored_share(0.0) >= target:
        return 0.0
    hi = 1.0
    while censored_share(hi) < target and hi < 1e6:
        hi *= 2.0
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if censored_share(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def resolved_censor_rate(cfg: SimConfig) -> float:
    """The exponential censoring rate: configured, or pilot-calibrated."""
    if cfg.censor_rate is not None:
        return cfg.censor_rate
    return _calibrated_rate(_dgp_key(cfg))


def simulate_trial(cfg: SimConfig, replicate_index: int) -> list[SubjectRecord]:
    """One replicate of subject records; deterministic in (seed, index)."""
    rng = _replicate_rng(cfg, replicate_index)
    _, z, w_grid, t_event = _draw_latent(cfg, rng, cfg.n)
    rate = resolved_censor_rate(cfg)
    censor = rng.exponential(1.0 / rate, cfg.n) if rate > 0 else np.full(cfg.n, np.inf)
    censor = np.minimum(censor, cfg.tau)
    time = np.minimum(t_event, censor)
    status = (t_event <= censor).astype(int)

    records = []
    for i in range(cfg.n):
        if w_grid[i] <= time[i]:
            path = TreatmentPath.single_switch(int(z[i]), float(w_grid[i]))
        else:
            path = TreatmentPath.constant(int(z[i]))
        records.append(SubjectRecord(
            id=f"s{i}", time=float(time[i]), status=int(status[i]),
            z=float(z[i]), path=path,
        ))
    return records


def potential_outcome_cohort(cfg: SimConfig, n: int, seed: int = 0):
    """Potential event times under always-treated and never-treated regimes.

    Both arms share the same confounder draw per subject; event draws are
    independent. No censoring. Returns (u, t_always, t_never).
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    chol = np.linalg.cholesky(np.asarray(cfg.u_cov))
    u = np.asarray(cfg.u_mean) + rng.standard_normal((n, 2)) @ chol.T
    z = (rng.random(n) < 0.5).astype(np.int8)
    base = np.maximum(cfg.event_base + cfg.event_u2 * u[:, 1] + cfg.event_z * z, 1e-12)
    t_always = rng.exponential(size=n) / (base + cfg.event_treatment)
    t_never = rng.exponential(size=n) / base
    return u, t_always, t_never


def blip_consistency_check(cfg: SimConfig, n: int = 100_000, seed: int = 0,
                           times=(1.0, 2.0, 3.0), bins: int = 4) -> list[dict]:
    """Stratified survival-ratio diagnostic of the generator.

    Within confounder-quantile strata, the ratio of always-treated to
    never-treated empirical survival at each time should track
    exp(-treatment_rate * t). Returns one row per (stratum, time) with the
    log-ratio discrepancy and its Monte Carlo standard error.
    """
    u, t_always, t_never = potential_outcome_cohort(cfg, n, seed)
    edges = np.quantile(u[:, 1], np.linspace(0, 1, bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    rows = []
    for b in range(bins):
        sel = (u[:, 1] >= edges[b]) & (u[:, 1] < edges[b + 1])
        m = int(sel.sum())
        for t in times:
            p1 = float(np.mean(t_always[sel] > t))
            p0 = float(np.mean(t_never[sel] > t))
            se = np.sqrt((1 - p1) / (p1 * m) + (1 - p0) / (p0 * m))
            rows.append({
                "stratum": b,
                "t": t,
                "log_ratio": float(np.log(p1 / p0)),
                "expected": -cfg.event_treatment * t,
                "se": float(se),
            })
    return rows


@dataclass(frozen=True)
class EvalStats:
    """Aggregate over replicates for one estimand."""

    label: str
    truth: float
    bias: float
    see: float        # Monte Carlo standard deviation of the estimates
    sd: float         # mean of the estimated standard errors
    coverage: float   # percent of 95% intervals covering the truth


@dataclass(frozen=True)
class MonteCarloReport:
    config: dict
    censor_rate_used: float
    curve_stats: tuple[EvalStats, ...]
    beta_stats: EvalStats
    n_completed: int
    n_failed: int
    failure_messages: tuple[str, ...]
    switch_rate: float
    switch_to_treated: float   # mean per-replicate count of 0 -> 1 switchers
    switch_to_control: float
    censor_share: float
    see_defined: bool
    null_test_reject: float | None
    gof_test_reject: float | None
    test_level: float = 0.05

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "censor_rate_used": self.censor_rate_used,
            "curve": [asdict(s) for s in self.curve_stats],
            "beta": asdict(self.beta_stats),
            "n_completed": self.n_completed,
            "n_failed": self.n_failed,
            "failure_messages": list(self.failure_messages),
            "diagnostics": {
                "switch_rate": self.switch_rate,
                "switch_to_treated": self.switch_to_treated,
                "switch_to_control": self.switch_to_control,
                "censor_share": self.censor_share,
                "see_defined": self.see_defined,
            },
            "tests": None if self.null_test_reject is None else {
                "level": self.test_level,
                "null_reject_rate": self.null_test_reject,
                "gof_reject_rate": self.gof_test_reject,
            },
        }


def _run_replicate(cfg: SimConfig, index: int) -> dict:
    try:
        with threadpool_limits(limits=1):
            return _replicate_inner(cfg, index)
    except ScsmivError as exc:
        return {"ok": False, "error": f"replicate {index}: {exc}"}


def _replicate_inner(cfg: SimConfig, index: int) -> dict:
    records = simulate_trial(cfg, index)
    switched = [r for r in records if len(r.path.times) == 2]
    table = build_event_table(records)
    if cfg.iv_mode == KNOWN:
        iv = fit_iv_model(records, KNOWN, pz=cfg.pz if cfg.pz is not None else 0.5)
    else:
        iv = fit_iv_model(records, EMPIRICAL)
    effect = estimate_cumulative_effect(table, iv)
    constant = estimate_constant_effect(effect, table, cfg.weight_spec)

    k_grid = table.times.size
    eval_idx = np.searchsorted(table.times, np.asarray(cfg.eval_times), side="right") - 1
    values = effect.values()
    bhat = np.where(eval_idx >= 0, values[np.maximum(eval_idx, 0)], 0.0)

    p_null = p_gof = None
    if cfg.test_resamples > 0:
        infl = influence_functions(table, iv, effect, cfg.variance_mode)
        curve = variance_curve(infl, effect)
        se = np.where(eval_idx >= 0, curve.se[np.maximum(eval_idx, 0)], 0.0)
        se_beta = constant_effect_se(infl, constant)
        p_null = test_causal_null(
            infl, effect, cfg.test_resamples, seed=(cfg.test_seed, index, 0)
        ).p_value
        p_gof = test_constant_effect(
            infl, effect, constant, cfg.test_resamples, seed=(cfg.test_seed, index, 1)
        ).p_value
    else:
        contrasts = np.zeros((len(cfg.eval_times) + 1, k_grid))
        for m, idx in enumerate(eval_idx):
            contrasts[m, :idx + 1] = 1.0
        contrasts[-1, :] = constant.weights
        eps = influence_contrasts(table, iv, effect, contrasts, cfg.variance_mode)
        norms = np.sqrt(np.sum(eps ** 2, axis=0)) / table.n
        se, se_beta = norms[:-1], float(norms[-1])

    return {
        "ok": True,
        "bhat": bhat,
        "se": se,
        "beta": constant.beta,
        "se_beta": se_beta,
        "switch_frac": len(switched) / cfg.n,
        "to_treated": sum(1 for r in switched if r.path.values[0] == 0),
        "to_control": sum(1 for r in switched if r.path.values[0] == 1),
        "censor_frac": float(np.mean(table.status == 0)),
        "p_null": p_null,
        "p_gof": p_gof,
    }


def _max_workers(cfg: SimConfig) -> int:
    if cfg.workers is not None:
        return max(1, cfg.workers)
    cap = os.environ.get(THREADS_ENV)
    hard = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(hard, os.cpu_count() or 1, cfg.replicates))


def run_monte_carlo(cfg: SimConfig) -> MonteCarloReport:
    """Simulate, estimate and aggregate over all replicates.

    Per-replicate estimation failures (singular denominators on degenerate
    draws) are counted and excluded from the aggregates, never fatal.
    Aggregation order is fixed by replicate index, so the report does not
    depend on the worker count.
    """
    cfg = cfg.validate()
    cfg = replace(cfg, censor_rate=resolved_censor_rate(cfg))
    workers = _max_workers(cfg)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, [cfg] * cfg.replicates,
                                    range(cfg.replicates),
                                    chunksize=max(1, cfg.replicates // (8 * workers))))
    else:
        results = [_run_replicate(cfg, r) for r in range(cfg.replicates)]

    good = [r for r in results if r["ok"]]
    failures = tuple(r["error"] for r in results if not r["ok"])
    if not good:
        raise ScsmivError("every replicate failed; first error: " + failures[0])

    truth_slope = cfg.event_treatment
    see_defined = len(good) >= 2
    bhat = np.array([r["bhat"] for r in good])
    se = np.array([r["se"] for r in good])
    beta = np.array([r["beta"] for r in good])
    se_beta = np.array([r["se_beta"] for r in good])

    curve_stats = []
    for m, t in enumerate(cfg.eval_times):
        truth = truth_slope * t
        hits = np.abs(bhat[:, m] - truth) <= 1.96 * se[:, m]
        curve_stats.append(EvalStats(
            label=f"t={t:g}",
            truth=truth,
            bias=float(np.mean(bhat[:, m]) - truth),
            see=float(np.std(bhat[:, m], ddof=1)) if see_defined else 0.0,
            sd=float(np.mean(se[:, m])),
            coverage=float(100.0 * np.mean(hits)),
        ))
    beta_hits = np.abs(beta - truth_slope) <= 1.96 * se_beta
    beta_stats = EvalStats(
        label="beta",
        truth=truth_slope,
        bias=float(np.mean(beta) - truth_slope),
        see=float(np.std(beta, ddof=1)) if see_defined else 0.0,
        sd=float(np.mean(se_beta)),
        coverage=float(100.0 * np.mean(beta_hits)),
    )

    null_rej = gof_rej = None
    if cfg.test_resamples > 0:
        p_null = np.array([r["p_null"] for r in good], dtype=float)
        p_gof = np.array([r["p_gof"] for r in good], dtype=float)
        null_rej = float(np.mean(p_null <= 0.05))
        gof_rej = float(np.mean(p_gof <= 0.05))

    return MonteCarloReport(
        config=asdict(cfg),
        censor_rate_used=cfg.censor_rate,
        curve_stats=tuple(curve_stats),
        beta_stats=beta_stats,
        n_completed=len(good),
        n_failed=len(failures),
        failure_messages=failures[:20],
        switch_rate=float(np.mean([r["switch_frac"] for r in good])),
        switch_to_treated=float(np.mean([r["to_treated"] for r in good])),
        switch_to_control=float(np.mean([r["to_control"] for r in good])),
        censor_share=float(np.mean([r["censor_frac"] for r in good])),
        see_defined=see_defined,
        null_test_reject=null_rej,
        gof_test_reject=gof_rej,
    )
