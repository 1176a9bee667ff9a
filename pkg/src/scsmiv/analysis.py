"""Batch analysis pipeline: CSV ingestion, orchestration, report serialization.

Input format: a subjects CSV (id, time, status, z, optional l_1..l_p
covariates) plus an optional long-format treatment CSV (id, change_time,
value). Subjects without treatment rows adhere to their assigned arm
(constant path equal to z).
"""

from __future__ import annotations

import csv
import json
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    SubjectRecord,
    TreatmentPath,
    build_event_table,
    validate_subjects,
)
from .errors import (
    MissingColumn,
    ParseError,
    UnknownSubjectInTreatmentFile,
    ValidationError,
)
from .estimator import (
    WEIGHT_AT_RISK,
    WEIGHT_SPECS,
    estimate_constant_effect,
    estimate_cumulative_effect,
)
from .inference import (
    VARIANCE_FULL,
    VARIANCE_MODES,
    TestReport,
    constant_effect_se,
    influence_functions,
    test_causal_null,
    test_constant_effect,
    variance_curve,
)
from .ivmodel import EMPIRICAL, KNOWN, LOGISTIC, fit_iv_model

_SUBJECT_COLUMNS = ("id", "time", "status", "z")
_TREATMENT_COLUMNS = ("id", "change_time", "value")


def _float_cell(path, line, column, raw):
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(path, line, f"column {column!r}: cannot parse {raw!r} as a number")


def parse_dataset(subjects_path, treatment_path=None) -> list[SubjectRecord]:
    """Read and merge the subjects and treatment files into records.

    Treatment rows are grouped per subject and sorted by change time; a
    subject whose rows do not start at time 0 gets the assigned arm (z) as
    the implied initial value.
    """
    rows = []
    with open(subjects_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in _SUBJECT_COLUMNS:
            if col not in header:
                raise MissingColumn(str(subjects_path), col)
        cov_cols = [c for c in header if c.startswith("l_")]
        for row in reader:
            line = reader.line_num
            sid = (row["id"] or "").strip()
            if not sid:
                raise ParseError(str(subjects_path), line, "empty subject id")
            time = _float_cell(str(subjects_path), line, "time", row["time"])
            status_f = _float_cell(str(subjects_path), line, "status", row["status"])
            if status_f not in (0.0, 1.0):
                raise ParseError(str(subjects_path), line,
                                 f"status must be 0 or 1, got {row['status']!r}")
            z = _float_cell(str(subjects_path), line, "z", row["z"])
            cov = None
            if cov_cols:
                cov = tuple(_float_cell(str(subjects_path), line, c, row[c])
                            for c in cov_cols)
            rows.append((sid, time, int(status_f), z, cov))

    changes: dict[str, list[tuple[float, int]]] = {}
    if treatment_path is not None:
        known_ids = {sid for sid, *_ in rows}
        with open(treatment_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in _TREATMENT_COLUMNS:
                if col not in header:
                    raise MissingColumn(str(treatment_path), col)
            for row in reader:
                line = reader.line_num
                sid = (row["id"] or "").strip()
                if sid not in known_ids:
                    raise UnknownSubjectInTreatmentFile(str(treatment_path), line, sid)
                t = _float_cell(str(treatment_path), line, "change_time", row["change_time"])
                v = _float_cell(str(treatment_path), line, "value", row["value"])
                if v not in (0.0, 1.0):
                    raise ParseError(str(treatment_path), line,
                                     f"treatment value must be 0 or 1, got {row['value']!r}")
                changes.setdefault(sid, []).append((t, int(v)))

    records = []
    for sid, time, status, z, cov in rows:
        subject_changes = sorted(changes.get(sid, []), key=lambda c: c[0])
        if not subject_changes:
            if z not in (0.0, 1.0):
                raise ValidationError(
                    f"subject {sid!r}: no treatment rows and non-binary z; "
                    "cannot default to assigned-arm adherence"
                )
            path = TreatmentPath.constant(int(z))
        else:
            if subject_changes[0][0] > 0.0:
                if z not in (0.0, 1.0):
                    raise ValidationError(
                        f"subject {sid!r}: treatment rows start after time 0 "
                        "and z is non-binary; initial value is undefined"
                    )
                subject_changes.insert(0, (0.0, int(z)))
            path = TreatmentPath.from_changes(subject_changes)
        records.append(SubjectRecord(sid, time, status, z, path, cov))
    return records


@dataclass(frozen=True)
class AnalysisConfig:
    subjects_path: str
    treatment_path: str | None = None
    pz: float | None = None
    iv_mode: str | None = None          # None resolves to known-if-pz else empirical
    weight_spec: str = WEIGHT_AT_RISK
    n_resamples: int = 1000
    seed: int = 0
    variance_mode: str = VARIANCE_FULL
    theta_correction: bool = True
    tau: float | None = None
    eval_times: tuple[float, ...] = ()
    output_dir: str | None = None

    def resolved_iv_mode(self) -> str:
        if self.iv_mode is not None:
            return self.iv_mode
        return KNOWN if self.pz is not None else EMPIRICAL

    def validate(self) -> "AnalysisConfig":
        if self.pz is not None and not 0.0 < self.pz < 1.0:
            raise ValidationError("pz must lie strictly between 0 and 1")
        if self.n_resamples < 0:
            raise ValidationError("n_resamples must be >= 0")
        if self.weight_spec not in WEIGHT_SPECS:
            raise ValidationError(f"unknown weight spec {self.weight_spec!r}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValidationError(f"unknown variance mode {self.variance_mode!r}")
        mode = self.resolved_iv_mode()
        if mode not in (KNOWN, EMPIRICAL, LOGISTIC):
            raise ValidationError(f"unknown iv mode {mode!r}")
        if mode == KNOWN and self.pz is None:
            raise ValidationError("iv_mode 'known' requires pz")
        return self


@dataclass
class AnalysisReport:
    """Full analysis output; serializes losslessly to JSON."""

    times: np.ndarray
    jumps: np.ndarray
    values: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    beta: float
    beta_se: float
    beta_ci: tuple[float, float]
    beta_p_value: float
    null_test: TestReport | None
    gof_test: TestReport | None
    tests_skipped: bool
    n_subjects: int
    n_events: int
    n_censored: int
    switched_from_treated: int
    switched_from_control: int
    iv_mode: str
    theta: list[float]
    tau: float
    eval_values: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = __version__
    timestamp: str = ""

    def to_json_dict(self) -> dict:
        def test_dict(rep):
            if rep is None:
                return {"skipped": True}
            return {
                "statistic": rep.statistic,
                "p_value": rep.p_value,
                "n_resamples": rep.n_resamples,
                "statistic_kind": rep.statistic_kind,
            }

        return {
            "version": self.version,
            "timestamp": self.timestamp,
            "config": self.config,
            "summary": {
                "n_subjects": self.n_subjects,
                "n_events": self.n_events,
                "n_censored": self.n_censored,
                "switched_from_treated": self.switched_from_treated,
                "switched_from_control": self.switched_from_control,
                "iv_mode": self.iv_mode,
                "theta": self.theta,
                "tau": self.tau,
            },
            "cumulative_effect": {
                "times": self.times.tolist(),
                "jumps": self.jumps.tolist(),
                "values": self.values.tolist(),
                "se": self.se.tolist(),
                "lower95": self.lower.tolist(),
                "upper95": self.upper.tolist(),
            },
            "constant_effect": {
                "beta": self.beta,
                "se": self.beta_se,
                "ci95": list(self.beta_ci),
                "p_value": self.beta_p_value,
            },
            "eval_values": self.eval_values,
            "tests_skipped": self.tests_skipped,
            "causal_null_test": test_dict(self.null_test),
            "constant_effect_test": test_dict(self.gof_test),
        }


def _normal_two_sided_p(stat: float) -> float:
    return float(2.0 * (1.0 - 0.5 * (1.0 + math.erf(abs(stat) / math.sqrt(2.0)))))


def run_analysis(cfg: AnalysisConfig) -> AnalysisReport:
    """Full pipeline on one dataset; see the module docstring for the format."""
    cfg = cfg.validate()
    with threadpool_limits(limits=1):
        records = parse_dataset(cfg.subjects_path, cfg.treatment_path)
        records = validate_subjects(records)
        table = build_event_table(records, tau=cfg.tau)
        iv = fit_iv_model(records, cfg.resolved_iv_mode(), pz=cfg.pz)
        effect = estimate_cumulative_effect(table, iv)
        constant = estimate_constant_effect(effect, table, cfg.weight_spec)
        infl = influence_functions(
            table, iv, effect,
            variance_mode=cfg.variance_mode,
            theta_correction=cfg.theta_correction,
        )
        curve = variance_curve(infl, effect)
        beta_se = constant_effect_se(infl, constant)

        null_rep = gof_rep = None
        if cfg.n_resamples > 0:
            null_rep = test_causal_null(infl, effect, cfg.n_resamples,
                                        seed=(cfg.seed, 0))
            gof_rep = test_constant_effect(infl, effect, constant, cfg.n_resamples,
                                           seed=(cfg.seed, 1))

        values = effect.values()
        eval_values = []
        for t in cfg.eval_times:
            idx = int(np.searchsorted(table.times, t, side="right")) - 1
            v = float(values[idx]) if idx >= 0 else 0.0
            s = float(curve.se[idx]) if idx >= 0 else 0.0
            eval_values.append({"t": t, "value": v, "se": s,
                                "lower95": v - 1.96 * s, "upper95": v + 1.96 * s})

        switched = [r for r in records if len(r.path.times) >= 2]
        wald = constant.beta / beta_se if beta_se > 0 else math.inf

        return AnalysisReport(
            times=table.times,
            jumps=effect.jumps,
            values=values,
            se=curve.se,
            lower=curve.lower,
            upper=curve.upper,
            beta=constant.beta,
            beta_se=beta_se,
            beta_ci=(constant.beta - 1.96 * beta_se, constant.beta + 1.96 * beta_se),
            beta_p_value=_normal_two_sided_p(wald),
            null_test=null_rep,
            gof_test=gof_rep,
            tests_skipped=cfg.n_resamples == 0,
            n_subjects=table.n,
            n_events=table.n_events,
            n_censored=int(np.sum(table.status == 0)),
            switched_from_treated=sum(1 for r in switched if r.path.values[0] == 1),
            switched_from_control=sum(1 for r in switched if r.path.values[0] == 0),
            iv_mode=iv.mode,
            theta=iv.theta.tolist(),
            tau=table.tau,
            config=_config_echo(cfg),
            timestamp=_time.strftime("%Y-%m-%dT%H:%M:%S"),
        )


def _config_echo(cfg: AnalysisConfig) -> dict:
    from dataclasses import asdict

    echo = asdict(cfg)
    echo["eval_times"] = list(cfg.eval_times)
    return echo


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    """Shortest exact decimal representation; round-trips bitwise."""
    return repr(float(x))


def write_report_json(report: AnalysisReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def write_bands_csv(report: AnalysisReport, path) -> None:
    rows = [
        (_fmt(t), _fmt(b), _fmt(s), _fmt(lo), _fmt(hi), _fmt(report.beta * t))
        for t, b, s, lo, hi in zip(report.times, report.values, report.se,
                                   report.lower, report.upper)
    ]
    _write_rows(path, ("t", "bhat", "se", "lo95", "hi95", "const_fit"), rows)


def write_testprocess_csv(report: AnalysisReport, path) -> None:
    """Observed test process sqrt(n) Bhat(t) plus up to 20 resampled paths."""
    observed = np.sqrt(report.n_subjects) * report.values
    paths = None
    if report.null_test is not None and report.null_test.resampled_paths is not None:
        paths = report.null_test.resampled_paths
    n_paths = 0 if paths is None else paths.shape[0]
    header = ["t", "observed"] + [f"path_{b + 1}" for b in range(n_paths)]
    rows = []
    for k, t in enumerate(report.times):
        row = [_fmt(t), _fmt(observed[k])]
        row += [_fmt(paths[b, k]) for b in range(n_paths)]
        rows.append(row)
    _write_rows(path, header, rows)


def write_table1_csv(mc_report, path) -> None:
    """Monte Carlo summary: bias, see, sd and coverage per estimand."""
    header = ["quantity"] + [s.label for s in mc_report.curve_stats] + ["beta"]
    stats = list(mc_report.curve_stats) + [mc_report.beta_stats]
    rows = [
        ["bias"] + [_fmt(s.bias) for s in stats],
        ["see"] + [_fmt(s.see) for s in stats],
        ["sd"] + [_fmt(s.sd) for s in stats],
        ["cp95"] + [_fmt(s.coverage) for s in stats],
    ]
    _write_rows(path, header, rows)


def write_mc_report_json(mc_report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mc_report.to_json_dict(), fh, indent=2)
        fh.write("\n")


def export_replicate(records, subjects_path, treatment_path) -> None:
    """Dump records as an analysis-ready CSV pair that round-trips exactly.

    Subjects on constant paths equal to their assigned arm are omitted from
    the treatment file (the parser defaults them back).
    """
    srows = []
    trows = []
    for r in records:
        srows.append((r.id, _fmt(r.time), str(int(r.status)), _fmt(r.z)))
        constant_adherent = (
            len(r.path.times) == 1
            and r.z in (0.0, 1.0)
            and r.path.values[0] == int(r.z)
        )
        if not constant_adherent:
            for t, v in zip(r.path.times, r.path.values):
                trows.append((r.id, _fmt(t), str(int(v))))
    _write_rows(subjects_path, _SUBJECT_COLUMNS, srows)
    _write_rows(treatment_path, _TREATMENT_COLUMNS, trows)
