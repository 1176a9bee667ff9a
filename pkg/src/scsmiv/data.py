"""Domain types: treatment paths, subject records, and the pooled event-time table.

All estimation runs on an :class:`EventTable`, which caches the at-risk
indicator and the right-continuous / left-limit treatment evaluations of every
subject at every distinct observed event time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConsecutiveEqualValues,
    DuplicateId,
    NegativeTime,
    NoEvents,
    NonBinaryTreatment,
    UnsortedChanges,
    ValidationError,
)


@dataclass(frozen=True)
class TreatmentPath:
    """Right-continuous {0,1}-valued step function with finitely many changes.

    ``times[0]`` must be 0.0 (the initial value), change times strictly
    increase, and consecutive values differ.
    """

    times: tuple[float, ...]
    values: tuple[int, ...]

    @classmethod
    def from_changes(cls, changes):
        """Build from an iterable of (time, value) pairs."""
        times, values = zip(*changes) if changes else ((), ())
        return cls(tuple(float(t) for t in times), tuple(int(v) for v in values))

    @classmethod
    def constant(cls, value):
        return cls((0.0,), (int(value),))

    @classmethod
    def single_switch(cls, initial, switch_time):
        """Initial value up to ``switch_time``, flipped from there on."""
        if switch_time <= 0.0:
            return cls.constant(1 - int(initial))
        return cls((0.0, float(switch_time)), (int(initial), 1 - int(initial)))

    def value_at(self, t: float) -> int:
        """Right-continuous evaluation D(t): last change at or before t."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.values[max(idx, 0)]

    def value_before(self, t: float) -> int:
        """Left limit D(t-): last change strictly before t."""
        idx = np.searchsorted(self.times, t, side="left") - 1
        return self.values[max(idx, 0)]

    def treated_time(self, upto: float) -> float:
        """Lebesgue measure of {s in [0, upto] : D(s) = 1}."""
        total = 0.0
        for j, (start, value) in enumerate(zip(self.times, self.values)):
            if value != 1:
                continue
            end = self.times[j + 1] if j + 1 < len(self.times) else np.inf
            total += max(min(end, upto) - start, 0.0)
        return total

    def truncated(self, t_max: float) -> "TreatmentPath":
        """Drop change points strictly after ``t_max`` (they are never used)."""
        keep = [j for j, t in enumerate(self.times) if t <= t_max]
        if len(keep) == len(self.times):
            return self
        return TreatmentPath(
            tuple(self.times[j] for j in keep), tuple(self.values[j] for j in keep)
        )


def treatment_at(path: TreatmentPath, t: float) -> int:
    """Right-continuous treatment evaluation."""
    return path.value_at(t)


def treatment_before(path: TreatmentPath, t: float) -> int:
    """Left-limit treatment evaluation D(t-)."""
    return path.value_before(t)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: censored event time, event indicator, instrument, path."""

    id: str
    time: float
    status: int
    z: float
    path: TreatmentPath
    covariates: tuple[float, ...] | None = None


def _validate_path(record: SubjectRecord) -> TreatmentPath:
    path = record.path
    if len(path.times) == 0 or len(path.times) != len(path.values):
        raise ValidationError(
            f"subject {record.id!r}: path needs matching change times and values"
        )
    if path.times[0] != 0.0:
        raise ValidationError(
            f"subject {record.id!r}: path must define an initial value at time 0"
        )
    for v in path.values:
        if v not in (0, 1):
            raise NonBinaryTreatment(record.id)
    for a, b in zip(path.times, path.times[1:]):
        if not b > a:
            raise UnsortedChanges(record.id)
    for a, b in zip(path.values, path.values[1:]):
        if a == b:
            raise ConsecutiveEqualValues(record.id)
    return path.truncated(record.time)


def validate_subjects(records) -> list[SubjectRecord]:
    """Check every subject invariant; return records with normalized paths.

    Paths are truncated at the subject's observation time (the convention
    D(t) = 0 beyond it is applied later, when the event table is built).
    """
    seen = set()
    out = []
    for rec in records:
        if rec.id in seen:
            raise DuplicateId(rec.id)
        seen.add(rec.id)
        if not np.isfinite(rec.time) or rec.time < 0:
            raise NegativeTime(rec.id)
        if rec.status not in (0, 1):
            raise ValidationError(
                f"subject {rec.id!r}: status must be 0 or 1, got {rec.status!r}"
            )
        path = _validate_path(rec)
        out.append(rec if path is rec.path else SubjectRecord(
            rec.id, rec.time, rec.status, rec.z, path, rec.covariates))
    return out


@dataclass(frozen=True)
class EventTable:
    """Pooled distinct event-time grid with per-subject caches.

    ``times`` holds the K sorted distinct event times. For every subject i and
    grid point t_k the table caches Y_i(t_k) = 1(T_i >= t_k), the
    right-continuous treatment D_i(t_k), the left limit D_i(t_k-) and the
    counting-process increment dN_i(t_k). Treatment is 0 beyond the subject's
    observation time by convention, so Y_i D_i = D_i everywhere.
    """

    ids: tuple
    time: np.ndarray          # (n,)
    status: np.ndarray        # (n,) int8
    z: np.ndarray             # (n,) float
    covariates: np.ndarray | None  # (n, p) float
    times: np.ndarray         # (K,) strictly increasing event times
    tau: float
    at_risk: np.ndarray       # (n, K) bool
    treat_at: np.ndarray      # (n, K) int8
    treat_before: np.ndarray  # (n, K) int8
    dN: np.ndarray            # (n, K) bool
    events_at: np.ndarray     # (K,) event multiplicity per grid time
    treated_person_time: np.ndarray  # (n,) integral of D over [0, min(T_i, tau)]
    path_changes: np.ndarray  # (n,) number of change points of the truncated path

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def n_events(self) -> int:
        return int(self.events_at.sum())

    def grid_index(self, t: float) -> int:
        """Index of the last event time <= t (-1 if before the first)."""
        return int(np.searchsorted(self.times, t, side="right")) - 1


def _evaluate_paths(records, grid):
    """Vectorized D(t_k) and D(t_k-) for all subjects over the grid.

    Paths with at most one switch (the overwhelmingly common case) are
    evaluated with broadcast comparisons; longer paths fall back to a
    per-subject scan.
    """
    n, k = len(records), grid.size
    at = np.zeros((n, k), dtype=np.int8)
    before = np.zeros((n, k), dtype=np.int8)
    for i, rec in enumerate(records):
        times, values = rec.path.times, rec.path.values
        if len(times) == 1:
            at[i, :] = values[0]
            before[i, :] = values[0]
        elif len(times) == 2:
            w = times[1]
            at[i, :] = np.where(grid >= w, values[1], values[0])
            before[i, :] = np.where(grid > w, values[1], values[0])
        else:
            t_arr = np.asarray(times)
            v_arr = np.asarray(values, dtype=np.int8)
            at[i, :] = v_arr[np.maximum(np.searchsorted(t_arr, grid, "right") - 1, 0)]
            before[i, :] = v_arr[np.maximum(np.searchsorted(t_arr, grid, "left") - 1, 0)]
    return at, before


def build_event_table(records, tau: float | None = None) -> EventTable:
    """Construct the estimation grid and per-subject caches.

    ``records`` must already be validated. ``tau`` defaults to the largest
    observed time; it must not cut off any event.
    """
    records = list(records)
    if not records:
        raise ValidationError("empty dataset")
    time = np.array([r.time for r in records], dtype=float)
    status = np.array([r.status for r in records], dtype=np.int8)
    z = np.array([r.z for r in records], dtype=float)

    cov = None
    dims = {len(r.covariates) if r.covariates is not None else 0 for r in records}
    if dims != {0}:
        if len(dims) != 1:
            raise ValidationError("covariate vectors must have a common length")
        cov = np.array([r.covariates for r in records], dtype=float)

    grid = np.unique(time[status == 1])
    if grid.size == 0:
        raise NoEvents()
    if grid[0] <= 0.0:
        raise ValidationError("events at time 0 are not supported")

    if tau is None:
        tau = float(time.max())
    if tau < grid[-1]:
        raise ValidationError(
            f"tau={tau:g} is smaller than the last event time {grid[-1]:g}"
        )

    at_risk = time[:, None] >= grid[None, :]
    treat_at, treat_before = _evaluate_paths(records, grid)
    # D(t) = 0 strictly beyond the observation time
    dead = time[:, None] < grid[None, :]
    treat_at[dead] = 0
    treat_before[dead] = 0
    dN = (time[:, None] == grid[None, :]) & (status[:, None] == 1)

    return EventTable(
        ids=tuple(r.id for r in records),
        time=time,
        status=status,
        z=z,
        covariates=cov,
        times=grid,
        tau=float(tau),
        at_risk=at_risk,
        treat_at=treat_at,
        treat_before=treat_before,
        dN=dN,
        events_at=dN.sum(axis=0).astype(np.int64),
        treated_person_time=np.array(
            [r.path.treated_time(min(r.time, tau)) for r in records]
        ),
        path_changes=np.array([len(r.path.times) for r in records], dtype=np.int64),
    )
