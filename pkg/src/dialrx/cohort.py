"""Leakage-safe fixed-window cohort construction.

Event and lab tables come in as columnar arrays keyed by an integer patient
id, with day offsets measured from each patient's index date (day of first
recorded event). The observation window is [0, observation_days) and the
prediction window is [observation_days, observation_days + prediction_days),
both half-open. Labels are derived only from prediction-window outcomes;
patients whose outcome falls inside the observation window are excluded
outright.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCohort, InvalidConfig, InvalidFractions, SchemaError
from .util import atomic_write_text

DOMAINS = ("DX", "PROC", "MED")
MARKERS = ("eGFR", "creatinine", "BUN")
LAB_FEATURE_NAMES = tuple(f"{m}_{s}" for m in MARKERS for s in ("last", "mean", "slope"))


@dataclass(frozen=True)
class WindowSpec:
    observation_days: int = 90
    prediction_days: int = 730

    def __post_init__(self):
        if self.observation_days <= 0 or self.prediction_days <= 0:
            raise InvalidConfig("window lengths must be positive")

    @property
    def horizon(self) -> int:
        return self.observation_days + self.prediction_days


def _column(rows, idx, dtype):
    return np.asarray([r[idx] for r in rows], dtype=dtype)


@dataclass
class EventTable:
    """Columnar (patient_id, day_offset, domain, code) records."""

    patient_id: np.ndarray
    day_offset: np.ndarray
    domain: np.ndarray
    code: np.ndarray

    def __post_init__(self):
        self.patient_id = np.asarray(self.patient_id, dtype=np.int64)
        self.day_offset = np.asarray(self.day_offset, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.str_)
        self.code = np.asarray(self.code, dtype=np.str_)
        n = self.patient_id.shape[0]
        if not (self.day_offset.shape[0] == self.domain.shape[0] == self.code.shape[0] == n):
            raise SchemaError("event columns have unequal lengths")
        if n and self.day_offset.min() < 0:
            raise SchemaError("negative day_offset")
        if n and not np.isin(self.domain, DOMAINS).all():
            bad = sorted(set(self.domain.tolist()) - set(DOMAINS))
            raise SchemaError(f"unknown event domains: {bad}")

    @property
    def n(self) -> int:
        return int(self.patient_id.shape[0])

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        return cls(
            _column(rows, 0, np.int64) if rows else np.empty(0, np.int64),
            _column(rows, 1, np.int64) if rows else np.empty(0, np.int64),
            _column(rows, 2, np.str_) if rows else np.empty(0, np.str_),
            _column(rows, 3, np.str_) if rows else np.empty(0, np.str_),
        )


@dataclass
class LabTable:
    """Columnar (patient_id, day_offset, marker, value) records."""

    patient_id: np.ndarray
    day_offset: np.ndarray
    marker: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.patient_id = np.asarray(self.patient_id, dtype=np.int64)
        self.day_offset = np.asarray(self.day_offset, dtype=np.int64)
        self.marker = np.asarray(self.marker, dtype=np.str_)
        self.value = np.asarray(self.value, dtype=np.float64)
        n = self.patient_id.shape[0]
        if not (self.day_offset.shape[0] == self.marker.shape[0] == self.value.shape[0] == n):
            raise SchemaError("lab columns have unequal lengths")
        if n and self.day_offset.min() < 0:
            raise SchemaError("negative day_offset")
        if n and not np.isin(self.marker, MARKERS).all():
            bad = sorted(set(self.marker.tolist()) - set(MARKERS))
            raise SchemaError(f"unknown lab markers: {bad}")
        if n and not np.all(np.isfinite(self.value)):
            raise SchemaError("non-finite lab value")

    @property
    def n(self) -> int:
        return int(self.patient_id.shape[0])

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        return cls(
            _column(rows, 0, np.int64) if rows else np.empty(0, np.int64),
            _column(rows, 1, np.int64) if rows else np.empty(0, np.int64),
            _column(rows, 2, np.str_) if rows else np.empty(0, np.str_),
            _column(rows, 3, np.float64) if rows else np.empty(0, np.float64),
        )


def read_events_csv(path) -> EventTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        want = ["patient_id", "day_offset", "domain", "code"]
        if reader.fieldnames != want:
            raise SchemaError(f"events header {reader.fieldnames} != {want}")
        rows = [(r["patient_id"], r["day_offset"], r["domain"], r["code"]) for r in reader]
    try:
        return EventTable.from_rows(rows)
    except ValueError as exc:
        raise SchemaError(f"bad events row: {exc}") from exc


def read_labs_csv(path) -> LabTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        want = ["patient_id", "day_offset", "marker", "value"]
        if reader.fieldnames != want:
            raise SchemaError(f"labs header {reader.fieldnames} != {want}")
        rows = [(r["patient_id"], r["day_offset"], r["marker"], r["value"]) for r in reader]
    try:
        return LabTable.from_rows(rows)
    except ValueError as exc:
        raise SchemaError(f"bad labs row: {exc}") from exc


def write_events_csv(events: EventTable, path, meta: str = None) -> None:
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "day_offset", "domain", "code"])
    for i in range(events.n):
        w.writerow([events.patient_id[i], events.day_offset[i], events.domain[i], events.code[i]])
    atomic_write_text(path, buf.getvalue())


def write_labs_csv(labs: LabTable, path, meta: str = None) -> None:
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "day_offset", "marker", "value"])
    for i in range(labs.n):
        w.writerow([labs.patient_id[i], labs.day_offset[i], labs.marker[i], repr(float(labs.value[i]))])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Labeling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Include:
    label: int


@dataclass(frozen=True)
class ExcludeLeakage:
    pass


@dataclass(frozen=True)
class ExcludeInsufficient:
    pass


def label_patient(
    events,
    outcome_codes,
    window: WindowSpec,
    *,
    min_obs_events: int = 1,
    last_observed_day: int | None = None,
):
    """Classify one patient from (day_offset, code) pairs.

    Leakage dominates: an outcome inside the observation window excludes the
    patient even if eligibility also fails. Eligibility needs at least
    ``min_obs_events`` observation-window events, and either recorded data
    through the full horizon (last day >= horizon - 1, lab days count via
    ``last_observed_day``) or an outcome event anywhere.
    """
    outcome_codes = frozenset(outcome_codes)
    obs, horizon = window.observation_days, window.horizon
    n_obs = 0
    last_day = -1 if last_observed_day is None else int(last_observed_day)
    leak = has_outcome = positive = False
    for day, code in events:
        day = int(day)
        last_day = max(last_day, day)
        if day < obs:
            n_obs += 1
        if code in outcome_codes:
            has_outcome = True
            if day < obs:
                leak = True
            elif day < horizon:
                positive = True
    if leak:
        return ExcludeLeakage()
    if n_obs < min_obs_events or not (last_day + 1 >= horizon or has_outcome):
        return ExcludeInsufficient()
    return Include(label=int(positive))


# ---------------------------------------------------------------------------
# Lab trend features
# ---------------------------------------------------------------------------


def _trend(days: np.ndarray, values: np.ndarray):
    """(last, mean, slope) for one marker; slope is least-squares per day."""
    order = np.lexsort((values, days))
    days, values = days[order].astype(np.float64), values[order]
    last = values[-1]
    mean = values.mean()
    n = days.shape[0]
    sxx = (days * days).sum() - n * days.mean() ** 2
    if n < 2 or sxx <= 1e-12:
        return last, mean, 0.0
    sxy = (days * values).sum() - n * days.mean() * values.mean()
    return last, mean, sxy / sxx


def lab_trend_features(labs, window: WindowSpec):
    """Per-marker (last, mean, slope) plus presence mask for one patient.

    ``labs`` is an iterable of (day_offset, marker, value). Only days inside
    the observation window contribute. Returns (features[9], mask[3]) in
    MARKERS order.
    """
    obs = window.observation_days
    per = {m: ([], []) for m in MARKERS}
    for day, marker, value in labs:
        if int(day) < obs:
            per[marker][0].append(int(day))
            per[marker][1].append(float(value))
    feats = np.zeros(3 * len(MARKERS))
    mask = np.zeros(len(MARKERS))
    for j, m in enumerate(MARKERS):
        days, values = per[m]
        if not days:
            continue
        mask[j] = 1.0
        feats[3 * j : 3 * j + 3] = _trend(np.asarray(days), np.asarray(values))
    return feats, mask


# ---------------------------------------------------------------------------
# Cohort assembly
# ---------------------------------------------------------------------------


@dataclass
class CohortRow:
    patient_id: int
    label: int
    tokens: tuple  # ((domain, code, day_offset), ...) within the observation window
    lab_features: np.ndarray  # (9,) in LAB_FEATURE_NAMES order
    lab_mask: np.ndarray  # (3,) in MARKERS order
    n_dx: int
    n_proc: int
    n_med: int
    exposures: frozenset = field(default_factory=frozenset)  # MED codes in window

    def to_json_dict(self) -> dict:
        return {
            "patient_id": int(self.patient_id),
            "label": int(self.label),
            "tokens": [[d, c, int(day)] for d, c, day in self.tokens],
            "lab_features": [float(x) for x in self.lab_features],
            "lab_mask": [float(x) for x in self.lab_mask],
            "n_dx": int(self.n_dx),
            "n_proc": int(self.n_proc),
            "n_med": int(self.n_med),
            "exposures": sorted(self.exposures),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CohortRow":
        return cls(
            patient_id=int(d["patient_id"]),
            label=int(d["label"]),
            tokens=tuple((t[0], t[1], int(t[2])) for t in d["tokens"]),
            lab_features=np.asarray(d["lab_features"], dtype=np.float64),
            lab_mask=np.asarray(d["lab_mask"], dtype=np.float64),
            n_dx=int(d["n_dx"]),
            n_proc=int(d["n_proc"]),
            n_med=int(d["n_med"]),
            exposures=frozenset(d["exposures"]),
        )


def _segment_starts(sorted_keys: np.ndarray):
    """Start indices of equal-key runs in a sorted key array."""
    n = sorted_keys.shape[0]
    if n == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    ends = np.r_[starts[1:], n]
    return starts, ends


def build_cohort(
    events: EventTable,
    labs: LabTable,
    window: WindowSpec,
    outcome_codes,
    *,
    min_obs_events: int = 1,
    with_tokens: bool = True,
):
    """One CohortRow per included patient, ordered by patient_id.

    Deterministic and insensitive to input row permutation. ``with_tokens``
    False skips materializing per-patient token tuples (feature-only callers
    at large n); exposures and counts are still populated.
    """
    if events.n == 0:
        raise EmptyCohort("no events")
    outcome_list = np.asarray(sorted(set(outcome_codes)), dtype=np.str_)
    obs, horizon = window.observation_days, window.horizon

    # Per-patient aggregation runs on the unsorted tables via bincount;
    # sorting happens only where grouped slices are required (tokens, meds).
    day = events.day_offset
    dom = events.domain
    code = events.code

    upids = np.unique(events.patient_id)
    n_pat = upids.shape[0]
    inv = np.searchsorted(upids, events.patient_id)

    is_outcome = np.isin(code, outcome_list) if outcome_list.size else np.zeros(events.n, bool)
    in_obs = day < obs
    in_pred = (day >= obs) & (day < horizon)

    leak = np.bincount(inv[is_outcome & in_obs], minlength=n_pat) > 0
    positive = np.bincount(inv[is_outcome & in_pred], minlength=n_pat) > 0
    has_outcome = np.bincount(inv[is_outcome], minlength=n_pat) > 0
    n_obs_events = np.bincount(inv[in_obs], minlength=n_pat)
    last_day = np.full(n_pat, -1, np.int64)
    np.maximum.at(last_day, inv, day)

    if labs.n:
        keep = np.isin(labs.patient_id, upids)
        lp = np.searchsorted(upids, labs.patient_id[keep])
        np.maximum.at(last_day, lp, labs.day_offset[keep])

    eligible = (n_obs_events >= min_obs_events) & ((last_day + 1 >= horizon) | has_outcome)
    included = eligible & ~leak
    if not included.any():
        raise EmptyCohort("no patient passes labeling and eligibility")

    inc_pids = upids[included]
    n_inc = inc_pids.shape[0]
    inc_of_upid = np.full(n_pat, -1, np.int64)
    inc_of_upid[included] = np.arange(n_inc)

    inc_row = in_obs & included[inv]
    counts = np.zeros((n_inc, len(DOMAINS)), np.int64)
    for j, d in enumerate(DOMAINS):
        counts[:, j] = np.bincount(inc_of_upid[inv[inc_row & (dom == d)]], minlength=n_inc)

    # Lab features per (included patient, marker) segment.
    feats = np.zeros((n_inc, 3 * len(MARKERS)))
    lmask = np.zeros((n_inc, len(MARKERS)))
    if labs.n:
        lsel = (labs.day_offset < obs) & np.isin(labs.patient_id, inc_pids)
        if lsel.any():
            li = np.searchsorted(inc_pids, labs.patient_id[lsel])
            lmarker = labs.marker[lsel]
            lm = np.zeros(lmarker.shape[0], np.int64)
            for j, m in enumerate(MARKERS):
                lm[lmarker == m] = j
            ld = labs.day_offset[lsel].astype(np.float64)
            lv = labs.value[lsel]
            key = li * len(MARKERS) + lm
            lorder = np.lexsort((lv, ld, key))
            key, ld, lv = key[lorder], ld[lorder], lv[lorder]
            s, e = _segment_starts(key)
            n_seg = (e - s).astype(np.float64)
            cum_v = np.r_[0.0, np.cumsum(lv)]
            cum_d = np.r_[0.0, np.cumsum(ld)]
            cum_dv = np.r_[0.0, np.cumsum(ld * lv)]
            cum_dd = np.r_[0.0, np.cumsum(ld * ld)]
            sum_v = cum_v[e] - cum_v[s]
            sum_d = cum_d[e] - cum_d[s]
            sum_dv = cum_dv[e] - cum_dv[s]
            sum_dd = cum_dd[e] - cum_dd[s]
            mean_v = sum_v / n_seg
            mean_d = sum_d / n_seg
            sxx = sum_dd - n_seg * mean_d * mean_d
            sxy = sum_dv - n_seg * mean_d * mean_v
            slope = np.where((n_seg >= 2) & (sxx > 1e-12), sxy / np.maximum(sxx, 1e-300), 0.0)
            last = lv[e - 1]
            row = key[s] // len(MARKERS)
            col = key[s] % len(MARKERS)
            feats[row, 3 * col] = last
            feats[row, 3 * col + 1] = mean_v
            feats[row, 3 * col + 2] = slope
            lmask[row, col] = 1.0

    def grouped(select, *keys):
        """Rows chosen by ``select``, sorted by (patient, *keys); returns
        (per-patient start, per-patient end, row indices in order)."""
        kinc = inc_of_upid[inv[select]]
        idx = np.flatnonzero(select)
        order = np.lexsort(tuple(k[idx] for k in reversed(keys)) + (kinc,))
        kinc = kinc[order]
        seg_s, seg_e = _segment_starts(kinc)
        lo = np.zeros(n_inc, np.int64)
        hi = np.zeros(n_inc, np.int64)
        lo[kinc[seg_s]] = seg_s
        hi[kinc[seg_s]] = seg_e
        return lo, hi, idx[order]

    label_arr = positive[included].astype(np.int64)

    med_lo, med_hi, med_idx = grouped(inc_row & (dom == "MED"))
    med_codes = code[med_idx].tolist()

    if with_tokens:
        tok_lo, tok_hi, tok_idx = grouped(inc_row, day, dom, code)
        kdom_list = dom[tok_idx].tolist()
        kcode_list = code[tok_idx].tolist()
        kday_list = day[tok_idx].tolist()

    dx_col, proc_col, med_col = (DOMAINS.index(d) for d in ("DX", "PROC", "MED"))
    rows = []
    for i in range(n_inc):
        meds = frozenset(med_codes[med_lo[i] : med_hi[i]])
        tokens = ()
        if with_tokens:
            s, e = int(tok_lo[i]), int(tok_hi[i])
            tokens = tuple((kdom_list[j], kcode_list[j], kday_list[j]) for j in range(s, e))
        rows.append(
            CohortRow(
                patient_id=int(inc_pids[i]),
                label=int(label_arr[i]),
                tokens=tokens,
                lab_features=feats[i],
                lab_mask=lmask[i],
                n_dx=int(counts[i, dx_col]),
                n_proc=int(counts[i, proc_col]),
                n_med=int(counts[i, med_col]),
                exposures=meds,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Time-aware split
# ---------------------------------------------------------------------------


def split_sizes(n: int, fractions) -> list:
    """Largest-remainder apportionment; remainder ties go to later splits."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    base = [int(np.floor(f * n)) for f in fractions]
    rem = [f * n - b for f, b in zip(fractions, base)]
    for _ in range(n - sum(base)):
        i = max(range(3), key=lambda j: (rem[j], j))
        base[i] += 1
        rem[i] = -1.0
    return base


def time_aware_split(cohort, fractions=(0.7, 0.15, 0.15)):
    """Contiguous chronological blocks; index-date ties break by patient_id.

    With day offsets relative to each patient's own index date, the absolute
    index dates are not recoverable from the rows, so ordering degenerates to
    the documented tie-break: ascending patient_id (ids are assigned in
    enrollment order upstream).
    """
    sizes = split_sizes(len(cohort), fractions)
    ordered = sorted(cohort, key=lambda r: r.patient_id)
    a, b = sizes[0], sizes[0] + sizes[1]
    return ordered[:a], ordered[a:b], ordered[b:]
