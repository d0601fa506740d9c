"""Classical treatment-effect estimators on time-anchored lab changes.

Outcomes are per-patient lab deltas: baseline = latest in-window value,
follow-up = first prediction-window value. Six estimators (naive, adjusted
OLS, IPTW, AIPW, TMLE, DR-ATT) run per kidney marker, with propensity
overlap diagnostics, patient-level bootstrap CIs, and BH correction.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cohort import MARKERS
from .errors import (
    DegenerateResample,
    InvalidConfig,
    InvalidP,
    NoEligibleRows,
    NonConvergence,
    SchemaError,
    SingleArm,
    SingularSystem,
)
from .train_eval import fit_logistic_irls, predict_logistic, raw_features
from .util import atomic_write_text, rng_for
from .vocab import ingredient_codes

METHODS = ("naive", "ols", "iptw", "aipw", "tmle", "dr-att")
PROPENSITY_CLIP = (0.01, 0.99)

# Sign of a lab delta that reads as kidney-protective.
PROTECTIVE_SIGN = {"eGFR": 1.0, "creatinine": -1.0, "BUN": -1.0}

VERDICTS = ("consistent-protective", "consistent-worsening", "mixed", "insufficient")


# ---------------------------------------------------------------------------
# Outcome rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabDeltaRow:
    """One (patient, marker) change outcome with treatment and covariates."""

    patient_id: int
    marker: str
    baseline: float
    follow_up: float
    delta: float
    treated: int
    covariates: np.ndarray


def _anchor_per_patient(pids, days, values, take_first):
    """Per-patient lab anchor: first (earliest) or last (latest) by day.

    Ties on day resolve to the later record so "latest" is well defined for
    repeated same-day draws; "first" uses the earliest record symmetrically.
    """
    if pids.size == 0:
        return {}
    order = np.lexsort((np.arange(pids.size), days, pids))
    p, v = pids[order], values[order]
    if take_first:
        at = np.flatnonzero(np.r_[True, p[1:] != p[:-1]])
    else:
        at = np.flatnonzero(np.r_[p[1:] != p[:-1], True])
    return dict(zip(p[at].tolist(), v[at].tolist()))


def lab_delta_outcomes(labs, cohort, window, med_codes):
    """Complete-case (patient, marker) rows: baseline, follow-up, delta.

    Baseline is the latest observation-window value, follow-up the first
    prediction-window value; patients missing either anchor contribute no
    row for that marker. ``treated`` flags exposure-set overlap with
    ``med_codes`` during the observation window. Covariates are the raw
    cohort features minus the exposure's own tokens in the med count.
    """
    med_codes = frozenset(med_codes)
    obs_end = window.observation_days
    horizon = window.observation_days + window.prediction_days
    covs = raw_features(cohort)
    # The exposure's own dispensings are the treatment, not a confounder;
    # they must not sit in the adjustment set (the med-count column).
    for i, row in enumerate(cohort):
        own = sum(1 for d, c, _ in row.tokens if d == "MED" and c in med_codes)
        covs[i, -1] -= own
    in_obs = labs.day_offset < obs_end
    in_pred = (labs.day_offset >= obs_end) & (labs.day_offset < horizon)
    out = []
    for marker in MARKERS:
        of_marker = labs.marker == marker
        base = _anchor_per_patient(
            labs.patient_id[of_marker & in_obs],
            labs.day_offset[of_marker & in_obs],
            labs.value[of_marker & in_obs],
            take_first=False,
        )
        follow = _anchor_per_patient(
            labs.patient_id[of_marker & in_pred],
            labs.day_offset[of_marker & in_pred],
            labs.value[of_marker & in_pred],
            take_first=True,
        )
        for i, row in enumerate(cohort):
            b = base.get(row.patient_id)
            f = follow.get(row.patient_id)
            if b is None or f is None:
                continue
            out.append(
                LabDeltaRow(
                    patient_id=row.patient_id,
                    marker=marker,
                    baseline=b,
                    follow_up=f,
                    delta=f - b,
                    treated=int(bool(row.exposures & med_codes)),
                    covariates=covs[i],
                )
            )
    if not out:
        raise NoEligibleRows("no (patient, marker) pair has both lab anchors")
    return out


def _parse(rows):
    if not rows:
        raise NoEligibleRows("no outcome rows")
    y = np.array([r.delta for r in rows], dtype=np.float64)
    t = np.array([r.treated for r in rows], dtype=np.float64)
    x = np.stack([r.covariates for r in rows]).astype(np.float64)
    return y, t, x


def _require_two_arms(t):
    n1 = int(t.sum())
    n0 = t.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleArm(f"need both arms, got {n1} treated / {n0} control")
    return n1, n0


# ---------------------------------------------------------------------------
# Estimate container
# ---------------------------------------------------------------------------


@dataclass
class CausalEstimate:
    method: str
    estimate: float
    ci_low: float = None
    ci_high: float = None
    p_value: float = None
    p_adjusted: float = None
    n_treated: int = 0
    n_control: int = 0
    overlap_violation_count: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}")
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.estimate <= self.ci_high:
                raise InvalidConfig("interval must contain the point estimate")

    def to_json_dict(self):
        return {
            "method": self.method,
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "p_adjusted": self.p_adjusted,
            "n_treated": self.n_treated,
            "n_control": self.n_control,
            "overlap_violation_count": self.overlap_violation_count,
        }


def _fsum_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return math.fsum(values) / values.size


def _fsum_var(values, mean) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return math.fsum((values - mean) ** 2) / (values.size - 1)


# Point estimates aggregate with exactly rounded sums so the result is
# invariant to row order; bootstrap replicates only feed quantiles, so they
# may trade that invariance for numpy's pairwise summation speed.
def _mean(values, exact):
    if exact:
        return _fsum_mean(values)
    return float(np.asarray(values, dtype=np.float64).mean())


def _sum(values, exact):
    if exact:
        return math.fsum(values)
    return float(np.asarray(values, dtype=np.float64).sum())


# ---------------------------------------------------------------------------
# Naive and covariate-adjusted OLS
# ---------------------------------------------------------------------------


def _welch_p(y1, y0):
    """Two-sided Welch t-test p-value; degenerate variance maps to {0, 1}."""
    m1, m0 = _fsum_mean(y1), _fsum_mean(y0)
    v1, v0 = _fsum_var(y1, m1), _fsum_var(y0, m0)
    diff = m1 - m0
    se2 = v1 / y1.size + v0 / y0.size
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else 0.0
    df_den = 0.0
    if y1.size > 1:
        df_den += (v1 / y1.size) ** 2 / (y1.size - 1)
    if y0.size > 1:
        df_den += (v0 / y0.size) ** 2 / (y0.size - 1)
    df = se2**2 / df_den if df_den > 0 else float(y1.size + y0.size - 2)
    return float(2.0 * stats.t.sf(abs(diff) / math.sqrt(se2), df))


def _naive_arrays(y, t, exact=True) -> CausalEstimate:
    n1, n0 = _require_two_arms(t)
    y1, y0 = y[t == 1.0], y[t == 0.0]
    est = _mean(y1, exact) - _mean(y0, exact)
    return CausalEstimate(
        method="naive",
        estimate=est,
        p_value=_welch_p(y1, y0) if exact else None,
        n_treated=n1,
        n_control=n0,
    )


def naive(rows) -> CausalEstimate:
    """Unadjusted difference of mean deltas with a Welch t-test p-value."""
    y, t, _ = _parse(rows)
    return _naive_arrays(y, t)


def _ridge_solve(xd, y, ridge, unpenalized_cols=(0,)):
    """Least squares with a small ridge on all but the listed columns."""
    mask = np.ones(xd.shape[1])
    mask[list(unpenalized_cols)] = 0.0
    lam = float(ridge)
    gram = xd.T @ xd
    rhs = xd.T @ y
    for _ in range(6):
        try:
            beta = np.linalg.solve(gram + lam * np.diag(mask), rhs)
            if np.all(np.isfinite(beta)):
                return beta
            raise np.linalg.LinAlgError("non-finite solution")
        except np.linalg.LinAlgError:
            lam = max(lam, 1e-8) * 10.0
    raise NonConvergence("ridge least squares stayed singular after jitter")


def _ols_arrays(y, t, x, ridge) -> CausalEstimate:
    n1, n0 = _require_two_arms(t)
    xd = np.concatenate([np.ones((y.size, 1)), t[:, None], x], axis=1)
    beta = _ridge_solve(xd, y, ridge)
    return CausalEstimate(method="ols", estimate=float(beta[1]), n_treated=n1, n_control=n0)


def ols_adjusted(rows, ridge: float = 1e-6) -> CausalEstimate:
    """Treatment coefficient from delta ~ 1 + treated + covariates."""
    y, t, x = _parse(rows)
    return _ols_arrays(y, t, x, ridge)


# ---------------------------------------------------------------------------
# Propensity, overlap, and outcome models
# ---------------------------------------------------------------------------


def _propensity_arrays(t, x, l2, beta0=None):
    """Clipped propensities plus the IRLS solution (for warm-started refits)."""
    _require_two_arms(t)
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mean) / sd
    try:
        beta = fit_logistic_irls(xs, t, l2=l2, beta0=beta0)
    except SingularSystem as exc:
        raise NonConvergence("propensity IRLS failed to converge") from exc
    e = predict_logistic(beta, xs)
    return np.clip(e, PROPENSITY_CLIP[0], PROPENSITY_CLIP[1]), beta


def fit_propensity(rows, l2: float = 1e-4) -> np.ndarray:
    """Per-row treatment probability from ridge logistic IRLS, clipped.

    Covariates are standardized internally; predictions clip to
    ``PROPENSITY_CLIP`` so downstream weights stay bounded.
    """
    _, t, x = _parse(rows)
    return _propensity_arrays(t, x, l2)[0]


@dataclass
class OverlapReport:
    """Common-support flags plus per-arm propensity histograms."""

    flags: np.ndarray
    support_low: float
    support_high: float
    n_flagged_treated: int
    n_flagged_control: int
    hist_treated: np.ndarray
    hist_control: np.ndarray
    bin_edges: np.ndarray

    @property
    def n_flagged(self) -> int:
        return self.n_flagged_treated + self.n_flagged_control


def overlap_diagnostics(propensities, treated) -> OverlapReport:
    """Flag rows outside [max of per-arm minima, min of per-arm maxima]."""
    e = np.asarray(propensities, dtype=np.float64)
    t = np.asarray(treated, dtype=np.float64)
    e1, e0 = e[t == 1.0], e[t == 0.0]
    # An absent arm imposes no bound; only two-arm data can violate support.
    lo = max(
        e1.min() if e1.size else -np.inf,
        e0.min() if e0.size else -np.inf,
    )
    hi = min(
        e1.max() if e1.size else np.inf,
        e0.max() if e0.size else np.inf,
    )
    flags = (e < lo) | (e > hi)
    edges = np.linspace(0.0, 1.0, 11)
    return OverlapReport(
        flags=flags,
        support_low=float(lo),
        support_high=float(hi),
        n_flagged_treated=int(flags[t == 1.0].sum()),
        n_flagged_control=int(flags[t == 0.0].sum()),
        hist_treated=np.histogram(e1, bins=edges)[0],
        hist_control=np.histogram(e0, bins=edges)[0],
        bin_edges=edges,
    )


@dataclass
class LinearModel:
    beta: np.ndarray  # intercept first

    def predict(self, x) -> np.ndarray:
        return x @ self.beta[1:] + self.beta[0]


ZERO_MODEL = LinearModel(beta=np.zeros(1))  # predicts 0 for any covariate width


def _outcome_models_arrays(y, t, x, ridge):
    _require_two_arms(t)
    models = []
    for arm in (1.0, 0.0):
        pick = t == arm
        xd = np.concatenate([np.ones((int(pick.sum()), 1)), x[pick]], axis=1)
        models.append(LinearModel(beta=_ridge_solve(xd, y[pick], ridge)))
    return models[0], models[1]


def fit_outcome_models(rows, ridge: float = 1e-6):
    """Per-arm OLS of delta on covariates: (treated model, control model)."""
    y, t, x = _parse(rows)
    return _outcome_models_arrays(y, t, x, ridge)


def _predict(model: LinearModel, x: np.ndarray) -> np.ndarray:
    if model.beta.size == 1:  # intercept-only (e.g. the zero model)
        return np.full(x.shape[0], model.beta[0])
    return model.predict(x)


# ---------------------------------------------------------------------------
# Weighted and doubly robust estimators
# ---------------------------------------------------------------------------


def _iptw_arrays(y, t, e, exact=True) -> CausalEstimate:
    n1, n0 = _require_two_arms(t)
    flagged = overlap_diagnostics(e, t).n_flagged if exact else 0
    w1 = t / e
    w0 = (1.0 - t) / (1.0 - e)
    est = _sum(w1 * y, exact) / _sum(w1, exact) - _sum(w0 * y, exact) / _sum(w0, exact)
    return CausalEstimate(
        method="iptw",
        estimate=est,
        n_treated=n1,
        n_control=n0,
        overlap_violation_count=flagged,
    )


def iptw(rows, propensities) -> CausalEstimate:
    """Hajek (self-normalized) inverse-probability-weighted difference."""
    y, t, _ = _parse(rows)
    return _iptw_arrays(y, t, np.asarray(propensities, dtype=np.float64))


def _aipw_arrays(y, t, x, e, outcome_models, exact=True) -> CausalEstimate:
    n1, n0 = _require_two_arms(t)
    flagged = overlap_diagnostics(e, t).n_flagged if exact else 0
    m1, m0 = outcome_models
    mh1 = _predict(m1, x)
    mh0 = _predict(m0, x)
    psi = mh1 - mh0 + t * (y - mh1) / e - (1.0 - t) * (y - mh0) / (1.0 - e)
    return CausalEstimate(
        method="aipw",
        estimate=_mean(psi, exact),
        n_treated=n1,
        n_control=n0,
        overlap_violation_count=flagged,
    )


def aipw(rows, propensities, outcome_models) -> CausalEstimate:
    """Mean of the doubly robust score psi."""
    y, t, x = _parse(rows)
    return _aipw_arrays(y, t, x, np.asarray(propensities, dtype=np.float64), outcome_models)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _sigmoid_np(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _tmle_arrays(y, t, x, e, outcome_models, max_iter, tol, exact=True) -> CausalEstimate:
    n1, n0 = _require_two_arms(t)
    flagged = overlap_diagnostics(e, t).n_flagged if exact else 0
    lo, hi = float(y.min()), float(y.max())
    if hi == lo:  # constant outcome carries no effect
        return CausalEstimate(
            method="tmle", estimate=0.0, n_treated=n1, n_control=n0,
            overlap_violation_count=flagged,
        )
    span = hi - lo
    ys = (y - lo) / span
    m1, m0 = outcome_models
    bound = 1e-3  # keep logits finite
    q1 = np.clip((_predict(m1, x) - lo) / span, bound, 1.0 - bound)
    q0 = np.clip((_predict(m0, x) - lo) / span, bound, 1.0 - bound)
    qt = np.where(t == 1.0, q1, q0)
    h = t / e - (1.0 - t) / (1.0 - e)
    logit_qt = _logit(qt)
    eps = 0.0
    for _ in range(max_iter):
        p = _sigmoid_np(logit_qt + eps * h)
        score = _sum(h * (ys - p), exact)
        if abs(score) < tol * max(1.0, y.size):
            break
        info = _sum(h * h * p * (1.0 - p), exact)
        if info <= 0.0 or not math.isfinite(info):
            raise NonConvergence("degenerate information in the fluctuation step")
        step = score / info
        eps += step
        if abs(step) < 1e-13:
            break
    else:
        raise NonConvergence(f"fluctuation did not converge in {max_iter} iterations")
    q1u = _sigmoid_np(_logit(q1) + eps / e)
    q0u = _sigmoid_np(_logit(q0) - eps / (1.0 - e))
    est = _mean(q1u - q0u, exact) * span
    return CausalEstimate(
        method="tmle",
        estimate=est,
        n_treated=n1,
        n_control=n0,
        overlap_violation_count=flagged,
    )


def tmle(rows, propensities, outcome_models, *, max_iter: int = 50, tol: float = 1e-10) -> CausalEstimate:
    """One-step targeted update of the outcome fits along the clever covariate.

    The delta outcome is min-max scaled to [0, 1], a single epsilon is fit by
    Newton iterations on the logistic score, and the fluctuated potential
    outcomes are rescaled back to delta units.
    """
    y, t, x = _parse(rows)
    return _tmle_arrays(y, t, x, np.asarray(propensities, dtype=np.float64), outcome_models, max_iter, tol)


def _dr_att_arrays(y, t, x, e, outcome_models, exact=True) -> CausalEstimate:
    _require_two_arms(t)
    # The common-support restriction is part of this estimator, not a
    # diagnostic, so the overlap scan runs in both summation modes.
    rep = overlap_diagnostics(e, t)
    keep = ~rep.flags
    yk, tk, xk, ek = y[keep], t[keep], x[keep], e[keep]
    n1 = int(tk.sum())
    n0 = int(tk.size - n1)
    if n1 == 0 or n0 == 0:
        raise SingleArm("common-support restriction emptied an arm")
    _, m0 = outcome_models
    resid = yk - _predict(m0, xk)
    treated_term = _sum(resid[tk == 1.0], exact) / n1
    w = (ek / (1.0 - ek))[tk == 0.0]
    control_term = _sum(w * resid[tk == 0.0], exact) / _sum(w, exact)
    return CausalEstimate(
        method="dr-att",
        estimate=treated_term - control_term,
        n_treated=n1,
        n_control=n0,
        overlap_violation_count=rep.n_flagged,
    )


def dr_att(rows, propensities, outcome_models) -> CausalEstimate:
    """ATT-style doubly robust contrast on the common-support subset.

    Treated rows carry weight 1 and controls e/(1-e); both arms are
    residualized against the control outcome model. Rows outside common
    support are flagged and excluded from this estimator.
    """
    y, t, x = _parse(rows)
    return _dr_att_arrays(y, t, x, np.asarray(propensities, dtype=np.float64), outcome_models)


# ---------------------------------------------------------------------------
# Point-estimate dispatch
# ---------------------------------------------------------------------------


def point_estimate(method: str, rows, *, propensity_l2: float = 1e-4, ridge: float = 1e-6) -> CausalEstimate:
    """Fit whatever the named method needs and return its estimate."""
    if method == "naive":
        return naive(rows)
    if method == "ols":
        return ols_adjusted(rows, ridge)
    e = fit_propensity(rows, propensity_l2)
    if method == "iptw":
        return iptw(rows, e)
    models = fit_outcome_models(rows, ridge)
    if method == "aipw":
        return aipw(rows, e, models)
    if method == "tmle":
        return tmle(rows, e, models)
    if method == "dr-att":
        return dr_att(rows, e, models)
    raise InvalidConfig(f"unknown method {method!r}")


def _grid_arrays(y, t, x, *, propensity_l2, ridge, methods=METHODS, beta0=None, exact=True):
    """Requested estimates sharing one propensity and outcome fit.

    Returns (grid, propensity beta); the beta warm-starts bootstrap refits.
    """
    grid = {}
    if "naive" in methods:
        grid["naive"] = _naive_arrays(y, t, exact)
    if "ols" in methods:
        grid["ols"] = _ols_arrays(y, t, x, ridge)
    beta = None
    weighted = [m for m in ("iptw", "aipw", "tmle", "dr-att") if m in methods]
    if weighted:
        e, beta = _propensity_arrays(t, x, propensity_l2, beta0=beta0)
        if "iptw" in methods:
            grid["iptw"] = _iptw_arrays(y, t, e, exact)
        if set(weighted) - {"iptw"}:
            models = _outcome_models_arrays(y, t, x, ridge)
            if "aipw" in methods:
                grid["aipw"] = _aipw_arrays(y, t, x, e, models, exact)
            if "tmle" in methods:
                grid["tmle"] = _tmle_arrays(y, t, x, e, models, 50, 1e-10, exact)
            if "dr-att" in methods:
                grid["dr-att"] = _dr_att_arrays(y, t, x, e, models, exact)
    return grid, beta


def estimate_grid(rows, *, propensity_l2: float = 1e-4, ridge: float = 1e-6) -> dict:
    """All six point estimates sharing one propensity and outcome fit."""
    y, t, x = _parse(rows)
    return _grid_arrays(y, t, x, propensity_l2=propensity_l2, ridge=ridge)[0]


# ---------------------------------------------------------------------------
# Bootstrap and multiplicity
# ---------------------------------------------------------------------------


def _patient_groups(rows):
    """Row indices grouped by patient, in first-appearance order."""
    groups = {}
    for i, row in enumerate(rows):
        groups.setdefault(row.patient_id, []).append(i)
    return list(groups.values())


def _resample(rows, groups, rng):
    draw = rng.integers(0, len(groups), len(groups))
    return [rows[i] for g in draw for i in groups[g]]


def _bootstrap_grid(
    rows,
    b: int,
    seed: int,
    *,
    methods=METHODS,
    propensity_l2: float = 1e-4,
    ridge: float = 1e-6,
    max_failure_rate: float = 0.1,
    stream=("bootstrap",),
) -> dict:
    """Patient-level bootstrap of the shared-fit grid: method -> b estimates.

    Rows are parsed to arrays once and each resample is assembled by index
    gather, so the per-replicate cost is the model fits alone. Replicates
    aggregate with pairwise summation (exact=False): they only feed
    quantiles, which do not need the point path's order invariance. Failed
    resamples stay NaN; more than ``max_failure_rate`` of them is an error.
    """
    if b < 100:
        raise InvalidConfig("need at least 100 bootstrap resamples")
    y, t, x = _parse(rows)
    groups = _patient_groups(rows)
    lengths = np.array([len(g) for g in groups], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    flat = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups])
    try:
        _, beta0 = _grid_arrays(y, t, x, propensity_l2=propensity_l2, ridge=ridge, methods=methods)
    except (SingleArm, NonConvergence, NoEligibleRows):
        beta0 = None  # cold-start the replicates instead
    values = {m: np.full(b, np.nan) for m in methods}
    failed = 0
    for i in range(b):
        rng = rng_for(seed, *stream, i)
        draw = rng.integers(0, len(groups), len(groups))
        counts = lengths[draw]
        base = np.repeat(starts[draw], counts)
        within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        idx = flat[base + within]
        try:
            grid, _ = _grid_arrays(
                y[idx], t[idx], x[idx], propensity_l2=propensity_l2, ridge=ridge,
                methods=methods, beta0=beta0, exact=False,
            )
        except (SingleArm, NonConvergence, NoEligibleRows):
            failed += 1
            continue
        for m in methods:
            values[m][i] = grid[m].estimate
    if failed > max_failure_rate * b:
        raise DegenerateResample(f"{failed}/{b} resamples failed")
    return values


def bootstrap_replicates(estimator, rows, b: int = 200, seed: int = 0, max_failure_rate: float = 0.1) -> np.ndarray:
    """Patient-level bootstrap values of ``estimator(rows)``; NaN rows dropped.

    Raises DegenerateResample when the estimator fails on more than
    ``max_failure_rate`` of the resamples.
    """
    if b < 100:
        raise InvalidConfig("need at least 100 bootstrap resamples")
    groups = _patient_groups(rows)
    values = np.full(b, np.nan)
    failed = 0
    for i in range(b):
        sample = _resample(rows, groups, rng_for(seed, "bootstrap", i))
        try:
            values[i] = estimator(sample)
        except (SingleArm, NonConvergence, NoEligibleRows):
            failed += 1
    if failed > max_failure_rate * b:
        raise DegenerateResample(f"estimator failed on {failed}/{b} resamples")
    return values[np.isfinite(values)]


def bootstrap_ci(estimator, rows, b: int = 200, seed: int = 0, level: float = 0.95):
    """Percentile interval over patient-level resamples; deterministic in seed."""
    if not 0.0 < level < 1.0:
        raise InvalidConfig("level must lie in (0, 1)")
    values = bootstrap_replicates(estimator, rows, b, seed)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


def _normal_p(estimate: float, se: float) -> float:
    if se == 0.0:
        return 1.0 if estimate == 0.0 else 0.0
    return float(2.0 * stats.norm.sf(abs(estimate) / se))


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjustment, monotone and capped at 1."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidP("p-values must be a flat sequence")
    if p.size == 0:
        return p.copy()
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InvalidP("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


# ---------------------------------------------------------------------------
# Per-ingredient validation grid
# ---------------------------------------------------------------------------


@dataclass
class ValidationRow:
    ingredient: str
    marker: str
    method: str
    estimate: float
    ci_low: float
    ci_high: float
    p: float
    p_bh: float
    n_treated: int
    n_control: int
    overlap_flags: int
    verdict: str


@dataclass
class ValidationReport:
    ingredient: str
    verdict: str
    rows: list
    marker_directions: dict


def _marker_direction(marker: str, estimate: float) -> str:
    signed = PROTECTIVE_SIGN[marker] * estimate
    if signed > 0.0:
        return "protective"
    if signed < 0.0:
        return "worsening"
    return "flat"


def validate_medication(
    labs,
    cohort,
    catalog,
    ingredient: str,
    window,
    *,
    min_support: int = 25,
    b: int = 200,
    seed: int = 0,
    level: float = 0.95,
    propensity_l2: float = 1e-4,
    ridge: float = 1e-6,
) -> ValidationReport:
    """Estimator grid per kidney marker plus a cross-marker verdict.

    Markers where either arm falls below ``min_support`` are skipped. The
    verdict aggregates the AIPW direction of every qualifying marker:
    all protective / all worsening map to the consistent verdicts, any
    disagreement is "mixed", and no qualifying marker is "insufficient".
    """
    codes = ingredient_codes(catalog, ingredient)
    try:
        all_rows = lab_delta_outcomes(labs, cohort, window, codes)
    except NoEligibleRows:
        return ValidationReport(ingredient=ingredient, verdict="insufficient", rows=[], marker_directions={})
    alpha = (1.0 - level) / 2.0
    entries = []
    directions = {}
    for marker in MARKERS:
        rows_m = [r for r in all_rows if r.marker == marker]
        n1 = sum(r.treated for r in rows_m)
        n0 = len(rows_m) - n1
        if n1 < min_support or n0 < min_support:
            continue
        points = estimate_grid(rows_m, propensity_l2=propensity_l2, ridge=ridge)
        directions[marker] = _marker_direction(marker, points["aipw"].estimate)

        # One shared resample stream: refit everything per replicate and read
        # all six methods off the same resampled cohort.
        reps = _bootstrap_grid(
            rows_m, b, seed, propensity_l2=propensity_l2, ridge=ridge, stream=("bootstrap", marker)
        )

        for method in METHODS:
            est = points[method]
            values = reps[method]
            values = values[np.isfinite(values)]
            lo, hi = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
            # The interval is widened if needed so it contains the point
            # estimate, which the estimate type guarantees by contract.
            lo = min(float(lo), est.estimate)
            hi = max(float(hi), est.estimate)
            if method == "naive":
                p = est.p_value
            else:
                se = float(values.std(ddof=1)) if values.size > 1 else 0.0
                p = _normal_p(est.estimate, se)
            entries.append(
                ValidationRow(
                    ingredient=ingredient,
                    marker=marker,
                    method=method,
                    estimate=est.estimate,
                    ci_low=lo,
                    ci_high=hi,
                    p=p,
                    p_bh=np.nan,  # filled after the grid is complete
                    n_treated=est.n_treated,
                    n_control=est.n_control,
                    overlap_flags=est.overlap_violation_count,
                    verdict="",
                )
            )

    if not directions:
        verdict = "insufficient"
    elif all(d == "protective" for d in directions.values()):
        verdict = "consistent-protective"
    elif all(d == "worsening" for d in directions.values()):
        verdict = "consistent-worsening"
    else:
        verdict = "mixed"

    if entries:
        adjusted = bh_adjust([row.p for row in entries])
        for row, q in zip(entries, adjusted):
            row.p_bh = float(q)
            row.verdict = verdict
    return ValidationReport(
        ingredient=ingredient, verdict=verdict, rows=entries, marker_directions=directions
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

VALIDATION_HEADER = [
    "ingredient",
    "marker",
    "method",
    "estimate",
    "ci_low",
    "ci_high",
    "p",
    "p_bh",
    "n_treated",
    "n_control",
    "overlap_flags",
    "verdict",
]


def write_validation_csv(reports, path, meta: str = None) -> None:
    buf = io.StringIO()
    if meta:  # provenance comment, e.g. config hash and seed
        buf.write(f"# {meta}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(VALIDATION_HEADER)
    for report in reports:
        for row in report.rows:
            writer.writerow(
                [
                    row.ingredient,
                    row.marker,
                    row.method,
                    repr(row.estimate),
                    repr(row.ci_low),
                    repr(row.ci_high),
                    repr(row.p),
                    repr(row.p_bh),
                    row.n_treated,
                    row.n_control,
                    row.overlap_flags,
                    row.verdict,
                ]
            )
    atomic_write_text(path, buf.getvalue())


def read_validation_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if header != VALIDATION_HEADER:
            raise SchemaError(f"unexpected validation header: {header}")
        out = []
        for rec in reader:
            out.append(
                ValidationRow(
                    ingredient=rec[0],
                    marker=rec[1],
                    method=rec[2],
                    estimate=float(rec[3]),
                    ci_low=float(rec[4]),
                    ci_high=float(rec[5]),
                    p=float(rec[6]),
                    p_bh=float(rec[7]),
                    n_treated=int(rec[8]),
                    n_control=int(rec[9]),
                    overlap_flags=int(rec[10]),
                    verdict=rec[11],
                )
            )
        return out
