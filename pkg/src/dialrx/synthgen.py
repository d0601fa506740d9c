"""Synthetic longitudinal EHR generator with queryable planted effects.

One latent severity scalar per patient drives event volume, treatment
assignment (confounding by indication), lab levels, lab decline between the
observation and prediction windows, and the outcome logit. Planted effects
are additive: ingredient exposure shifts the outcome logit and the follow-up
lab means, so true effects are available in closed form (labs) or by Monte
Carlo on the generative equations (outcome probabilities).

Every patient gets sentinel visit events at day 0 and at the horizon day, so
the entire generated population is cohort-eligible and the realized cohort
prevalence tracks the calibrated target.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import EventTable, LabTable, MARKERS
from .errors import InvalidConfig
from .util import config_hash, rng_for
from .vocab import MedCatalog

SENTINEL_CODE = "PROC_VISIT"

# (ingredient, category, number of med codes)
_DEFAULT_INGREDIENTS = (
    ("lisinopril", "ACE/ARB", 2),
    ("losartan", "ACE/ARB", 1),
    ("furosemide", "loop diuretic", 2),
    ("bumetanide", "loop diuretic", 1),
    ("metformin", "biguanide", 1),
    ("atorvastatin", "statin", 1),
)

DEFAULT_PLANTED_EFFECTS = {
    "lisinopril": -0.5,
    "losartan": -0.4,
    "furosemide": 0.7,
    "bumetanide": 0.5,
    "metformin": 0.0,
    "atorvastatin": 0.0,
}

DEFAULT_LAB_EFFECTS = {
    "lisinopril": {"eGFR": 2.0, "creatinine": -0.06, "BUN": -1.0},
    "furosemide": {"eGFR": -5.0, "creatinine": 0.15, "BUN": 2.5},
}


@dataclass(frozen=True)
class LabModel:
    """Marker generative parameters: level, decline, and noise."""

    mean: float
    sev_coef: float  # latent level = mean + sev_coef * severity
    noise_sd: float
    drift: float  # follow-up shift added to the latent level
    drift_sev_coef: float  # severity-dependent decline (the lab confounder)


DEFAULT_LAB_MODEL = {
    "eGFR": LabModel(mean=90.0, sev_coef=-15.0, noise_sd=1.0, drift=-2.0, drift_sev_coef=-3.0),
    "creatinine": LabModel(mean=1.2, sev_coef=0.35, noise_sd=0.04, drift=0.05, drift_sev_coef=0.10),
    "BUN": LabModel(mean=18.0, sev_coef=5.0, noise_sd=1.5, drift=1.0, drift_sev_coef=1.5),
}

DEFAULT_AVAILABILITY = {"eGFR": 0.935, "creatinine": 0.041, "BUN": 0.394}


def default_catalog() -> MedCatalog:
    codes = {ing: {f"RX_{ing}_{k}" for k in range(n)} for ing, _cat, n in _DEFAULT_INGREDIENTS}
    cats = {ing: cat for ing, cat, _n in _DEFAULT_INGREDIENTS}
    return MedCatalog(codes_by_ingredient=codes, category_by_ingredient=cats)


@dataclass
class GenConfig:
    n_patients: int = 20_000
    seed: int = 0
    n_dx_codes: int = 60
    n_proc_codes: int = 30
    n_med_codes: int = 20  # distractor MED codes outside the catalog
    prevalence: float = 0.011
    planted_effects: dict = field(default_factory=lambda: dict(DEFAULT_PLANTED_EFFECTS))
    lab_effects: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_LAB_EFFECTS.items()})
    confounding_strength: float = 1.0
    severity_outcome_coef: float = 1.0
    treat_base_rate: float = 0.3
    # (code_a, code_b, log-odds boost when both present): signal a linear
    # bag-of-codes model cannot represent exactly.
    interaction_pairs: tuple = (("DX_0", "DX_1", 2.2), ("DX_2", "DX_3", 2.2))
    pair_code_rate: float = 0.3
    dx_rate: float = 8.0
    proc_rate: float = 4.0
    med_rate: float = 3.0
    event_rate_sev_coef: float = 0.3
    lab_availability: dict = field(default_factory=lambda: dict(DEFAULT_AVAILABILITY))
    lab_model: dict = field(default_factory=lambda: dict(DEFAULT_LAB_MODEL))
    obs_lab_extra_mean: float = 1.0  # extra obs labs beyond the first, Poisson
    followup_lab_rate: float = 0.9
    observation_days: int = 90
    prediction_days: int = 730
    outcome_code: str = "DX_ESRD"

    def __post_init__(self):
        if self.n_patients <= 0:
            raise InvalidConfig("n_patients must be positive")
        if not 0.0 < self.prevalence < 1.0:
            raise InvalidConfig("prevalence must lie in (0, 1)")
        if self.observation_days <= 0 or self.prediction_days <= 0:
            raise InvalidConfig("window lengths must be positive")
        if not 0.0 < self.treat_base_rate < 1.0:
            raise InvalidConfig("treat_base_rate must lie in (0, 1)")
        catalog = default_catalog()
        for ing in list(self.planted_effects) + list(self.lab_effects):
            if ing not in catalog.codes_by_ingredient:
                raise InvalidConfig(f"planted-effect ingredient {ing!r} not in the medication catalog")
        for rate in self.lab_availability.values():
            if not 0.0 <= rate <= 1.0:
                raise InvalidConfig("lab availability rates must lie in [0, 1]")
        if self.n_dx_codes < 2 * len(self.interaction_pairs) + 1:
            raise InvalidConfig("n_dx_codes too small for the interaction pairs")
        for a, b, _boost in self.interaction_pairs:
            for c in (a, b):
                idx = int(c.split("_")[1])
                if idx >= self.n_dx_codes:
                    raise InvalidConfig(f"interaction code {c!r} outside the DX vocabulary")

    @property
    def horizon(self) -> int:
        return self.observation_days + self.prediction_days

    def to_json_dict(self) -> dict:
        d = {}
        for k, v in self.__dict__.items():
            if k == "lab_model":
                d[k] = {m: vars(lm) for m, lm in v.items()}
            elif k == "interaction_pairs":
                d[k] = [list(p) for p in v]
            else:
                d[k] = v
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "lab_model" in d:
            d["lab_model"] = {m: LabModel(**p) for m, p in d["lab_model"].items()}
        if "interaction_pairs" in d:
            d["interaction_pairs"] = tuple(tuple(p) for p in d["interaction_pairs"])
        return cls(**d)

    @classmethod
    def confounded_null(cls, n_patients: int = 50_000, seed: int = 0, **kw) -> "GenConfig":
        """Severity drives treatment and outcomes, but no planted effects.

        Lab measurement noise is reduced so the observed baselines span the
        severity confounder: noise in the adjustment covariates leaves
        residual confounding no estimator can remove, which would make the
        null unrecoverable by construction rather than by estimator failure.
        """
        zero = {ing: 0.0 for ing in DEFAULT_PLANTED_EFFECTS}
        quiet = {
            marker: replace(lm, noise_sd=lm.noise_sd / 8.0)
            for marker, lm in DEFAULT_LAB_MODEL.items()
        }
        kw.setdefault("lab_model", quiet)
        return cls(n_patients=n_patients, seed=seed, planted_effects=zero, lab_effects={}, **kw)

    @classmethod
    def randomized(cls, n_patients: int = 20_000, seed: int = 0, **kw) -> "GenConfig":
        """Treatment independent of severity (no confounding)."""
        return cls(n_patients=n_patients, seed=seed, confounding_strength=0.0, **kw)


@dataclass
class GroundTruth:
    """Oracle effects implied by a GenConfig."""

    ate: dict  # ingredient -> true ATE on outcome probability
    lab: dict  # ingredient -> {marker -> true mean lab-change effect}
    intercept: float
    n_draws: int

    def to_json_dict(self) -> dict:
        return {
            "ate": {k: float(v) for k, v in sorted(self.ate.items())},
            "lab": {k: {m: float(x) for m, x in sorted(v.items())} for k, v in sorted(self.lab.items())},
            "intercept": float(self.intercept),
            "n_draws": int(self.n_draws),
        }


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _treat_logit_base(config: GenConfig) -> float:
    p = config.treat_base_rate
    return math.log(p / (1.0 - p))


def _structural_key(config: GenConfig) -> str:
    """Hash of the fields that shape the outcome equation (not seed/n)."""
    d = config.to_json_dict()
    for k in ("n_patients", "seed"):
        d.pop(k)
    return config_hash(d)


_INTERCEPT_CACHE: dict = {}
_CALIBRATION_SEED = 202_608
_CALIBRATION_DRAWS = 400_000


def _draw_logit_terms(config: GenConfig, rng, n: int):
    """Severity, treatment flags, and the non-intercept outcome logit."""
    s = rng.standard_normal(n)
    base = _treat_logit_base(config)
    c = config.confounding_strength
    catalog = default_catalog()
    treat = {}
    eta = config.severity_outcome_coef * s
    for ing in sorted(catalog.codes_by_ingredient):
        t = rng.random(n) < _sigmoid(base + c * s)
        treat[ing] = t
        eff = config.planted_effects.get(ing, 0.0)
        if eff:
            eta = eta + eff * t
    pair_flags = []
    for _a, _b, boost in config.interaction_pairs:
        a = rng.random(n) < config.pair_code_rate
        b = rng.random(n) < config.pair_code_rate
        pair_flags.append((a, b))
        eta = eta + boost * (a & b)
    return s, treat, pair_flags, eta


def calibrate_intercept(config: GenConfig) -> float:
    """Bisect the outcome intercept so mean outcome probability hits target.

    Uses a fixed internal Monte-Carlo stream, so the intercept depends only
    on the structural configuration (identical across seeds and sizes).
    """
    key = _structural_key(config)
    if key in _INTERCEPT_CACHE:
        return _INTERCEPT_CACHE[key]
    rng = rng_for(_CALIBRATION_SEED, "calibrate-intercept")
    _s, _t, _p, eta = _draw_logit_terms(config, rng, _CALIBRATION_DRAWS)
    lo, hi = -30.0, 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _sigmoid(eta + mid).mean() < config.prevalence:
            lo = mid
        else:
            hi = mid
    out = 0.5 * (lo + hi)
    _INTERCEPT_CACHE[key] = out
    return out


def ground_truth(config: GenConfig, n_draws: int = 1_000_000) -> GroundTruth:
    """Monte-Carlo ATEs on the probability scale; closed-form lab effects."""
    if n_draws < 1000:
        raise InvalidConfig("n_draws too small for a stable oracle")
    intercept = calibrate_intercept(config)
    rng = rng_for(config.seed, "ground-truth")
    _s, treat, _pairs, eta = _draw_logit_terms(config, rng, n_draws)
    ate = {}
    for ing in sorted(treat):
        eff = config.planted_effects.get(ing, 0.0)
        eta_base = intercept + eta - eff * treat[ing]
        ate[ing] = float((_sigmoid(eta_base + eff) - _sigmoid(eta_base)).mean())
    lab = {
        ing: {m: float(config.lab_effects.get(ing, {}).get(m, 0.0)) for m in MARKERS}
        for ing in treat
    }
    return GroundTruth(ate=ate, lab=lab, intercept=intercept, n_draws=n_draws)


def generate(config: GenConfig):
    """Build (EventTable, LabTable, MedCatalog) for one seeded population."""
    n = config.n_patients
    obs, horizon = config.observation_days, config.horizon
    catalog = default_catalog()
    intercept = calibrate_intercept(config)

    rng = rng_for(config.seed, "gen")
    s = rng.standard_normal(n)
    rate_scale = np.exp(config.event_rate_sev_coef * s)
    pids = np.arange(n, dtype=np.int64)

    ev_pid, ev_day, ev_dom, ev_code = [], [], [], []

    def emit(pid, day, dom, code):
        ev_pid.append(np.asarray(pid, np.int64))
        ev_day.append(np.asarray(day, np.int64))
        n_rows = len(ev_pid[-1])
        ev_dom.append(np.full(n_rows, dom))
        ev_code.append(code if isinstance(code, np.ndarray) else np.full(n_rows, code))

    # Sentinel visits anchor the index date and guarantee full follow-up.
    emit(pids, np.zeros(n, np.int64), "PROC", SENTINEL_CODE)
    emit(pids, np.full(n, horizon, np.int64), "PROC", SENTINEL_CODE)

    # Distractor events; counts scale with severity (utilization confounder).
    n_reserved = 2 * len(config.interaction_pairs)
    for dom, rate, lo_code, n_codes in (
        ("DX", config.dx_rate, n_reserved, config.n_dx_codes),
        ("PROC", config.proc_rate, 0, config.n_proc_codes),
        ("MED", config.med_rate, 0, config.n_med_codes),
    ):
        counts = rng.poisson(rate * rate_scale)
        rep = np.repeat(pids, counts)
        total = rep.shape[0]
        width = len(str(max(n_codes - 1, 1)))
        codes = np.char.add(dom + "_", rng.integers(lo_code, n_codes, total).astype(f"U{width}"))
        emit(rep, rng.integers(0, obs, total), dom, codes)

    # Interaction-pair DX codes: independent of severity by design.
    pair_flags = {}
    for a, b, _boost in config.interaction_pairs:
        for code in (a, b):
            present = rng.random(n) < config.pair_code_rate
            pair_flags[code] = present
            sel = pids[present]
            emit(sel, rng.integers(0, obs, sel.shape[0]), "DX", code)

    # Confounded treatment assignment, one flag per ingredient.
    base = _treat_logit_base(config)
    treat = {}
    for ing in sorted(catalog.codes_by_ingredient):
        t = rng.random(n) < _sigmoid(base + config.confounding_strength * s)
        treat[ing] = t
        sel = pids[t]
        codes_list = sorted(catalog.codes_by_ingredient[ing])
        n_tok = rng.integers(1, 3, sel.shape[0])
        rep = np.repeat(sel, n_tok)
        chosen = np.asarray(codes_list, np.str_)[rng.integers(0, len(codes_list), rep.shape[0])]
        emit(rep, rng.integers(0, obs, rep.shape[0]), "MED", chosen)

    # Outcome: logistic in severity, exposures, and pair interactions.
    eta = np.full(n, intercept) + config.severity_outcome_coef * s
    for ing, t in treat.items():
        eff = config.planted_effects.get(ing, 0.0)
        if eff:
            eta += eff * t
    for a, b, boost in config.interaction_pairs:
        eta += boost * (pair_flags[a] & pair_flags[b])
    y = rng.random(n) < _sigmoid(eta)
    sel = pids[y]
    emit(sel, rng.integers(obs, horizon, sel.shape[0]), "DX", config.outcome_code)

    events = EventTable(
        np.concatenate(ev_pid), np.concatenate(ev_day), np.concatenate(ev_dom), np.concatenate(ev_code)
    )

    # Labs: availability per (patient, marker); follow-up means add the
    # severity-dependent drift plus planted treatment shifts.
    lb_pid, lb_day, lb_marker, lb_val = [], [], [], []
    for marker in MARKERS:
        lm = config.lab_model[marker]
        avail = rng.random(n) < config.lab_availability.get(marker, 0.0)
        ap = pids[avail]
        latent = lm.mean + lm.sev_coef * s[avail]
        n_obs_labs = 1 + rng.poisson(config.obs_lab_extra_mean, ap.shape[0])
        rep = np.repeat(ap, n_obs_labs)
        rep_latent = np.repeat(latent, n_obs_labs)
        lb_pid.append(rep)
        lb_day.append(rng.integers(0, obs, rep.shape[0]))
        lb_marker.append(np.full(rep.shape[0], marker))
        lb_val.append(rep_latent + lm.noise_sd * rng.standard_normal(rep.shape[0]))

        shift = np.zeros(ap.shape[0])
        for ing, t in treat.items():
            eff = config.lab_effects.get(ing, {}).get(marker, 0.0)
            if eff:
                shift += eff * t[avail]
        fu_mean = latent + lm.drift + lm.drift_sev_coef * s[avail] + shift
        has_fu = rng.random(ap.shape[0]) < config.followup_lab_rate
        extra = (rng.random(ap.shape[0]) < 0.4) & has_fu
        for sel_mask, day_lo, day_hi in ((has_fu, obs, obs + 180), (extra, obs + 180, obs + 360)):
            sp = ap[sel_mask]
            lb_pid.append(sp)
            lb_day.append(rng.integers(day_lo, day_hi, sp.shape[0]))
            lb_marker.append(np.full(sp.shape[0], marker))
            lb_val.append(fu_mean[sel_mask] + lm.noise_sd * rng.standard_normal(sp.shape[0]))

    labs = LabTable(
        np.concatenate(lb_pid), np.concatenate(lb_day), np.concatenate(lb_marker), np.concatenate(lb_val)
    )
    return events, labs, catalog


def with_seed(config: GenConfig, seed: int) -> GenConfig:
    return replace(config, seed=seed)
