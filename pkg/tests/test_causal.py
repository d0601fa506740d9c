"""Tests for the lab-change treatment-effect estimators."""

import math

import numpy as np
import pytest
from scipy import stats

from dialrx import causal
from dialrx import synthgen as sg
from dialrx.cohort import LabTable, WindowSpec, build_cohort
from dialrx.errors import (
    DegenerateResample,
    InvalidConfig,
    InvalidP,
    NoEligibleRows,
    SchemaError,
    SingleArm,
    UnknownIngredient,
)
from dialrx.util import rng_for


def make_rows(y, t, x=None, marker="eGFR", pid_start=0):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    if x is None:
        x = np.zeros((y.size, 2))
    return [
        causal.LabDeltaRow(
            patient_id=pid_start + i,
            marker=marker,
            baseline=0.0,
            follow_up=float(y[i]),
            delta=float(y[i]),
            treated=int(t[i]),
            covariates=np.asarray(x[i], dtype=np.float64),
        )
        for i in range(y.size)
    ]


def linear_world(n, seed, tau=1.0, confounded=False):
    """y = 2 + 3*x0 - x1 + tau*t + noise; optional x-driven treatment."""
    rng = rng_for(seed, "linear")
    x = rng.standard_normal((n, 2))
    if confounded:
        e_true = 1.0 / (1.0 + np.exp(-(0.8 * x[:, 0] - 0.5 * x[:, 1])))
        t = (rng.random(n) < e_true).astype(int)
    else:
        t = (rng.random(n) < 0.5).astype(int)
    y = 2.0 + 3.0 * x[:, 0] - x[:, 1] + tau * t + rng.standard_normal(n)
    return make_rows(y, t, x)


# ---------------------------------------------------------------------------
# Outcome-row extraction
# ---------------------------------------------------------------------------


class FakeCohortRow:
    def __init__(self, patient_id, exposures, feats=None):
        self.patient_id = patient_id
        self.exposures = frozenset(exposures)
        self.lab_features = np.zeros(9) if feats is None else feats
        self.lab_mask = np.zeros(3)
        self.n_dx = 1
        self.n_proc = 0
        self.n_med = len(exposures)
        self.tokens = tuple(("MED", c, 0) for c in sorted(exposures))


class TestLabDeltaOutcomes:
    WINDOW = WindowSpec(90, 730)

    def table(self, records):
        pid, day, marker, value = zip(*records)
        return LabTable(np.array(pid), np.array(day), np.array(marker), np.array(value))

    def test_anchors_latest_obs_first_pred(self):
        labs = self.table(
            [
                (1, 10, "eGFR", 80.0),
                (1, 80, "eGFR", 75.0),  # latest observation-window value
                (1, 200, "eGFR", 60.0),
                (1, 95, "eGFR", 70.0),  # first prediction-window value
            ]
        )
        rows = causal.lab_delta_outcomes(labs, [FakeCohortRow(1, {"RX_X"})], self.WINDOW, {"RX_X"})
        assert len(rows) == 1
        r = rows[0]
        assert (r.baseline, r.follow_up, r.delta) == (75.0, 70.0, -5.0)
        assert r.treated == 1 and r.marker == "eGFR"

    def test_missing_anchor_excludes_row(self):
        labs = self.table([(1, 80, "eGFR", 75.0), (2, 95, "eGFR", 70.0), (2, 10, "BUN", 18.0)])
        cohort = [FakeCohortRow(1, set()), FakeCohortRow(2, set())]
        with pytest.raises(NoEligibleRows):
            causal.lab_delta_outcomes(labs, cohort, self.WINDOW, {"RX_X"})

    def test_markers_are_independent(self):
        labs = self.table(
            [
                (1, 80, "eGFR", 75.0),
                (1, 95, "eGFR", 70.0),
                (1, 50, "BUN", 20.0),
                (1, 100, "BUN", 24.0),
                (1, 50, "creatinine", 1.0),  # no follow-up: excluded
            ]
        )
        rows = causal.lab_delta_outcomes(labs, [FakeCohortRow(1, set())], self.WINDOW, {"RX_X"})
        assert sorted(r.marker for r in rows) == ["BUN", "eGFR"]
        assert all(r.treated == 0 for r in rows)

    def test_day_boundary_is_strict(self):
        # Day 90 is the first prediction day under a 90-day observation window.
        labs = self.table([(1, 89, "eGFR", 75.0), (1, 90, "eGFR", 71.0)])
        rows = causal.lab_delta_outcomes(labs, [FakeCohortRow(1, set())], self.WINDOW, {"RX_X"})
        assert (rows[0].baseline, rows[0].follow_up) == (75.0, 71.0)

    def test_same_day_ties_use_record_order(self):
        labs = self.table([(1, 80, "eGFR", 75.0), (1, 80, "eGFR", 76.0), (1, 95, "eGFR", 70.0)])
        rows = causal.lab_delta_outcomes(labs, [FakeCohortRow(1, set())], self.WINDOW, {"RX_X"})
        assert rows[0].baseline == 76.0  # later record wins the baseline tie

    def test_med_count_excludes_the_exposure_itself(self):
        # Two dispensings of the exposure plus one unrelated med: the
        # adjustment covariate must count only the unrelated med.
        labs = self.table([(1, 80, "eGFR", 75.0), (1, 95, "eGFR", 70.0)])
        row = FakeCohortRow(1, {"RX_X", "RX_Y"})
        row.tokens = (("MED", "RX_X", 5), ("MED", "RX_X", 40), ("MED", "RX_Y", 7))
        row.n_med = 3
        out = causal.lab_delta_outcomes(labs, [row], self.WINDOW, {"RX_X"})
        assert out[0].covariates[-1] == 1.0
        untreated = causal.lab_delta_outcomes(labs, [row], self.WINDOW, {"RX_Z"})
        assert untreated[0].covariates[-1] == 3.0


# ---------------------------------------------------------------------------
# Naive and Welch
# ---------------------------------------------------------------------------


class TestNaive:
    def test_hand_example(self):
        rows = make_rows([2.0, 4.0, 1.0, 1.0], [1, 1, 0, 0])
        est = causal.naive(rows)
        assert est.estimate == 2.0
        assert (est.n_treated, est.n_control) == (2, 2)

    def test_identical_arms_zero(self):
        rows = make_rows([3.0, 5.0, 3.0, 5.0], [1, 1, 0, 0])
        assert causal.naive(rows).estimate == 0.0

    def test_single_arm_raises(self):
        with pytest.raises(SingleArm):
            causal.naive(make_rows([1.0, 2.0], [1, 1]))

    def test_welch_p_matches_scipy(self):
        rng = rng_for(5, "welch")
        for _ in range(100):
            n1 = int(rng.integers(2, 40))
            n0 = int(rng.integers(2, 40))
            y1 = rng.standard_normal(n1) * float(rng.uniform(0.5, 3.0))
            y0 = rng.standard_normal(n0) + float(rng.uniform(-1.0, 1.0))
            rows = make_rows(np.concatenate([y1, y0]), np.r_[np.ones(n1, int), np.zeros(n0, int)])
            want = stats.ttest_ind(y1, y0, equal_var=False).pvalue
            assert causal.naive(rows).p_value == pytest.approx(want, abs=1e-12)


class TestOls:
    def test_recovers_planted_coefficient(self):
        rows = linear_world(4000, seed=1, tau=1.5, confounded=True)
        est = causal.ols_adjusted(rows)
        assert est.estimate == pytest.approx(1.5, abs=0.15)
        assert est.method == "ols"

    def test_single_arm_raises(self):
        with pytest.raises(SingleArm):
            causal.ols_adjusted(make_rows([1.0, 2.0], [0, 0]))


# ---------------------------------------------------------------------------
# Propensity and overlap
# ---------------------------------------------------------------------------


class TestPropensity:
    def test_independent_covariates_give_base_rate(self):
        rng = rng_for(7, "prop")
        n = 2000
        t = (rng.random(n) < 0.3).astype(int)
        rows = make_rows(rng.standard_normal(n), t, rng.standard_normal((n, 3)))
        e = causal.fit_propensity(rows)
        assert np.all(np.abs(e - t.mean()) < 0.08)
        assert abs(np.median(e) - t.mean()) < 0.02

    def test_separable_covariate_hits_clip_bounds(self):
        n = 200
        x = np.r_[np.ones(100), -np.ones(100)][:, None]
        t = np.r_[np.ones(100, int), np.zeros(100, int)]
        e = causal.fit_propensity(make_rows(np.zeros(n), t, x))
        assert np.all(np.isfinite(e))
        assert e.max() == causal.PROPENSITY_CLIP[1]
        assert e.min() == causal.PROPENSITY_CLIP[0]

    def test_deterministic(self):
        rows = linear_world(300, seed=9, confounded=True)
        assert np.array_equal(causal.fit_propensity(rows), causal.fit_propensity(rows))


class TestOverlap:
    def test_hand_six_row_example(self):
        # Support = [max(0.3, 0.2), min(0.7, 0.6)] = [0.3, 0.6]; the 0.2
        # control and the 0.7 treated row fall outside it.
        e = np.array([0.3, 0.5, 0.7, 0.2, 0.4, 0.6])
        t = np.array([1, 1, 1, 0, 0, 0])
        rep = causal.overlap_diagnostics(e, t)
        assert (rep.support_low, rep.support_high) == (0.3, 0.6)
        assert rep.flags.tolist() == [False, False, True, True, False, False]
        assert rep.n_flagged_treated == 1 and rep.n_flagged_control == 1

    def test_identical_distributions_no_flags(self):
        e = np.tile(np.linspace(0.2, 0.8, 10), 2)
        t = np.r_[np.ones(10, int), np.zeros(10, int)]
        rep = causal.overlap_diagnostics(e, t)
        assert rep.n_flagged == 0

    def test_disjoint_distributions_flag_everything(self):
        e = np.r_[np.linspace(0.6, 0.9, 5), np.linspace(0.1, 0.4, 5)]
        t = np.r_[np.ones(5, int), np.zeros(5, int)]
        rep = causal.overlap_diagnostics(e, t)
        assert rep.flags.all()

    def test_histograms_count_each_arm(self):
        e = np.array([0.05, 0.15, 0.95, 0.85])
        t = np.array([1, 1, 0, 0])
        rep = causal.overlap_diagnostics(e, t)
        assert rep.hist_treated.sum() == 2 and rep.hist_control.sum() == 2
        assert rep.hist_treated[0] == 1 and rep.hist_control[9] == 1


# ---------------------------------------------------------------------------
# IPTW / AIPW / TMLE / DR-ATT
# ---------------------------------------------------------------------------


class TestIptw:
    def test_constant_half_propensity_equals_naive_exactly(self):
        rng = rng_for(3, "iptw")
        rows = make_rows(rng.standard_normal(50), (rng.random(50) < 0.4).astype(int))
        e = np.full(50, 0.5)
        assert causal.iptw(rows, e).estimate == causal.naive(rows).estimate

    def test_extreme_weight_row_is_flagged(self):
        y = np.zeros(6)
        t = np.array([1, 0, 0, 0, 0, 0])
        e = np.array([0.01, 0.3, 0.4, 0.5, 0.6, 0.7])
        est = causal.iptw(make_rows(y, t), e)
        rep = causal.overlap_diagnostics(e, t)
        assert rep.flags[0]
        assert est.overlap_violation_count == rep.n_flagged > 0

    def test_corrects_confounding_better_than_naive(self):
        rows = linear_world(6000, seed=21, tau=1.0, confounded=True)
        e = causal.fit_propensity(rows)
        naive_err = abs(causal.naive(rows).estimate - 1.0)
        iptw_err = abs(causal.iptw(rows, e).estimate - 1.0)
        assert naive_err > 0.5  # x0 shifts both treatment and outcome
        assert iptw_err < naive_err / 3.0


class TestAipw:
    def test_zero_outcome_models_equal_ht_score_mean(self):
        rng = rng_for(11, "aipw")
        n = 80
        rows = make_rows(rng.standard_normal(n) * 2.0, (rng.random(n) < 0.5).astype(int))
        e = np.clip(rng.random(n), 0.2, 0.8)
        zero = (causal.ZERO_MODEL, causal.ZERO_MODEL)
        got = causal.aipw(rows, e, zero).estimate
        y, t, _ = causal._parse(rows)
        want = math.fsum(t * y / e - (1.0 - t) * y / (1.0 - e)) / n
        assert got == want

    def test_correct_outcome_model_fixes_broken_propensity(self):
        rows = linear_world(6000, seed=13, tau=1.0, confounded=True)
        models = causal.fit_outcome_models(rows)
        broken_e = np.full(len(rows), 0.5)
        est = causal.aipw(rows, broken_e, models)
        assert est.estimate == pytest.approx(1.0, abs=0.15)

    def test_randomized_agrees_with_naive(self):
        rows = linear_world(4000, seed=15, tau=0.8, confounded=False)
        e = causal.fit_propensity(rows)
        models = causal.fit_outcome_models(rows)
        a = causal.aipw(rows, e, models).estimate
        n = causal.naive(rows).estimate
        assert a == pytest.approx(n, abs=0.15)
        assert a == pytest.approx(0.8, abs=0.15)


class TestTmle:
    def test_zero_fluctuation_equals_plug_in(self):
        rows = linear_world(500, seed=17, tau=1.0, confounded=False)
        y, t, x = causal._parse(rows)
        models = causal.fit_outcome_models(rows)
        e = np.full(y.size, 0.5)  # constant e: per-arm OLS already solves the score
        got = causal.tmle(rows, e, models).estimate
        plug_in = causal._fsum_mean(models[0].predict(x) - models[1].predict(x))
        assert got == pytest.approx(plug_in, abs=1e-8)

    def test_constant_outcome_is_exactly_zero(self):
        rows = make_rows(np.full(40, 3.25), np.r_[np.ones(20, int), np.zeros(20, int)])
        e = np.full(40, 0.5)
        models = causal.fit_outcome_models(rows)
        assert causal.tmle(rows, e, models).estimate == 0.0

    def test_reduces_confounding_bias(self):
        rows = linear_world(6000, seed=19, tau=1.0, confounded=True)
        e = causal.fit_propensity(rows)
        models = causal.fit_outcome_models(rows)
        est = causal.tmle(rows, e, models)
        assert est.estimate == pytest.approx(1.0, abs=0.2)
        assert abs(est.estimate - 1.0) < abs(causal.naive(rows).estimate - 1.0)


class TestDrAtt:
    def test_randomized_matches_naive(self):
        rows = linear_world(4000, seed=23, tau=0.7, confounded=False)
        e = causal.fit_propensity(rows)
        models = causal.fit_outcome_models(rows)
        att = causal.dr_att(rows, e, models).estimate
        assert att == pytest.approx(causal.naive(rows).estimate, abs=0.15)

    def test_constant_outcome_is_zero(self):
        rng = rng_for(25, "att")
        rows = make_rows(np.full(60, 2.0), (rng.random(60) < 0.5).astype(int), rng.standard_normal((60, 2)))
        e = np.clip(rng.random(60), 0.2, 0.8)
        models = causal.fit_outcome_models(rows)
        assert abs(causal.dr_att(rows, e, models).estimate) < 1e-9

    def test_restricts_to_common_support(self):
        rng = rng_for(27, "att2")
        n = 100
        t = np.r_[np.ones(40, int), np.zeros(60, int)]
        y = rng.standard_normal(n)
        rows = make_rows(y, t)
        # Controls 0.05-0.15 sit below the treated minimum of 0.3; the other
        # controls span exactly the treated range, so support is [0.3, 0.6].
        e = np.r_[np.linspace(0.3, 0.6, 40), np.linspace(0.05, 0.15, 20), np.linspace(0.3, 0.6, 40)]
        models = causal.fit_outcome_models(rows)
        est = causal.dr_att(rows, e, models)
        assert est.overlap_violation_count == 20
        assert est.n_control == 40  # flagged controls excluded from the contrast


class TestPermutationInvariance:
    def test_estimates_are_exactly_order_invariant(self):
        rows = linear_world(80, seed=29, tau=0.5, confounded=True)
        e = causal.fit_propensity(rows)
        models = causal.fit_outcome_models(rows)
        perm = rng_for(29, "perm").permutation(len(rows))
        rows_p = [rows[i] for i in perm]
        e_p = e[perm]
        assert causal.naive(rows_p).estimate == causal.naive(rows).estimate
        assert causal.iptw(rows_p, e_p).estimate == causal.iptw(rows, e).estimate
        assert causal.aipw(rows_p, e_p, models).estimate == causal.aipw(rows, e, models).estimate
        assert causal.tmle(rows_p, e_p, models).estimate == causal.tmle(rows, e, models).estimate
        assert causal.dr_att(rows_p, e_p, models).estimate == causal.dr_att(rows, e, models).estimate

    def test_fits_are_near_invariant(self):
        rows = linear_world(80, seed=31, confounded=True)
        perm = rng_for(31, "perm").permutation(len(rows))
        rows_p = [rows[i] for i in perm]
        e = causal.fit_propensity(rows)
        e_p = causal.fit_propensity(rows_p)
        assert np.allclose(e[perm], e_p, atol=1e-9)
        assert causal.ols_adjusted(rows_p).estimate == pytest.approx(
            causal.ols_adjusted(rows).estimate, abs=1e-9
        )


class TestEstimatorAgreementRandomized:
    def test_pairwise_within_two_ci_half_widths(self):
        rows = linear_world(2000, seed=33, tau=0.6, confounded=False)
        grid = causal.estimate_grid(rows)
        lo, hi = causal.bootstrap_ci(lambda rs: causal.naive(rs).estimate, rows, b=100, seed=33)
        half = (hi - lo) / 2.0
        values = [grid[m].estimate for m in causal.METHODS]
        for i in range(len(values)):
            for j in range(i + 1, len(values)):
                assert abs(values[i] - values[j]) <= 2.0 * half


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


class TestBootstrap:
    def test_constant_rows_zero_width(self):
        rows = make_rows(np.full(30, 1.5), np.r_[np.ones(15, int), np.zeros(15, int)])
        lo, hi = causal.bootstrap_ci(lambda rs: causal.naive(rs).estimate, rows, b=100, seed=0)
        assert lo == hi == 0.0

    def test_same_seed_identical_interval(self):
        rows = linear_world(100, seed=35)
        est = lambda rs: causal.naive(rs).estimate
        assert causal.bootstrap_ci(est, rows, b=100, seed=4) == causal.bootstrap_ci(est, rows, b=100, seed=4)
        assert causal.bootstrap_ci(est, rows, b=100, seed=4) != causal.bootstrap_ci(est, rows, b=100, seed=5)

    def test_b_floor_enforced(self):
        rows = linear_world(50, seed=37)
        with pytest.raises(InvalidConfig):
            causal.bootstrap_ci(lambda rs: 0.0, rows, b=50)

    def test_degenerate_when_resamples_lose_an_arm(self):
        # One treated patient among 20: ~36% of resamples drop the arm.
        rows = make_rows(np.arange(20.0), np.r_[1, np.zeros(19, int)])
        with pytest.raises(DegenerateResample):
            causal.bootstrap_replicates(lambda rs: causal.naive(rs).estimate, rows, b=100, seed=1)

    def test_resamples_draw_whole_patients(self):
        # Two rows per patient (two markers): both must travel together.
        rows = make_rows(np.arange(10.0), np.tile([1, 0], 5)) + make_rows(
            np.arange(10.0), np.tile([1, 0], 5), marker="BUN"
        )
        groups = causal._patient_groups(rows)
        assert len(groups) == 10
        sample = causal._resample(rows, groups, rng_for(0, "chk"))
        assert len(sample) == 20
        by_pid = {}
        for r in sample:
            by_pid.setdefault(r.patient_id, []).append(r.marker)
        for markers in by_pid.values():
            assert markers.count("eGFR") == markers.count("BUN")

    def test_percentile_coverage_near_nominal(self):
        tau = 0.8
        covered = 0
        meta = 200
        for rep in range(meta):
            rng = rng_for(rep, "cover")
            t = np.r_[np.ones(30, int), np.zeros(30, int)]
            y = tau * t + rng.standard_normal(60)
            rows = make_rows(y, t)
            lo, hi = causal.bootstrap_ci(lambda rs: causal.naive(rs).estimate, rows, b=100, seed=rep)
            covered += int(lo <= tau <= hi)
        assert 0.90 <= covered / meta <= 1.0


# ---------------------------------------------------------------------------
# Benjamini-Hochberg
# ---------------------------------------------------------------------------


def brute_bh(p):
    """Direct O(m^2) evaluation: q_i = min over ranks >= rank(p_i) of p(k)*m/k."""
    p = list(map(float, p))
    m = len(p)
    sp = sorted(p)
    out = []
    for pi in p:
        rank = sp.index(pi) + 1  # ties share the smallest rank and the same q
        q = min(sp[k] * m / (k + 1) for k in range(rank - 1, m))
        out.append(min(q, 1.0))
    return out


class TestBhAdjust:
    def test_worked_example(self):
        got = causal.bh_adjust([0.01, 0.02, 0.03])
        assert np.allclose(got, [0.03, 0.03, 0.03], atol=1e-15)

    def test_single_p_unchanged(self):
        assert causal.bh_adjust([0.2]).tolist() == [0.2]

    def test_all_ones(self):
        assert causal.bh_adjust([1.0, 1.0, 1.0]).tolist() == [1.0, 1.0, 1.0]

    def test_matches_brute_force(self):
        rng = rng_for(41, "bh")
        for _ in range(100):
            m = int(rng.integers(1, 30))
            p = np.round(rng.random(m), 3)  # duplicates exercise tie handling
            got = causal.bh_adjust(p)
            want = brute_bh(p)
            assert np.allclose(got, want, atol=1e-12)

    def test_adjusted_at_least_raw_and_monotone(self):
        rng = rng_for(43, "bh2")
        p = rng.random(25)
        q = causal.bh_adjust(p)
        assert np.all(q >= p - 1e-15)
        order = np.argsort(p, kind="stable")
        assert np.all(np.diff(q[order]) >= -1e-15)

    def test_invalid_inputs(self):
        for bad in ([1.2], [-0.1], [np.nan]):
            with pytest.raises(InvalidP):
                causal.bh_adjust(bad)


# ---------------------------------------------------------------------------
# Per-ingredient validation on synthetic worlds
# ---------------------------------------------------------------------------


def synth_world(n, seed, **kw):
    cfg = sg.GenConfig.randomized(n_patients=n, seed=seed, **kw)
    events, labs, catalog = sg.generate(cfg)
    rows = build_cohort(events, labs, WindowSpec(cfg.observation_days, cfg.prediction_days), {cfg.outcome_code})
    return labs, rows, catalog, cfg


@pytest.fixture(scope="module")
def world():
    return synth_world(4000, seed=51)


class TestValidateMedication:
    def test_planted_worsening_verdict(self, world):
        labs, rows, catalog, cfg = world
        report = causal.validate_medication(
            labs, rows, catalog, "furosemide", WindowSpec(90, 730), b=100, seed=0
        )
        assert report.verdict == "consistent-worsening"
        assert set(report.marker_directions.values()) == {"worsening"}
        assert len(report.rows) == 3 * len(causal.METHODS)

    def test_planted_protective_verdict(self, world):
        labs, rows, catalog, cfg = world
        report = causal.validate_medication(
            labs, rows, catalog, "lisinopril", WindowSpec(90, 730), b=100, seed=0
        )
        assert report.verdict == "consistent-protective"

    def test_row_fields_are_coherent(self, world):
        labs, rows, catalog, cfg = world
        report = causal.validate_medication(
            labs, rows, catalog, "furosemide", WindowSpec(90, 730), b=100, seed=0
        )
        for row in report.rows:
            assert row.ci_low <= row.estimate <= row.ci_high
            assert 0.0 <= row.p <= 1.0
            assert row.p <= row.p_bh <= 1.0
            assert row.verdict == report.verdict
            assert row.n_treated >= 25 and row.n_control >= 25

    def test_support_floor_gives_insufficient(self, world):
        labs, rows, catalog, cfg = world
        report = causal.validate_medication(
            labs, rows, catalog, "furosemide", WindowSpec(90, 730), min_support=10**6, b=100
        )
        assert report.verdict == "insufficient"
        assert report.rows == []

    def test_unknown_ingredient_raises(self, world):
        labs, rows, catalog, cfg = world
        with pytest.raises(UnknownIngredient):
            causal.validate_medication(labs, rows, catalog, "unobtainium", WindowSpec(90, 730))

    def test_same_seed_is_bitwise_identical(self, world):
        labs, rows, catalog, cfg = world
        kw = dict(b=100, seed=7)
        a = causal.validate_medication(labs, rows, catalog, "lisinopril", WindowSpec(90, 730), **kw)
        b = causal.validate_medication(labs, rows, catalog, "lisinopril", WindowSpec(90, 730), **kw)
        assert [vars(r) for r in a.rows] == [vars(r) for r in b.rows]


class TestConfoundedNullSmoke:
    def test_adjustment_removes_lab_confounding(self):
        cfg = sg.GenConfig.confounded_null(n_patients=20000, seed=61)
        events, labs, catalog = sg.generate(cfg)
        cohort = build_cohort(events, labs, WindowSpec(90, 730), {cfg.outcome_code})
        codes = catalog.codes_by_ingredient["furosemide"]
        rows = [r for r in causal.lab_delta_outcomes(labs, cohort, WindowSpec(90, 730), codes) if r.marker == "eGFR"]
        grid = causal.estimate_grid(rows)
        naive_err = abs(grid["naive"].estimate)
        for method in ("iptw", "aipw", "tmle"):
            assert abs(grid[method].estimate) < naive_err / 2.0
        lo, hi = causal.bootstrap_ci(
            lambda rs: causal.aipw(rs, causal.fit_propensity(rs), causal.fit_outcome_models(rs)).estimate,
            rows,
            b=100,
            seed=61,
        )
        assert lo <= 0.0 <= hi


class TestValidationCsv:
    def test_round_trip(self, tmp_path):
        rows = [
            causal.ValidationRow(
                ingredient="lisinopril",
                marker="eGFR",
                method="aipw",
                estimate=1.25,
                ci_low=0.5,
                ci_high=2.0,
                p=0.004,
                p_bh=0.012,
                n_treated=183,
                n_control=700,
                overlap_flags=3,
                verdict="consistent-protective",
            )
        ]
        report = causal.ValidationReport(
            ingredient="lisinopril", verdict="consistent-protective", rows=rows, marker_directions={}
        )
        path = tmp_path / "validation.csv"
        causal.write_validation_csv([report], path)
        text = path.read_text().splitlines()
        assert text[0] == "ingredient,marker,method,estimate,ci_low,ci_high,p,p_bh,n_treated,n_control,overlap_flags,verdict"
        back = causal.read_validation_csv(path)
        assert vars(back[0]) == vars(rows[0])

    def test_header_mismatch_raises(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            causal.read_validation_csv(path)
