import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncotrial.errors import DataValidationError, RankDeficientError
from ncotrial.estimators import AdjustmentSpec, plug_in
from ncotrial.inference import estimate, robust_t
from ncotrial.randinf import (
    DiffMeans,
    EpsilonRule,
    PermutationPlan,
    PretestConfig,
    RobustT,
    equivalence_pretest,
    model_output_test,
    permutation_test,
    pretest_gate,
    pretest_gated_estimate,
    pseudo_outcome_test,
    randomization_test_sharp,
    sharp_pretest,
)
from ncotrial.simulation import ScenarioParams, generate_trial
from ncotrial.trial_data import TrialDataset

from conftest import make_data

EXHAUSTIVE = PermutationPlan(mode="exhaustive", seed=None)
FULL = AdjustmentSpec(("X0",), ("N0",))


def null_trial(seed, n=40, pi=0.8):
    return generate_trial(ScenarioParams(n=n, pi=pi, beta=0.0, rho_yn_given_x=0.5, seed=seed), 0, 5)


def level_bound(alpha, reps):
    return alpha + 2 * math.sqrt(alpha * (1 - alpha) / reps)


class TestPlan:
    def test_blocks_preserve_n1(self):
        a = np.array([1, 0, 0, 1, 1, 0, 0])
        for plan in (EXHAUSTIVE, PermutationPlan(B=300, seed=4)):
            blocks = np.vstack(list(plan.blocks(a)))
            assert np.all(blocks.sum(axis=1) == 3)
        assert np.vstack(list(EXHAUSTIVE.blocks(a))).shape[0] == math.comb(7, 3)

    def test_exhaustive_unique(self):
        blocks = np.vstack(list(EXHAUSTIVE.blocks(np.array([1, 1, 0, 0, 0, 1]))))
        assert len({row.tobytes() for row in blocks}) == 20

    def test_cap(self):
        with pytest.raises(ValueError, match="cap"):
            list(PermutationPlan(mode="exhaustive", cap=10).blocks(np.array([1, 1, 0, 0, 0, 0])))

    def test_min_b(self):
        with pytest.raises(ValueError):
            PermutationPlan(B=50)

    def test_seeded(self):
        a = np.array([1, 0] * 10)
        x = [b for b in PermutationPlan(B=200, seed=9).blocks(a)]
        y = [b for b in PermutationPlan(B=200, seed=9).blocks(a)]
        assert all(np.array_equal(u, v) for u, v in zip(x, y))


class TestSharp:
    def test_identical_outcomes(self):
        d = TrialDataset([1, 0, 1, 0, 1, 0], [4.2] * 6, 0.5)
        assert randomization_test_sharp(d, plan=EXHAUSTIVE).p_value == 1.0
        assert randomization_test_sharp(d, plan=PermutationPlan(B=200)).p_value == 1.0

    def test_four_unit_example(self):
        d = TrialDataset([1, 1, 0, 0], [10.0, 10.0, 0.0, 0.0], 0.5)
        res = randomization_test_sharp(d, plan=EXHAUSTIVE)
        assert res.statistic == 10.0
        assert res.n_draws == 6
        assert res.p_value == pytest.approx(1 / 3)

    def test_monte_carlo_tracks_exhaustive(self, rng):
        d = make_data(rng, n=8, p_cov=0, p_nco=0, min_arm=3)
        exact = randomization_test_sharp(d, plan=EXHAUSTIVE).p_value
        B = 20000
        mc = randomization_test_sharp(d, plan=PermutationPlan(B=B, seed=1)).p_value
        se = math.sqrt(exact * (1 - exact) / B)
        assert abs(mc - exact) <= 2 * se + 1 / B

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([100, 250, 1000]))
    def test_p_range_and_determinism(self, seed, B):
        d = make_data(np.random.default_rng(seed), n=15)
        plan = PermutationPlan(B=B, seed=seed)
        p1 = randomization_test_sharp(d, plan=plan).p_value
        assert 1 / (B + 1) <= p1 <= 1
        assert randomization_test_sharp(d, plan=plan).p_value == p1

    def test_nco_column(self, rng):
        d = make_data(rng)
        a = randomization_test_sharp(d, "N0", plan=PermutationPlan(B=500, seed=2))
        b = permutation_test(d.treatment, d.column("N0"), DiffMeans(), PermutationPlan(B=500, seed=2))
        assert a == b

    def test_one_sided(self):
        d = TrialDataset([1, 1, 0, 0, 0], [5.0, 4.0, 1.0, 2.0, 3.0], 0.5)
        two = randomization_test_sharp(d, plan=EXHAUSTIVE).p_value
        g = permutation_test(d.treatment, d.outcome, DiffMeans(), EXHAUSTIVE, "greater").p_value
        l = permutation_test(d.treatment, d.outcome, DiffMeans(), EXHAUSTIVE, "less").p_value
        assert g == pytest.approx(0.1)
        assert l == 1.0
        assert two >= g

    def test_bad_alternative(self, rng):
        d = make_data(rng)
        with pytest.raises(ValueError):
            permutation_test(d.treatment, d.outcome, DiffMeans(), alternative="sideways")


class TestRobustTBatch:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_qr_robust_t(self, seed):
        rng = np.random.default_rng(seed)
        d = make_data(rng, n=24, p_cov=1, p_nco=1)
        stat = RobustT.from_spec(d, FULL)
        assigns = np.vstack([rng.permutation(d.treatment) for _ in range(5)]).astype(bool)
        batch = stat(assigns, d.outcome)
        for row, t in zip(assigns, batch):
            swapped = d.with_treatment(row.astype(int))
            if min(swapped.n1, swapped.n0) < 4:
                continue
            assert t == pytest.approx(robust_t(swapped, FULL), rel=1e-8, abs=1e-10)

    def test_empty_spec_is_welch(self, rng):
        d = make_data(rng)
        t = RobustT(np.empty((d.n, 0)))(d.treatment[None, :].astype(bool), d.outcome)[0]
        assert t == pytest.approx(robust_t(d, AdjustmentSpec()), rel=1e-10)

    def test_infeasible_assignment_is_nan(self, rng):
        d = make_data(rng, n=12)
        a = np.zeros((1, 12), dtype=bool)
        a[0, :2] = True  # two treated units cannot fit two slopes
        assert np.isnan(RobustT.from_spec(d, FULL)(a, d.outcome)[0])

    def test_infeasible_counts_as_extreme(self):
        d = TrialDataset([1, 1, 0, 0, 0, 0], [5.0, 4.0, 3.0, 2.0, 1.0, 0.0], 0.5)
        base = DiffMeans()

        def flaky(assign, values):
            t = base(assign, values)
            t[assign[:, 5]] = np.nan  # undefined whenever unit 5 is treated
            return t

        plain = permutation_test(d.treatment, d.outcome, base, EXHAUSTIVE)
        res = permutation_test(d.treatment, d.outcome, flaky, EXHAUSTIVE)
        assert res.n_infeasible == 5
        assert res.n_extreme == plain.n_extreme + 5 - 1  # treating units 4 and 5 was already extreme
        assert res.p_value > plain.p_value

    def test_undefined_observed_statistic(self):
        d = TrialDataset([1, 1, 0, 0], [1.0, 1.0, 1.0, 1.0], 0.5)
        with pytest.raises(DataValidationError):
            permutation_test(d.treatment, d.outcome, lambda a, v: np.full(a.shape[0], np.nan))

    def test_constant_predictor(self, rng):
        d = make_data(rng).with_column("X0", np.ones(30))
        with pytest.raises(RankDeficientError):
            RobustT.from_spec(d, FULL)


class TestStrategies:
    def test_pseudo_outcome_without_model(self, rng):
        d = make_data(rng)
        plan = PermutationPlan(B=400, seed=5)
        assert pseudo_outcome_test(d, None, plan=plan) == randomization_test_sharp(d, plan=plan)

    def test_model_output_empty_spec(self, rng):
        d = make_data(rng)
        plan = PermutationPlan(B=400, seed=5)
        a = model_output_test(d, AdjustmentSpec(), plan)
        b = randomization_test_sharp(d, statistic="robust_t", plan=plan)
        assert a.p_value == b.p_value

    def test_pseudo_outcome_residuals_fixed(self, rng):
        d = make_data(rng)
        plan = PermutationPlan(B=300, seed=1)
        res = pseudo_outcome_test(d, FULL, plan=plan)
        z = np.column_stack([np.ones(d.n), d.predictors(["X0", "N0"])])
        resid = d.outcome - z @ np.linalg.lstsq(z, d.outcome, rcond=None)[0]
        direct = permutation_test(d.treatment, resid, DiffMeans(), plan)
        assert res.p_value == direct.p_value

    def test_adjustment_adds_power(self):
        hits_plain = hits_model = 0
        for seed in range(40):
            d = generate_trial(ScenarioParams(n=40, pi=0.5, beta=0.7, rho_yn_given_x=0.8, seed=seed), 0, 5)
            plan = PermutationPlan(B=200, seed=seed)
            hits_plain += randomization_test_sharp(d, statistic="robust_t", plan=plan).p_value <= 0.05
            hits_model += model_output_test(d, AdjustmentSpec(nco_columns=("N",)), plan).p_value <= 0.05
        assert hits_model > hits_plain

    @pytest.mark.slow
    @pytest.mark.parametrize("kind", ["diff_means", "robust_t", "model", "pseudo"])
    def test_sharp_null_level(self, kind):
        reps, alpha = 300, 0.05
        spec = AdjustmentSpec(("X",), ("N",))
        rejected = 0
        for seed in range(reps):
            d = null_trial(seed)
            plan = PermutationPlan(B=199, seed=seed)
            if kind == "model":
                p = model_output_test(d, spec, plan).p_value
            elif kind == "pseudo":
                p = pseudo_outcome_test(d, spec, plan=plan).p_value
            else:
                p = randomization_test_sharp(d, statistic=kind, plan=plan).p_value
            rejected += p <= alpha
        assert rejected / reps <= level_bound(alpha, reps)


class TestEpsilon:
    def test_parse(self):
        assert EpsilonRule.parse("sd:0.5") == EpsilonRule("sd", 0.5)
        assert EpsilonRule.parse("fraction_of_range:0.1") == EpsilonRule("range", 0.1)
        with pytest.raises(ValueError):
            EpsilonRule.parse("iqr:0.2")
        with pytest.raises(ValueError):
            EpsilonRule.parse("sd:-1")

    def test_resolve(self):
        y = np.array([1.0, 2.0, 4.0, 9.0])
        assert EpsilonRule("sd", 0.5).resolve(y) == pytest.approx(0.5 * np.std(y, ddof=1))
        assert EpsilonRule("range", 0.1).resolve(y) == pytest.approx(0.8)

    def test_config_needs_epsilon(self):
        with pytest.raises(ValueError):
            PretestConfig("equivalence")
        with pytest.raises(ValueError):
            PretestConfig("equivalence", epsilon=0.0)
        with pytest.raises(ValueError):
            PretestConfig("sharp", alpha=1.5)


class TestPretests:
    def test_equivalence_wide_margin(self, rng):
        d = make_data(rng, n=40)
        cfg = PretestConfig("equivalence", epsilon=50.0, plan=PermutationPlan(B=300, seed=0))
        res = equivalence_pretest(d, "N0", cfg)
        assert res.reject_equiv_null
        assert res.p_lower <= 0.05 and res.p_upper <= 0.05

    def test_equivalence_tiny_margin(self, rng):
        d = make_data(rng, n=40)
        cfg = PretestConfig("equivalence", epsilon=1e-6, plan=PermutationPlan(B=300, seed=0))
        assert not equivalence_pretest(d, "N0", cfg).reject_equiv_null

    def test_equivalence_upper_p_is_one_sided(self, rng):
        d = make_data(rng, n=30)
        eps = 0.4
        cfg = PretestConfig("equivalence", epsilon=eps, plan=PermutationPlan(B=500, seed=8))
        res = equivalence_pretest(d, "N0", cfg)
        a = d.treatment.astype(float)
        upper = permutation_test(d.treatment, d.column("N0") - eps * a, DiffMeans(), cfg.plan, "less")
        assert res.p_upper == upper.p_value

    def test_statistic_cannot_adjust_for_tested_nco(self, rng):
        d = make_data(rng)
        cfg = PretestConfig("sharp", statistic=AdjustmentSpec(nco_columns=("N0",)))
        with pytest.raises(ValueError):
            sharp_pretest(d, "N0", cfg)

    def test_pretest_with_covariate_robust_t(self, rng):
        d = make_data(rng, n=40)
        cfg = PretestConfig("sharp", statistic=AdjustmentSpec(covariate_columns=("X0",)),
                            plan=PermutationPlan(B=200, seed=1))
        assert 0 < sharp_pretest(d, "N0", cfg).p_value <= 1

    @pytest.mark.slow
    def test_equivalence_level_outside_window(self):
        reps, alpha, eps = 300, 0.05, 0.5
        rejected = 0
        for seed in range(reps):
            params = ScenarioParams(n=120, beta_n=2 * eps, rho_yn_given_x=0.5, seed=seed)
            d = generate_trial(params, 0, 5)
            cfg = PretestConfig("equivalence", epsilon=eps, plan=PermutationPlan(B=199, seed=seed))
            rejected += equivalence_pretest(d, "N", cfg).reject_equiv_null
        assert rejected / reps <= level_bound(alpha, reps)

    @pytest.mark.slow
    def test_equivalence_favours_adjustment_when_valid(self):
        reps = 100
        rejected = 0
        for seed in range(reps):
            d = generate_trial(ScenarioParams(n=120, rho_yn_given_x=0.5, seed=seed), 0, 5)
            cfg = PretestConfig("equivalence", epsilon_rule=EpsilonRule("sd", 0.5),
                                plan=PermutationPlan(B=199, seed=seed))
            rejected += equivalence_pretest(d, "N", cfg).reject_equiv_null
        assert rejected / reps > 0.3


class TestGate:
    def test_constant_nco_surfaces_rank_error(self, rng):
        d = make_data(rng).with_column("N0", np.full(30, 2.0))
        cfg = PretestConfig("sharp", plan=PermutationPlan(B=200, seed=0))
        assert sharp_pretest(d, "N0", cfg).p_value == 1.0
        with pytest.raises(RankDeficientError):
            pretest_gated_estimate(d, AdjustmentSpec(nco_columns=("N0",)), cfg)

    def test_affected_nco_falls_back_to_plug_in(self, rng):
        d = make_data(rng, n=60)
        d = d.with_column("N0", d.column("N0") + 10 * d.treatment)
        cfg = PretestConfig("sharp", plan=PermutationPlan(B=200, seed=0))
        res, gate = pretest_gated_estimate(d, AdjustmentSpec(nco_columns=("N0",)), cfg)
        assert not gate.used_nco and gate.branch == "unadjusted-for-nco"
        assert res.estimate == plug_in(d)

    def test_fallback_keeps_covariates(self, rng):
        d = make_data(rng, n=60)
        d = d.with_column("N0", d.column("N0") + 10 * d.treatment)
        cfg = PretestConfig("sharp", plan=PermutationPlan(B=200, seed=0))
        res, _ = pretest_gated_estimate(d, FULL, cfg)
        assert res.estimate == estimate(d, AdjustmentSpec(covariate_columns=("X0",))).estimate

    def test_equivalence_gate_adjusts_when_equivalent(self, rng):
        d = make_data(rng, n=60)
        cfg = PretestConfig("equivalence", epsilon=100.0, plan=PermutationPlan(B=200, seed=0))
        res, gate = pretest_gated_estimate(d, AdjustmentSpec(nco_columns=("N0",)), cfg)
        assert gate.used_nco
        assert res.estimate == estimate(d, AdjustmentSpec(nco_columns=("N0",))).estimate

    def test_sharp_gate_any_rejection_blocks(self, rng):
        d = make_data(rng, n=60, p_nco=2)
        d = d.with_column("N1", d.column("N1") + 10 * d.treatment)
        cfg = PretestConfig("sharp", plan=PermutationPlan(B=200, seed=0))
        gate = pretest_gate(d, ("N0", "N1"), cfg)
        assert not gate.used_nco
        assert set(gate.p_values) == {"N0", "N1"}

    def test_needs_nco(self, rng):
        with pytest.raises(ValueError):
            pretest_gate(make_data(rng), (), PretestConfig())
