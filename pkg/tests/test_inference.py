import math

import numpy as np
import pytest
from scipy.special import expit, logit

from subchal.inference import (
    DesignMatrix,
    FitConfig,
    ModelSpec,
    SingularModelError,
    TARGET_COMPLEMENT,
    TARGET_OVERALL,
    TARGET_SUBGROUP,
    bootstrap_sd,
    build_design_matrix,
    fit_firth_logistic,
    interaction_statistic,
    standardized_risk_difference,
)
from subchal.inference import _newton_firth
from subchal.subgroup_expr import MembershipVector, parse
from subchal.trial_data import (
    CovariateSchema,
    CovariateSpec,
    SubjectRecord,
    TrialDataset,
)


# ---------------------------------------------------------------------------
# independent oracles


def penalized_loglik_2x2(b0, b1, a, b, c, d):
    """Jeffreys-penalized log-likelihood of logit(p) = b0 + b1*x on a 2x2 table.

    Written directly from the cell counts (x=1: a events / b non-events,
    x=0: c events / d non-events); shares no code with the fitter.
    """
    n1, n0 = a + b, c + d
    p1, p0 = expit(b0 + b1), expit(b0)
    ll = (
        a * np.log(p1)
        + b * np.log(1 - p1)
        + c * np.log(p0)
        + d * np.log(1 - p0)
    )
    # information determinant factorizes over the two cells
    w1, w0 = p1 * (1 - p1), p0 * (1 - p0)
    return ll + 0.5 * (np.log(n1 * w1) + np.log(n0 * w0))


def grid_refine_max_2x2(a, b, c, d, levels=14, span=12.0, grid=41):
    """Shrinking-grid maximization of the penalized log-likelihood."""
    center = np.array([0.0, 0.0])
    for _ in range(levels):
        b0s = np.linspace(center[0] - span, center[0] + span, grid)
        b1s = np.linspace(center[1] - span, center[1] + span, grid)
        bb0, bb1 = np.meshgrid(b0s, b1s, indexing="ij")
        with np.errstate(divide="ignore", invalid="ignore"):
            values = penalized_loglik_2x2(bb0, bb1, a, b, c, d)
        i, j = np.unravel_index(np.nanargmax(values), values.shape)
        center = np.array([b0s[i], b1s[j]])
        span *= 0.22
    return center


def table_design(a, b, c, d):
    x = np.column_stack([np.ones(a + b + c + d), np.r_[np.ones(a + b), np.zeros(c + d)]])
    y = np.r_[np.ones(a), np.zeros(b), np.ones(c), np.zeros(d)]
    return x, y


def closed_form_slope(a, b, c, d):
    return math.log(((a + 0.5) * (d + 0.5)) / ((b + 0.5) * (c + 0.5)))


def subjects_from_arrays(arm, outcome, covariates=None, schema=None, study=None):
    covariates = covariates or {}
    schema = schema or CovariateSchema(
        tuple(CovariateSpec(name, "numeric") for name in covariates)
    )
    subs = []
    for i in range(len(arm)):
        covs = {name: values[i] for name, values in covariates.items()}
        subs.append(
            SubjectRecord(
                subject_id=f"s{i}",
                study_id=study[i] if study is not None else "T",
                arm=int(arm[i]),
                outcome=int(outcome[i]) if outcome[i] is not None else None,
                discontinued=False,
                covariates=covs,
            )
        )
    return TrialDataset(schema=schema, subjects=tuple(subs), label="T")


def mv(flags):
    return MembershipVector(tuple(f"s{i}" for i in range(len(flags))), tuple(bool(f) for f in flags), 0)


# ---------------------------------------------------------------------------
# design matrix


class TestBuildDesignMatrix:
    def test_fixed_column_order(self):
        ds = subjects_from_arrays([0, 1, 0, 1], [0, 1, 1, 0])
        design = build_design_matrix(ds, mv([0, 0, 1, 1]), ModelSpec(adjustment_covariates=()))
        assert design.column_names == ("intercept", "treatment", "subgroup", "treatment:subgroup")
        expected = np.array(
            [[1, 0, 0, 0], [1, 1, 0, 0], [1, 0, 1, 0], [1, 1, 1, 1]], dtype=float
        )
        assert np.array_equal(design.x, expected)
        assert np.array_equal(design.y, [0, 1, 1, 0])

    def test_numeric_adjuster_mean_centered(self):
        ds = subjects_from_arrays(
            [0, 1], [0, 1], covariates={"WEIGHT": [70.0, 80.0]}
        )
        design = build_design_matrix(
            ds, mv([0, 1]), ModelSpec(adjustment_covariates=("WEIGHT",))
        )
        np.testing.assert_allclose(design.x[:, -1], [-5.0, 5.0])

    def test_missing_adjuster_imputed_to_mean(self):
        ds = subjects_from_arrays(
            [0, 1, 0, 1], [0, 1, 1, 0], covariates={"WEIGHT": [70.0, 80.0, None, 90.0]}
        )
        design = build_design_matrix(
            ds, mv([0, 1, 0, 1]), ModelSpec(adjustment_covariates=("WEIGHT",))
        )
        assert design.x[2, -1] == 0.0  # column mean, hence 0 after centering

    def test_binary_adjuster_uncentered(self):
        ds = subjects_from_arrays(
            [0, 1, 0, 1],
            [0, 1, 1, 0],
            covariates={"NAVTNF": [True, False, True, None]},
            schema=CovariateSchema((CovariateSpec("NAVTNF", "boolean"),)),
        )
        design = build_design_matrix(
            ds, mv([0, 1, 1, 0]), ModelSpec(adjustment_covariates=("NAVTNF",))
        )
        np.testing.assert_allclose(design.x[:, -1], [1.0, 0.0, 1.0, 2 / 3])

    def test_missing_outcome_rejected(self):
        ds = subjects_from_arrays([0, 1], [0, None])
        with pytest.raises(ValueError, match="composite"):
            build_design_matrix(ds, mv([0, 1]), ModelSpec(adjustment_covariates=()))

    def test_absent_adjuster_rejected(self):
        ds = subjects_from_arrays([0, 1], [0, 1])
        with pytest.raises(ValueError, match="BMI"):
            build_design_matrix(ds, mv([0, 1]), ModelSpec(adjustment_covariates=("BMI",)))

    def test_constant_membership_warns(self):
        ds = subjects_from_arrays([0, 1, 0, 1], [0, 1, 1, 0])
        with pytest.warns(RuntimeWarning, match="constant"):
            build_design_matrix(ds, mv([1, 1, 1, 1]), ModelSpec(adjustment_covariates=()))


# ---------------------------------------------------------------------------
# penalized fit


class TestFirthFit:
    def test_half_cell_closed_form_property(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            while True:
                a, b, c, d = rng.integers(0, 21, size=4)
                if a + b > 0 and c + d > 0:
                    break
            x, y = table_design(a, b, c, d)
            fm, _ = fit_firth_logistic(x, y)
            assert fm.converged
            assert fm.coefficients[1] == pytest.approx(closed_form_slope(a, b, c, d), abs=1e-6)
            assert fm.coefficients[0] == pytest.approx(
                math.log((c + 0.5) / (d + 0.5)), abs=1e-6
            )

    def test_matches_grid_refinement_oracle(self):
        for cells in [(8, 2, 2, 8), (10, 0, 0, 10), (1, 9, 9, 1), (0, 5, 4, 6)]:
            x, y = table_design(*cells)
            fm, _ = fit_firth_logistic(x, y)
            oracle = grid_refine_max_2x2(*cells)
            np.testing.assert_allclose(fm.coefficients, oracle, atol=1e-4)

    def test_separated_data_finite_and_converged(self):
        x, y = table_design(10, 0, 0, 10)
        fm, _ = fit_firth_logistic(x, y)
        assert fm.converged
        assert np.all(np.isfinite(fm.coefficients))
        assert abs(fm.coefficients[1] - math.log(10.5 * 10.5 / 0.25)) < 1e-6

    def test_all_zero_outcomes_intercept_only(self):
        x = np.ones((10, 1))
        y = np.zeros(10)
        fm, _ = fit_firth_logistic(x, y)
        assert fm.coefficients[0] == pytest.approx(float(logit(0.5 / 11)), abs=1e-6)

    def test_singular_design_names_column(self):
        x = np.column_stack([np.ones(8), np.r_[np.zeros(4), np.ones(4)]])
        x = np.column_stack([x, x[:, 1]])  # duplicate column
        y = np.r_[0, 1, 0, 1, 1, 0, 1, 0].astype(float)
        with pytest.raises(SingularModelError) as err:
            fit_firth_logistic(x, y, column_names=("intercept", "treatment", "copy"))
        assert "copy" in str(err.value)

    def test_nonconvergence_reported_not_raised(self):
        x, y = table_design(8, 2, 2, 8)
        fm, _ = fit_firth_logistic(x, y, FitConfig(max_iter=2))
        assert not fm.converged

    def test_hat_values_sum_to_parameter_count(self):
        rng = np.random.default_rng(11)
        for p in (2, 3, 5):
            n = 60
            x = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(p - 1)])
            y = (rng.random(n) < 0.4).astype(float)
            fm, diag = fit_firth_logistic(x, y)
            assert np.all((diag.hat_values >= 0) & (diag.hat_values <= 1))
            assert diag.hat_values.sum() == pytest.approx(p, abs=1e-6)

    def test_score_norm_below_tol_when_converged(self):
        x, y = table_design(7, 6, 3, 9)
        cfg = FitConfig()
        fm, diag = fit_firth_logistic(x, y, cfg)
        assert fm.converged
        assert diag.score_norm_at_exit < cfg.tol

    def test_penalized_loglik_nondecreasing_over_accepted_steps(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            n = 50
            x = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
            y = (rng.random(n) < expit(x @ np.array([-0.5, 1.0, 0.8]))).astype(float)
            _, _, _, _, _, trace = _newton_firth(x, y, FitConfig())
            # non-decreasing up to the float-resolution slack of the search
            assert all(b >= a - 1e-11 * (1 + abs(a)) for a, b in zip(trace, trace[1:]))

    def test_covariance_matches_numerical_hessian_of_penalized_loglik(self):
        # relative agreement holds up to the O(p/n) penalty curvature, so
        # use a large sample
        rng = np.random.default_rng(17)
        n = 8000
        x = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n).astype(float)])
        y = (rng.random(n) < expit(x @ np.array([-0.4, 0.6, 0.5]))).astype(float)
        fm, _ = fit_firth_logistic(x, y)

        def pen_ll(beta):
            eta = x @ beta
            ll = np.sum(y * -np.logaddexp(0, -eta) + (1 - y) * -np.logaddexp(0, eta))
            p = expit(eta)
            w = p * (1 - p)
            info = (x * w[:, None]).T @ x
            return ll + 0.5 * np.linalg.slogdet(info)[1]

        p_dim = 3
        h = 1e-5
        hess = np.zeros((p_dim, p_dim))
        for i in range(p_dim):
            for j in range(p_dim):
                e_i = np.eye(p_dim)[i] * h
                e_j = np.eye(p_dim)[j] * h
                hess[i, j] = (
                    pen_ll(fm.coefficients + e_i + e_j)
                    - pen_ll(fm.coefficients + e_i - e_j)
                    - pen_ll(fm.coefficients - e_i + e_j)
                    + pen_ll(fm.coefficients - e_i - e_j)
                ) / (4 * h * h)
        numeric_cov = np.linalg.inv(-hess)
        np.testing.assert_allclose(fm.covariance, numeric_cov, rtol=1e-3)


class TestInteractionStatistic:
    def test_symmetric_data_zero_interaction(self):
        # identical response pattern in subgroup and complement
        arm = [0, 0, 1, 1] * 10
        flags = ([0] * 4 + [1] * 4) * 5
        outcome = [0, 1, 0, 1] * 10
        ds = subjects_from_arrays(arm, outcome)
        design = build_design_matrix(ds, mv(flags), ModelSpec(adjustment_covariates=()))
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        beta, se = interaction_statistic(fm)
        assert abs(beta) < 1e-8
        assert se > 0

    def test_se_matches_numerical_hessian_oracle(self):
        rng = np.random.default_rng(23)
        n = 8000
        arm = rng.integers(0, 2, n)
        flags = rng.integers(0, 2, n)
        eta = -0.6 + 0.7 * arm + 0.3 * flags + 0.5 * arm * flags
        outcome = (rng.random(n) < expit(eta)).astype(int)
        ds = subjects_from_arrays(arm, outcome)
        design = build_design_matrix(ds, mv(flags), ModelSpec(adjustment_covariates=()))
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        _, se = interaction_statistic(fm)

        x, y = design.x, design.y

        def pen_ll(beta):
            eta = x @ beta
            ll = np.sum(y * -np.logaddexp(0, -eta) + (1 - y) * -np.logaddexp(0, eta))
            p = expit(eta)
            info = (x * (p * (1 - p))[:, None]).T @ x
            return ll + 0.5 * np.linalg.slogdet(info)[1]

        p_dim = 4
        h = 1e-5
        hess = np.zeros((p_dim, p_dim))
        for i in range(p_dim):
            for j in range(p_dim):
                e_i = np.eye(p_dim)[i] * h
                e_j = np.eye(p_dim)[j] * h
                hess[i, j] = (
                    pen_ll(fm.coefficients + e_i + e_j)
                    - pen_ll(fm.coefficients + e_i - e_j)
                    - pen_ll(fm.coefficients - e_i + e_j)
                    + pen_ll(fm.coefficients - e_i - e_j)
                ) / (4 * h * h)
        oracle_se = math.sqrt(np.linalg.inv(-hess)[3, 3])
        assert se == pytest.approx(oracle_se, abs=1e-4)

    def test_error_without_interaction(self):
        ds = subjects_from_arrays([0, 1, 0, 1], [0, 1, 1, 0])
        design = build_design_matrix(
            ds, mv([0, 1, 1, 0]), ModelSpec(adjustment_covariates=(), include_interaction=False)
        )
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        with pytest.raises(ValueError, match="interaction"):
            interaction_statistic(fm)


# ---------------------------------------------------------------------------
# standardization


class TestStandardizedRiskDifference:
    def test_half_cell_special_case(self):
        # control 2/10 responders, treated 8/10; no subgroup terms
        x = np.column_stack([np.ones(20), np.r_[np.zeros(10), np.ones(10)]])
        y = np.r_[np.ones(2), np.zeros(8), np.ones(8), np.zeros(2)]
        design = DesignMatrix(x=x, y=y, column_names=("intercept", "treatment"))
        fm, _ = fit_firth_logistic(x, y, column_names=design.column_names)
        delta = standardized_risk_difference(fm, design, TARGET_OVERALL)
        assert delta == pytest.approx(6 / 11, abs=1e-8)

    def test_zero_treatment_terms_give_zero(self):
        ds = subjects_from_arrays([0, 1, 0, 1] * 3, [0, 1, 1, 0] * 3)
        design = build_design_matrix(ds, mv([0, 1, 1, 0] * 3), ModelSpec(adjustment_covariates=()))
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        forced = FittedModel_with_coefficients(fm, treatment=0.0, interaction=0.0)
        for target in (TARGET_SUBGROUP, TARGET_COMPLEMENT, TARGET_OVERALL):
            assert standardized_risk_difference(forced, design, target) == 0.0

    def test_bounded_by_one(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = 30
            arm = rng.integers(0, 2, n)
            outcome = rng.integers(0, 2, n)
            flags = rng.integers(0, 2, n)
            if len(set(arm)) < 2 or len(set(flags)) < 2:
                continue
            ds = subjects_from_arrays(arm, outcome)
            design = build_design_matrix(ds, mv(flags), ModelSpec(adjustment_covariates=()))
            try:
                fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
            except SingularModelError:
                continue
            for target in (TARGET_SUBGROUP, TARGET_COMPLEMENT, TARGET_OVERALL):
                assert abs(standardized_risk_difference(fm, design, target)) <= 1.0

    def test_matches_per_subject_brute_force(self):
        rng = np.random.default_rng(31)
        for trial in range(8):
            n = int(rng.integers(20, 51))
            arm = rng.integers(0, 2, n)
            flags = rng.integers(0, 2, n)
            weight = rng.normal(80, 15, n)
            eta = -0.5 + 0.8 * arm + 0.4 * flags + 0.6 * arm * flags + 0.01 * (weight - 80)
            outcome = (rng.random(n) < expit(eta)).astype(int)
            if len(set(arm)) < 2 or len(set(flags)) < 2 or flags.sum() < 2 or (1 - flags).sum() < 2:
                continue
            ds = subjects_from_arrays(arm, outcome, covariates={"WEIGHT": list(weight)})
            design = build_design_matrix(ds, mv(flags), ModelSpec(adjustment_covariates=("WEIGHT",)))
            try:
                fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
            except SingularModelError:
                continue
            beta = fm.coefficients
            w_mean = weight.mean()
            per_subject = []
            for i in range(n):
                eta1 = beta[0] + beta[1] + beta[2] * flags[i] + beta[3] * flags[i] + beta[4] * (weight[i] - w_mean)
                eta0 = beta[0] + beta[2] * flags[i] + beta[4] * (weight[i] - w_mean)
                per_subject.append(float(expit(eta1) - expit(eta0)))
            per_subject = np.array(per_subject)
            assert standardized_risk_difference(fm, design, TARGET_SUBGROUP) == pytest.approx(
                per_subject[flags == 1].mean(), abs=1e-10
            )
            assert standardized_risk_difference(fm, design, TARGET_COMPLEMENT) == pytest.approx(
                per_subject[flags == 0].mean(), abs=1e-10
            )
            assert standardized_risk_difference(fm, design, TARGET_OVERALL) == pytest.approx(
                per_subject.mean(), abs=1e-10
            )

    def test_centering_changes_intercept_only(self):
        rng = np.random.default_rng(41)
        n = 120
        arm = rng.integers(0, 2, n)
        flags = rng.integers(0, 2, n)
        weight = rng.normal(80, 12, n)
        outcome = (rng.random(n) < expit(-0.4 + 0.6 * arm + 0.5 * arm * flags)).astype(int)
        ds = subjects_from_arrays(arm, outcome, covariates={"WEIGHT": list(weight)})
        design = build_design_matrix(ds, mv(flags), ModelSpec(adjustment_covariates=("WEIGHT",)))
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)

        raw = design.x.copy()
        raw[:, -1] = weight  # uncentered
        fm_raw, _ = fit_firth_logistic(raw, design.y, column_names=design.column_names)
        raw_design = DesignMatrix(x=raw, y=design.y, column_names=design.column_names)

        beta_c, se_c = interaction_statistic(fm)
        beta_r, se_r = interaction_statistic(fm_raw)
        assert beta_c == pytest.approx(beta_r, abs=1e-8)
        assert se_c == pytest.approx(se_r, abs=1e-8)
        for target in (TARGET_SUBGROUP, TARGET_COMPLEMENT, TARGET_OVERALL):
            assert standardized_risk_difference(fm, design, target) == pytest.approx(
                standardized_risk_difference(fm_raw, raw_design, target), abs=1e-8
            )
        assert fm.coefficients[0] != pytest.approx(fm_raw.coefficients[0], abs=1e-3)

    def test_empty_target_rejected(self):
        ds = subjects_from_arrays([0, 1, 0, 1], [0, 1, 1, 0])
        design = build_design_matrix(
            ds, None, ModelSpec(adjustment_covariates=())
        )
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        with pytest.raises(ValueError, match="subgroup"):
            standardized_risk_difference(fm, design, TARGET_SUBGROUP)


def FittedModel_with_coefficients(fm, treatment, interaction):
    import dataclasses

    beta = fm.coefficients.copy()
    beta[fm.column_names.index("treatment")] = treatment
    beta[fm.column_names.index("treatment:subgroup")] = interaction
    return dataclasses.replace(fm, coefficients=beta)


# ---------------------------------------------------------------------------
# bootstrap


def two_study_dataset(rng, n_per_arm=100, crp_effect=0.0):
    arm, outcome, crp, study = [], [], [], []
    for label in ("A", "B"):
        for a in (0, 1):
            for _ in range(n_per_arm):
                c = float(rng.lognormal(1.5, 0.8))
                eta = -0.8 + 0.9 * a + crp_effect * c
                arm.append(a)
                outcome.append(int(rng.random() < expit(eta)))
                crp.append(c)
                study.append(label)
    return subjects_from_arrays(arm, outcome, covariates={"CRP": crp}, study=study)


class TestBootstrapSd:
    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(8)
        ds = two_study_dataset(rng, n_per_arm=40)
        expr = parse("CRP > 4")
        spec = ModelSpec(adjustment_covariates=())
        first = bootstrap_sd(ds, expr, spec, 25, seed=7)
        second = bootstrap_sd(ds, expr, spec, 25, seed=7)
        assert first == second
        assert first != bootstrap_sd(ds, expr, spec, 25, seed=8)

    def test_degenerate_resampling_gives_zero(self):
        # subgroup is everyone; outcome deterministic per arm; no adjusters
        arm = [0] * 12 + [1] * 12
        outcome = [0] * 12 + [1] * 12
        ds = subjects_from_arrays(arm, outcome, covariates={"AGE": [50.0] * 24})
        sd = bootstrap_sd(
            ds, parse("AGE > -1000 | AGE <= -1000"), ModelSpec(adjustment_covariates=()), 10, seed=1
        )
        assert sd == 0.0

    def test_b_below_two_rejected(self):
        ds = two_study_dataset(np.random.default_rng(0), n_per_arm=20)
        with pytest.raises(ValueError):
            bootstrap_sd(ds, parse("CRP > 4"), ModelSpec(adjustment_covariates=()), 1, seed=0)

    def test_against_monte_carlo_oracle(self):
        # sd across fresh datasets from the same generator vs one bootstrap
        spec = ModelSpec(adjustment_covariates=())
        expr = parse("CRP > 4")

        def delta_of(ds):
            from subchal.subgroup_expr import membership

            m = membership(expr, ds)
            design = build_design_matrix(ds, m, spec)
            fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
            return standardized_risk_difference(fm, design, TARGET_SUBGROUP)

        fresh = [
            delta_of(two_study_dataset(np.random.default_rng(1000 + i), n_per_arm=100))
            for i in range(200)
        ]
        truth = float(np.std(fresh, ddof=1))
        boot = bootstrap_sd(
            two_study_dataset(np.random.default_rng(77), n_per_arm=100), expr, spec, 200, seed=3
        )
        assert abs(boot - truth) / truth < 0.25
