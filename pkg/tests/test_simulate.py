import dataclasses
import math

import numpy as np
import pytest
from scipy.special import expit

from subchal.inference import ModelSpec, build_design_matrix, fit_firth_logistic
from subchal.inference import TARGET_SUBGROUP, standardized_risk_difference
from subchal.simulate import (
    ConfigError,
    CovariateGenerator,
    GeneratorConfig,
    OutcomeModel,
    SearchPlan,
    SearchError,
    StudyPlan,
    bundled_config,
    enumerate_candidates,
    generate_trial,
    naive_cutpoint_search,
    run_challenge_simulation,
    validate_generator_config,
    write_simulation_report,
)
from subchal.subgroup_expr import format_expr, membership, parse
from subchal.trial_data import apply_composite_nonresponse, load_dataset, pool_studies, save_dataset, save_schema


def tiny_config(treatment=0.0, modifier=0.0, n_per_arm=100, missing=0.0, disc=0.0):
    return GeneratorConfig(
        studies=(StudyPlan("S1", n_per_arm, n_per_arm), StudyPlan("S2", n_per_arm, n_per_arm)),
        holdout=StudyPlan("H", n_per_arm, n_per_arm),
        covariates=(
            CovariateGenerator("CRPSI", "numeric", "lognormal", {"mu": 1.7, "sigma": 0.9}, missing),
            CovariateGenerator("AGE", "numeric", "normal", {"mean": 48, "sd": 12}),
            CovariateGenerator("MTXUSE", "boolean", "bernoulli", {"p": 0.5}),
        ),
        outcome=OutcomeModel(
            intercept=-1.0,
            treatment=treatment,
            covariate_effects={"CRPSI": 0.01},
            modifier_effect=modifier,
            modifier_subgroup="CRPSI > 10" if modifier else None,
        ),
        discontinuation_rate=disc,
        adjustment_covariates=(),
        search=SearchPlan(candidates=("CRPSI", "AGE", "MTXUSE"), grid=4),
        bootstrap_b=20,
    )


class TestGenerateTrial:
    def test_same_seed_identical(self):
        cfg = tiny_config(treatment=0.8)
        assert generate_trial(cfg, 0, 5) == generate_trial(cfg, 0, 5)
        assert generate_trial(cfg, 0, 5) != generate_trial(cfg, 0, 6)
        assert generate_trial(cfg, 0, 5) != generate_trial(cfg, 1, 5)

    def test_block_randomization_exact_counts(self):
        cfg = tiny_config(n_per_arm=100)
        ds = generate_trial(cfg, 0, 3)
        assert ds.arm_count(0) == 100
        assert ds.arm_count(1) == 100
        assert ds.n_subjects == 200

    def test_null_treatment_arm_rates_close(self):
        cfg = tiny_config(treatment=0.0, n_per_arm=200)
        diffs = []
        for seed in range(100):
            ds = generate_trial(cfg, 0, seed)
            y = np.array([s.outcome for s in ds.subjects])
            arm = np.array([s.arm for s in ds.subjects])
            diffs.append(y[arm == 1].mean() - y[arm == 0].mean())
        pooled = float(np.mean(diffs))
        p = 0.28  # roughly the response level of the null config
        sd_mean = math.sqrt(2 * p * (1 - p) / 200 / 100)
        assert abs(pooled) < 3 * sd_mean

    def test_missingness_rate_applied(self):
        cfg = tiny_config(missing=0.25, n_per_arm=400)
        ds = generate_trial(cfg, 0, 9)
        frac = np.mean([s.covariates["CRPSI"] is None for s in ds.subjects])
        assert 0.18 < frac < 0.32

    def test_discontinuation_independent_flag(self):
        cfg = tiny_config(disc=0.15, n_per_arm=400)
        ds = generate_trial(cfg, 0, 11)
        frac = np.mean([s.discontinued for s in ds.subjects])
        assert 0.10 < frac < 0.20
        # composite rule then produces a complete outcome vector
        assert all(s.outcome in (0, 1) for s in apply_composite_nonresponse(ds).subjects)

    def test_generated_dataset_round_trips_through_loader(self, tmp_path):
        from subchal.simulate import schema_from_config

        cfg = tiny_config(treatment=0.5, missing=0.1)
        ds = generate_trial(cfg, 0, 21)
        save_dataset(ds, tmp_path / "gen.csv")
        save_schema(schema_from_config(cfg), tmp_path / "gen_schema.json")
        again = load_dataset(tmp_path / "gen.csv", tmp_path / "gen_schema.json")
        assert again == ds

    def test_out_of_range_index(self):
        with pytest.raises(ConfigError):
            generate_trial(tiny_config(), 3, 0)


class TestConfigValidation:
    def test_bundled_configs_load(self):
        for name in ("null", "modifier"):
            cfg = bundled_config(name)
            assert len(cfg.studies) == 4
            assert cfg.holdout.n_control == 190

    def test_unknown_bundled_name(self):
        with pytest.raises(ConfigError):
            bundled_config("nope")

    def test_saturating_outcome_model_rejected(self):
        cfg = tiny_config()
        bad = dataclasses.replace(
            cfg, outcome=dataclasses.replace(cfg.outcome, covariate_effects={"CRPSI": 5.0})
        )
        with pytest.raises(ConfigError, match="saturate"):
            validate_generator_config(bad)

    def test_unknown_effect_covariate_rejected(self):
        cfg = tiny_config()
        bad = dataclasses.replace(
            cfg, outcome=dataclasses.replace(cfg.outcome, covariate_effects={"BMI": 0.1})
        )
        with pytest.raises(ConfigError, match="BMI"):
            validate_generator_config(bad)

    def test_modifier_requires_subgroup(self):
        cfg = tiny_config()
        bad = dataclasses.replace(
            cfg, outcome=dataclasses.replace(cfg.outcome, modifier_effect=0.5, modifier_subgroup=None)
        )
        with pytest.raises(ConfigError, match="modifier_subgroup"):
            validate_generator_config(bad)


class TestEnumerateAndSearch:
    def test_single_binary_candidate_enumerates_two_subgroups(self):
        cfg = tiny_config(treatment=0.6)
        training = apply_composite_nonresponse(generate_trial(cfg, 0, 2))
        options = enumerate_candidates(training, ["MTXUSE"], grid=4)
        assert len(options) == 2
        assert {o.expression_text for o in options} == {"MTXUSE == 1", "MTXUSE == 0"}

    def test_numeric_candidate_two_directions_per_quantile(self):
        cfg = tiny_config(treatment=0.6)
        training = apply_composite_nonresponse(generate_trial(cfg, 0, 2))
        options = enumerate_candidates(training, ["AGE"], grid=4)
        assert len(options) == 8  # 4 quantiles x {>, <=}

    def test_training_delta_matches_model_fit(self):
        # the search's closed-form candidate effect equals the fitted
        # subgroup risk difference of the interaction model
        cfg = tiny_config(treatment=0.6)
        training = apply_composite_nonresponse(
            pool_studies([generate_trial(cfg, i, 4) for i in range(2)])
        )
        spec = ModelSpec(adjustment_covariates=())
        for cand in enumerate_candidates(training, ["AGE", "MTXUSE"], grid=4):
            if not cand.valid:
                continue
            m = membership(parse(cand.expression_text), training)
            design = build_design_matrix(training, m, spec)
            fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
            fitted = standardized_risk_difference(fm, design, TARGET_SUBGROUP)
            assert cand.training_delta == pytest.approx(fitted, abs=1e-7)

    def test_search_recovers_true_modifier_threshold(self):
        # truth boundary at the 70th percentile of lognormal(1.7, 0.9),
        # exp(1.7 + 0.9 * 0.5244) = 8.77; the rising main effect makes the
        # risk difference fall off above the boundary, so the boundary
        # decile is the strict optimum
        base = tiny_config(treatment=0.3, modifier=1.3, n_per_arm=1000)
        cfg = dataclasses.replace(
            base,
            outcome=dataclasses.replace(
                base.outcome,
                intercept=-1.3,
                covariate_effects={"CRPSI": 0.07},
                modifier_subgroup="CRPSI > 8.77",
            ),
            search=SearchPlan(candidates=("CRPSI", "AGE"), grid=9),
        )
        hits = 0
        for seed in range(100):
            training = apply_composite_nonresponse(
                pool_studies([generate_trial(cfg, i, 1000 + seed) for i in range(2)])
            )
            expr = naive_cutpoint_search(training, cfg.search.candidates, cfg.search.grid)
            text = format_expr(expr)
            if not text.startswith("CRPSI >"):
                continue
            threshold = float(text.split(">")[1])
            values = np.array(
                [s.covariates["CRPSI"] for s in training.subjects if s.covariates["CRPSI"] is not None]
            )
            lo, hi = np.quantile(values, [0.60, 0.80])
            if lo <= threshold <= hi:
                hits += 1
        assert hits >= 90

    def test_null_search_exceeds_overall_effect(self):
        cfg = tiny_config(treatment=0.8)
        training = apply_composite_nonresponse(
            pool_studies([generate_trial(cfg, i, 7) for i in range(2)])
        )
        expr = naive_cutpoint_search(training, ("CRPSI", "AGE", "MTXUSE"), 4)
        spec = ModelSpec(adjustment_covariates=())
        m = membership(expr, training)
        design = build_design_matrix(training, m, spec)
        fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
        picked = standardized_risk_difference(fm, design, TARGET_SUBGROUP)
        overall_design = build_design_matrix(training, None, spec)
        fm_overall, _ = fit_firth_logistic(
            overall_design.x, overall_design.y, column_names=overall_design.column_names
        )
        overall = standardized_risk_difference(fm_overall, overall_design, "overall")
        assert picked > overall

    def test_no_valid_candidate_is_error(self):
        cfg = tiny_config(treatment=0.6, n_per_arm=12)
        training = apply_composite_nonresponse(generate_trial(cfg, 0, 3))
        with pytest.raises(SearchError):
            naive_cutpoint_search(training, ("CRPSI",), grid=9)


class TestRunChallengeSimulation:
    def test_deterministic_report(self):
        cfg = tiny_config(treatment=0.8)
        a = run_challenge_simulation(cfg, 3, seed=2)
        b = run_challenge_simulation(cfg, 3, seed=2)
        assert a == b

    def test_replication_count_and_fields(self):
        cfg = tiny_config(treatment=0.8)
        report = run_challenge_simulation(cfg, 4, seed=3)
        assert len(report.replications) == 4
        scored = [r for r in report.replications if not r.skipped]
        assert report.aggregates.n_scored == len(scored)
        for r in scored:
            assert math.isfinite(r.delta_pred)
            assert r.sigma_pred > 0
            assert math.isfinite(r.s1)
            assert math.isfinite(r.s2)

    def test_replications_must_be_positive(self):
        with pytest.raises(ValueError):
            run_challenge_simulation(tiny_config(), 0, seed=1)

    def test_report_files_byte_identical(self, tmp_path):
        cfg = tiny_config(treatment=0.8)
        report = run_challenge_simulation(cfg, 2, seed=5)
        write_simulation_report(report, tmp_path / "one")
        write_simulation_report(report, tmp_path / "two")
        for name in ("replications.csv", "simulation.json"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_fixed_subgroup_isolates_selection_optimism(self):
        # with no true modifier: a fixed subgroup shows no optimism while
        # the searched subgroup's training estimate exceeds the truth
        cfg = tiny_config(treatment=0.8, n_per_arm=150)
        spec = ModelSpec(adjustment_covariates=())
        fixed_expr = parse("AGE > 48")
        searched_training, fixed_s1 = [], []
        overall_training = []
        for seed in range(25):
            training = apply_composite_nonresponse(
                pool_studies([generate_trial(cfg, i, 300 + seed) for i in range(2)])
            )
            holdout = apply_composite_nonresponse(generate_trial(cfg, 2, 300 + seed))
            expr = naive_cutpoint_search(training, cfg.search.candidates, cfg.search.grid)
            m = membership(expr, training)
            design = build_design_matrix(training, m, spec)
            fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
            searched_training.append(standardized_risk_difference(fm, design, TARGET_SUBGROUP))
            overall_d = build_design_matrix(training, None, spec)
            fm_o, _ = fit_firth_logistic(overall_d.x, overall_d.y, column_names=overall_d.column_names)
            overall_training.append(standardized_risk_difference(fm_o, overall_d, "overall"))
            from subchal.scoring import score_s1

            s1, _ = score_s1(holdout, membership(fixed_expr, holdout), spec)
            fixed_s1.append(s1)
        assert np.mean(searched_training) > np.mean(overall_training)
        assert abs(np.mean(fixed_s1)) < 2.5 / math.sqrt(len(fixed_s1))
