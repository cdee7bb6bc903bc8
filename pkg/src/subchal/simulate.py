"""Synthetic multi-study trial programs and end-to-end challenge simulation.

The generator draws independent baseline covariates per study, assigns
arms by block randomization and draws the binary response from a
logistic truth model that may include a treatment-by-subgroup
interaction. A deliberately naive baseline team searches single-variable
cutpoint subgroups on the pooled training studies; running it against a
fresh holdout study exhibits the optimism of selected subgroup effects
(regression to the mean) even when no true effect modifier exists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import t as student_t

from . import analysis
from .inference import FitConfig, ModelSpec, bootstrap_sd, build_design_matrix, fit_firth_logistic
from .inference import TARGET_SUBGROUP, standardized_risk_difference
from .scoring import MIN_CELL, Submission, check_validity, score_s1, score_s2
from .subgroup_expr import (
    SubgroupExpr,
    TriState,
    evaluate,
    format_expr,
    membership,
    parse,
    variables_used,
)
from .trial_data import (
    BOOLEAN,
    NUMERIC,
    CovariateSchema,
    CovariateSpec,
    SubjectRecord,
    TrialDataset,
    apply_composite_nonresponse,
    pool_studies,
)

_DISTRIBUTIONS = ("normal", "lognormal", "uniform", "bernoulli")
_MAX_ABS_LINEAR_PREDICTOR = 30.0
_PROBE_TAIL = 1e-5


class ConfigError(ValueError):
    """The generator configuration is invalid."""


class SearchError(RuntimeError):
    """No candidate subgroup satisfies the validity rule."""


@dataclass(frozen=True)
class CovariateGenerator:
    name: str
    kind: str  # numeric | boolean
    distribution: str
    params: dict[str, float]
    missing_rate: float = 0.0


@dataclass(frozen=True)
class StudyPlan:
    label: str
    n_control: int
    n_treatment: int


@dataclass(frozen=True)
class OutcomeModel:
    intercept: float
    treatment: float
    covariate_effects: dict[str, float]
    modifier_effect: float = 0.0
    modifier_subgroup: str | None = None


@dataclass(frozen=True)
class SearchPlan:
    candidates: tuple[str, ...]
    grid: int = 9


@dataclass(frozen=True)
class GeneratorConfig:
    studies: tuple[StudyPlan, ...]
    holdout: StudyPlan
    covariates: tuple[CovariateGenerator, ...]
    outcome: OutcomeModel
    discontinuation_rate: float = 0.0
    adjustment_covariates: tuple[str, ...] = ()
    search: SearchPlan | None = None
    bootstrap_b: int = 100
    seed: int = 0

    @property
    def all_plans(self) -> tuple[StudyPlan, ...]:
        return (*self.studies, self.holdout)


@dataclass(frozen=True)
class CandidateSubgroup:
    covariate: str
    threshold: float | None  # None for boolean level candidates
    direction: str  # ">", "<=", "==1", "==0"
    expression_text: str
    flags: np.ndarray
    valid: bool
    training_delta: float | None


@dataclass(frozen=True)
class ReplicationResult:
    replication: int
    skipped: bool
    skip_reason: str = ""
    expression: str = ""
    train_subgroup_n: int = 0
    holdout_subgroup_n: int = 0
    delta_pred: float = math.nan
    sigma_pred: float = math.nan
    delta_hat: float = math.nan
    s1: float = math.nan
    s2: float = math.nan
    covered: bool = False


@dataclass(frozen=True)
class SimulationAggregates:
    n_scored: int
    n_skipped: int
    mean_overestimation: float
    mean_pct_overestimation: float | None
    coverage: float
    mean_s1: float
    spearman_size_abs_error: float | None
    spearman_p_value: float | None


@dataclass(frozen=True)
class SimulationReport:
    seed: int
    replications: tuple[ReplicationResult, ...]
    aggregates: SimulationAggregates


def schema_from_config(cfg: GeneratorConfig) -> CovariateSchema:
    return CovariateSchema(
        covariates=tuple(
            CovariateSpec(name=c.name, kind=NUMERIC if c.kind == NUMERIC else BOOLEAN)
            for c in cfg.covariates
        )
    )


def _quantile(gen: CovariateGenerator, prob: float) -> float:
    from scipy.stats import lognorm, norm, uniform

    p = gen.params
    if gen.distribution == "normal":
        return float(norm.ppf(prob, loc=p["mean"], scale=p["sd"]))
    if gen.distribution == "lognormal":
        return float(lognorm.ppf(prob, s=p["sigma"], scale=math.exp(p["mu"])))
    if gen.distribution == "uniform":
        return float(uniform.ppf(prob, loc=p["low"], scale=p["high"] - p["low"]))
    return 1.0  # bernoulli support is {0, 1}


def validate_generator_config(cfg: GeneratorConfig) -> None:
    """Structural checks plus probing the linear predictor at extreme quantiles."""
    if not cfg.studies:
        raise ConfigError("at least one training study is required")
    names = [c.name for c in cfg.covariates]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate covariate names")
    for plan in cfg.all_plans:
        if plan.n_control < 1 or plan.n_treatment < 1:
            raise ConfigError(f"study {plan.label!r} needs subjects on both arms")
    by_name = {c.name: c for c in cfg.covariates}
    for gen in cfg.covariates:
        if gen.distribution not in _DISTRIBUTIONS:
            raise ConfigError(f"covariates.{gen.name}: unknown distribution {gen.distribution!r}")
        if not 0.0 <= gen.missing_rate < 1.0:
            raise ConfigError(f"covariates.{gen.name}: missing_rate out of range")
    for name in cfg.outcome.covariate_effects:
        if name not in by_name:
            raise ConfigError(f"outcome.covariate_effects.{name}: unknown covariate")
    for name in cfg.adjustment_covariates:
        if name not in by_name:
            raise ConfigError(f"adjustment_covariates: unknown covariate {name!r}")
    if cfg.search is not None:
        for name in cfg.search.candidates:
            if name not in by_name:
                raise ConfigError(f"search.candidates: unknown covariate {name!r}")
        if cfg.search.grid < 2:
            raise ConfigError("search.grid must be at least 2")
    if not 0.0 <= cfg.discontinuation_rate < 1.0:
        raise ConfigError("discontinuation_rate out of range")
    if cfg.outcome.modifier_effect != 0.0 and not cfg.outcome.modifier_subgroup:
        raise ConfigError("outcome.modifier_subgroup is required when modifier_effect != 0")
    if cfg.outcome.modifier_subgroup:
        expr = parse(cfg.outcome.modifier_subgroup)
        unknown = variables_used(expr) - set(names)
        if unknown:
            raise ConfigError(f"outcome.modifier_subgroup references unknown covariates {sorted(unknown)}")

    # The logistic link keeps probabilities inside (0,1) for any finite
    # linear predictor; the probe guards against saturation to 0/1 in
    # double precision at extreme covariate quantiles.
    worst = abs(cfg.outcome.intercept) + abs(cfg.outcome.treatment) + abs(cfg.outcome.modifier_effect)
    for name, effect in cfg.outcome.covariate_effects.items():
        gen = by_name[name]
        low = _quantile(gen, _PROBE_TAIL)
        high = _quantile(gen, 1.0 - _PROBE_TAIL)
        worst += max(abs(effect * low), abs(effect * high))
    if worst > _MAX_ABS_LINEAR_PREDICTOR:
        raise ConfigError(
            f"outcome model can reach |linear predictor| = {worst:.1f} > "
            f"{_MAX_ABS_LINEAR_PREDICTOR}; response probabilities would saturate"
        )


def _draw_covariate(gen: CovariateGenerator, n: int, rng: np.random.Generator) -> np.ndarray:
    p = gen.params
    if gen.distribution == "normal":
        return rng.normal(p["mean"], p["sd"], n)
    if gen.distribution == "lognormal":
        return rng.lognormal(p["mu"], p["sigma"], n)
    if gen.distribution == "uniform":
        return rng.uniform(p["low"], p["high"], n)
    return (rng.random(n) < p["p"]).astype(float)


def generate_trial(cfg: GeneratorConfig, study_index: int, seed: int) -> TrialDataset:
    """Generate one study; index runs over training studies then the holdout.

    Arms are assigned by block randomization (exact configured counts),
    covariates are drawn independently per subject, the response comes
    from the logistic truth model evaluated on the latent (pre-missing)
    covariates and discontinuation is independent of the response.
    """
    plans = cfg.all_plans
    if not 0 <= study_index < len(plans):
        raise ConfigError(f"study_index {study_index} out of range")
    plan = plans[study_index]
    rng = np.random.default_rng([seed, study_index])
    n = plan.n_control + plan.n_treatment

    arm = np.array([0] * plan.n_control + [1] * plan.n_treatment)
    arm = arm[rng.permutation(n)]

    latent: dict[str, np.ndarray] = {}
    observed: dict[str, np.ndarray] = {}
    missing: dict[str, np.ndarray] = {}
    for gen in cfg.covariates:
        values = _draw_covariate(gen, n, rng)
        latent[gen.name] = values
        missing[gen.name] = rng.random(n) < gen.missing_rate
        observed[gen.name] = values

    eta = np.full(n, cfg.outcome.intercept) + cfg.outcome.treatment * arm
    for name, effect in cfg.outcome.covariate_effects.items():
        eta += effect * latent[name]
    if cfg.outcome.modifier_effect != 0.0 and cfg.outcome.modifier_subgroup:
        modifier = parse(cfg.outcome.modifier_subgroup)
        in_subgroup = np.zeros(n)
        for i in range(n):
            covs = {
                gen.name: _native_value(gen, latent[gen.name][i]) for gen in cfg.covariates
            }
            subject = SubjectRecord(
                subject_id=str(i), study_id=plan.label, arm=int(arm[i]),
                outcome=None, discontinued=False, covariates=covs,
            )
            in_subgroup[i] = 1.0 if evaluate(modifier, subject) is TriState.IN else 0.0
        eta += cfg.outcome.modifier_effect * arm * in_subgroup

    outcome = (rng.random(n) < expit(eta)).astype(int)
    discontinued = rng.random(n) < cfg.discontinuation_rate

    subjects = []
    for i in range(n):
        covs: dict = {}
        for gen in cfg.covariates:
            if missing[gen.name][i]:
                covs[gen.name] = None
            else:
                covs[gen.name] = _native_value(gen, observed[gen.name][i])
        subjects.append(
            SubjectRecord(
                subject_id=f"{plan.label}-{i:04d}",
                study_id=plan.label,
                arm=int(arm[i]),
                outcome=int(outcome[i]),
                discontinued=bool(discontinued[i]),
                covariates=covs,
            )
        )
    return TrialDataset(schema=schema_from_config(cfg), subjects=tuple(subjects), label=plan.label)


def _native_value(gen: CovariateGenerator, value: float):
    if gen.kind == BOOLEAN or gen.distribution == "bernoulli":
        return bool(value >= 0.5)
    return float(value)


def _half_cell_delta(y: np.ndarray, arm: np.ndarray, flags: np.ndarray) -> float:
    """Subgroup risk difference of the saturated interaction model.

    The Jeffreys-penalized fit of the four-cell model has the closed form
    p_cell = (responders + 1/2) / (n_cell + 1); the subgroup effect is
    the treated-minus-control difference of the two subgroup cells. This
    equals standardized_risk_difference of that fit (tested property).
    """
    in_t = flags & (arm == 1)
    in_c = flags & (arm == 0)
    p1 = (y[in_t].sum() + 0.5) / (in_t.sum() + 1.0)
    p0 = (y[in_c].sum() + 0.5) / (in_c.sum() + 1.0)
    return float(p1 - p0)


def enumerate_candidates(
    training: TrialDataset,
    candidates,
    grid: int,
) -> list[CandidateSubgroup]:
    """All single-variable cutpoint subgroups with their training effects.

    Numeric candidates get ``x > q`` and ``x <= q`` at each of ``grid``
    interior training quantiles; boolean candidates get the two level
    memberships. Subjects with the candidate covariate missing fall
    outside the subgroup, matching the membership semantics. Candidates
    failing the validity rule on the training data keep training_delta
    None.
    """
    if grid < 2:
        raise ValueError("grid must be at least 2")
    if any(s.outcome is None for s in training.subjects):
        raise ValueError("training data has missing outcomes; apply the composite rule first")
    y = np.array([s.outcome for s in training.subjects], dtype=float)
    arm = np.array([s.arm for s in training.subjects])
    out: list[CandidateSubgroup] = []
    for name in sorted(candidates):
        spec = training.schema.get(name)
        raw = np.full(training.n_subjects, np.nan)
        for i, s in enumerate(training.subjects):
            v = s.covariates[name]
            if v is not None:
                raw[i] = float(v) if spec.kind == NUMERIC else (1.0 if v else 0.0)
        present = ~np.isnan(raw)
        if spec.kind == BOOLEAN:
            options = [("==1", None, present & (raw == 1.0)), ("==0", None, present & (raw == 0.0))]
        elif spec.kind == NUMERIC:
            probs = [k / (grid + 1) for k in range(1, grid + 1)]
            thresholds = sorted(set(float(q) for q in np.quantile(raw[present], probs)))
            options = []
            for q in thresholds:
                options.append((">", q, present & (raw > q)))
                options.append(("<=", q, present & (raw <= q)))
        else:
            raise ValueError(f"candidate {name!r} must be numeric or boolean")
        for direction, threshold, flags in options:
            if direction == "==1":
                text = f"{name} == 1"
            elif direction == "==0":
                text = f"{name} == 0"
            else:
                text = f"{name} {direction} {repr(threshold)}"
            cells = [
                int(np.sum(flags & (arm == 1))),
                int(np.sum(flags & (arm == 0))),
                int(np.sum(~flags & (arm == 1))),
                int(np.sum(~flags & (arm == 0))),
            ]
            valid = all(c >= MIN_CELL for c in cells)
            delta = _half_cell_delta(y, arm, flags) if valid else None
            out.append(
                CandidateSubgroup(
                    covariate=name,
                    threshold=threshold,
                    direction=direction,
                    expression_text=text,
                    flags=flags,
                    valid=valid,
                    training_delta=delta,
                )
            )
    return out


def naive_cutpoint_search(training: TrialDataset, candidates, grid: int = 9) -> SubgroupExpr:
    """Exhaustive single-variable threshold search for the baseline team.

    Returns the valid candidate maximizing the training subgroup risk
    difference; ties break on (covariate name, threshold, direction) so
    the search is deterministic.
    """
    best: CandidateSubgroup | None = None
    for cand in enumerate_candidates(training, candidates, grid):
        if not cand.valid:
            continue
        if best is None or cand.training_delta > best.training_delta:
            best = cand
    if best is None:
        raise SearchError("no candidate subgroup satisfies the validity rule on the training data")
    return parse(best.expression_text)


def _rep_seed(seed: int, replication: int, stream: int) -> int:
    state = np.random.SeedSequence([seed, replication, stream]).generate_state(1)
    return int(state[0])


def run_challenge_simulation(cfg: GeneratorConfig, replications: int, seed: int) -> SimulationReport:
    """Simulate the whole challenge loop and aggregate the prediction errors.

    Per replication: generate the training studies and a holdout, search
    a subgroup on the pooled training data, predict its effect there
    (point estimate plus bootstrap standard deviation) and score the
    prediction on the holdout. Fully deterministic given the seed.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    validate_generator_config(cfg)
    spec = ModelSpec(adjustment_covariates=cfg.adjustment_covariates, include_interaction=True)
    search = cfg.search or SearchPlan(candidates=tuple(c.name for c in cfg.covariates))
    fit_cfg = FitConfig()

    results: list[ReplicationResult] = []
    for rep in range(replications):
        training = pool_studies(
            [
                generate_trial(cfg, idx, _rep_seed(seed, rep, 0))
                for idx in range(len(cfg.studies))
            ]
        )
        holdout = generate_trial(cfg, len(cfg.studies), _rep_seed(seed, rep, 0))
        training = apply_composite_nonresponse(training)
        holdout = apply_composite_nonresponse(holdout)

        try:
            expr = naive_cutpoint_search(training, search.candidates, search.grid)
        except SearchError as exc:
            results.append(ReplicationResult(replication=rep, skipped=True, skip_reason=str(exc)))
            continue
        text = format_expr(expr)

        try:
            m_train = membership(expr, training)
            design = build_design_matrix(training, m_train, spec)
            fm, _ = fit_firth_logistic(design.x, design.y, fit_cfg, design.column_names)
            delta_pred = standardized_risk_difference(fm, design, TARGET_SUBGROUP)
            sigma_pred = bootstrap_sd(
                training, expr, spec, cfg.bootstrap_b, _rep_seed(seed, rep, 1), fit_cfg
            )
            submission = Submission(
                team_id="baseline",
                expression_text=text,
                delta_pred=delta_pred,
                sigma_pred=sigma_pred,
            )
            report = check_validity(submission, holdout)
            if not report.valid:
                results.append(
                    ReplicationResult(
                        replication=rep, skipped=True,
                        skip_reason="holdout validity: " + "; ".join(report.reasons),
                        expression=text,
                    )
                )
                continue
            m_hold = membership(expr, holdout)
            s1, fm_hold = score_s1(holdout, m_hold, spec, fit_cfg)
            design_hold = build_design_matrix(holdout, m_hold, spec)
            delta_hat = standardized_risk_difference(fm_hold, design_hold, TARGET_SUBGROUP)
            s2 = score_s2(delta_pred, sigma_pred, delta_hat)
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            results.append(
                ReplicationResult(
                    replication=rep, skipped=True,
                    skip_reason=f"scoring failed: {exc}", expression=text,
                )
            )
            continue

        low = delta_pred - 1.96 * sigma_pred
        high = delta_pred + 1.96 * sigma_pred
        results.append(
            ReplicationResult(
                replication=rep,
                skipped=False,
                expression=text,
                train_subgroup_n=m_train.size,
                holdout_subgroup_n=m_hold.size,
                delta_pred=delta_pred,
                sigma_pred=sigma_pred,
                delta_hat=delta_hat,
                s1=s1,
                s2=s2,
                covered=low <= delta_hat <= high,
            )
        )

    scored = [r for r in results if not r.skipped]
    if not scored:
        raise RuntimeError("every replication was skipped; nothing to aggregate")
    errors = np.array([r.delta_pred - r.delta_hat for r in scored])
    sizes = np.array([r.holdout_subgroup_n for r in scored], dtype=float)
    positive = [
        (r.delta_pred - r.delta_hat) / r.delta_hat for r in scored if r.delta_hat > 0
    ]
    rho = analysis.spearman(sizes, np.abs(errors)) if len(scored) >= 3 else None
    p_value = _spearman_p_value(rho, len(scored)) if rho is not None else None
    aggregates = SimulationAggregates(
        n_scored=len(scored),
        n_skipped=len(results) - len(scored),
        mean_overestimation=float(errors.mean()),
        mean_pct_overestimation=float(np.mean(positive)) if positive else None,
        coverage=float(np.mean([r.covered for r in scored])),
        mean_s1=float(np.mean([r.s1 for r in scored])),
        spearman_size_abs_error=rho,
        spearman_p_value=p_value,
    )
    return SimulationReport(seed=seed, replications=tuple(results), aggregates=aggregates)


def _spearman_p_value(rho: float, n: int) -> float:
    """Two-sided p-value for a rank correlation via the t approximation."""
    if n < 3:
        return math.nan
    if abs(rho) >= 1.0:
        return 0.0
    stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * student_t.sf(abs(stat), df=n - 2))


def _config_from_dict(doc: dict) -> GeneratorConfig:
    try:
        studies = tuple(
            StudyPlan(label=s["label"], n_control=int(s["n_control"]), n_treatment=int(s["n_treatment"]))
            for s in doc["studies"]
        )
        holdout = StudyPlan(
            label=doc["holdout"]["label"],
            n_control=int(doc["holdout"]["n_control"]),
            n_treatment=int(doc["holdout"]["n_treatment"]),
        )
        covariates = tuple(
            CovariateGenerator(
                name=c["name"],
                kind=c.get("kind", NUMERIC),
                distribution=c["distribution"],
                params={k: float(v) for k, v in c["params"].items()},
                missing_rate=float(c.get("missing_rate", 0.0)),
            )
            for c in doc["covariates"]
        )
        outcome = OutcomeModel(
            intercept=float(doc["outcome"]["intercept"]),
            treatment=float(doc["outcome"]["treatment"]),
            covariate_effects={
                k: float(v) for k, v in doc["outcome"].get("covariate_effects", {}).items()
            },
            modifier_effect=float(doc["outcome"].get("modifier_effect", 0.0)),
            modifier_subgroup=doc["outcome"].get("modifier_subgroup"),
        )
        search = None
        if "search" in doc:
            search = SearchPlan(
                candidates=tuple(doc["search"]["candidates"]),
                grid=int(doc["search"].get("grid", 9)),
            )
        return GeneratorConfig(
            studies=studies,
            holdout=holdout,
            covariates=covariates,
            outcome=outcome,
            discontinuation_rate=float(doc.get("discontinuation_rate", 0.0)),
            adjustment_covariates=tuple(doc.get("adjustment_covariates", ())),
            search=search,
            bootstrap_b=int(doc.get("bootstrap_b", 100)),
            seed=int(doc.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed generator config: {exc}") from exc


def load_generator_config(path: str | Path) -> GeneratorConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _config_from_dict(doc)
    validate_generator_config(cfg)
    return cfg


def bundled_config(name: str) -> GeneratorConfig:
    """One of the shipped configs: 'null' (no modifier) or 'modifier'."""
    resource = resources.files("subchal.configs").joinpath(f"{name}_simulation.json")
    try:
        doc = json.loads(resource.read_text(encoding="utf-8"))
    except (FileNotFoundError, OSError) as exc:
        raise ConfigError(f"no bundled config named {name!r}") from exc
    cfg = _config_from_dict(doc)
    validate_generator_config(cfg)
    return cfg


def write_simulation_report(report: SimulationReport, out_dir: str | Path) -> list[Path]:
    """Emit replications.csv plus simulation.json; reruns are byte-identical."""
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "replications.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "replication", "skipped", "skip_reason", "expression",
                "train_subgroup_n", "holdout_subgroup_n",
                "delta_pred", "sigma_pred", "delta_hat", "s1", "s2", "covered",
            ]
        )
        for r in report.replications:
            writer.writerow(
                [
                    str(r.replication),
                    "true" if r.skipped else "false",
                    r.skip_reason,
                    r.expression,
                    str(r.train_subgroup_n),
                    str(r.holdout_subgroup_n),
                    "" if math.isnan(r.delta_pred) else "%.6g" % r.delta_pred,
                    "" if math.isnan(r.sigma_pred) else "%.6g" % r.sigma_pred,
                    "" if math.isnan(r.delta_hat) else "%.6g" % r.delta_hat,
                    "" if math.isnan(r.s1) else "%.6g" % r.s1,
                    "" if math.isnan(r.s2) else "%.6g" % r.s2,
                    "true" if r.covered else "false",
                ]
            )
    json_path = out / "simulation.json"
    doc = {
        "seed": report.seed,
        "aggregates": {
            "n_scored": report.aggregates.n_scored,
            "n_skipped": report.aggregates.n_skipped,
            "mean_overestimation": report.aggregates.mean_overestimation,
            "mean_pct_overestimation": report.aggregates.mean_pct_overestimation,
            "coverage": report.aggregates.coverage,
            "mean_s1": report.aggregates.mean_s1,
            "spearman_size_abs_error": report.aggregates.spearman_size_abs_error,
            "spearman_p_value": report.aggregates.spearman_p_value,
        },
        "replications": [
            {
                "replication": r.replication,
                "skipped": r.skipped,
                "skip_reason": r.skip_reason,
                "expression": r.expression,
                "train_subgroup_n": r.train_subgroup_n,
                "holdout_subgroup_n": r.holdout_subgroup_n,
                "delta_pred": None if math.isnan(r.delta_pred) else r.delta_pred,
                "sigma_pred": None if math.isnan(r.sigma_pred) else r.sigma_pred,
                "delta_hat": None if math.isnan(r.delta_hat) else r.delta_hat,
                "s1": None if math.isnan(r.s1) else r.s1,
                "s2": None if math.isnan(r.s2) else r.s2,
                "covered": r.covered,
            }
            for r in report.replications
        ],
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]
