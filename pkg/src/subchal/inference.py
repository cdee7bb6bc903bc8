"""Penalized logistic interaction model and standardized risk differences.

The outcome model is a logistic regression of the binary response on
treatment, subgroup membership, their interaction and a short list of
adjustment covariates. It is fitted by penalized maximum likelihood with
the Jeffreys-prior penalty (Firth's bias reduction), which keeps
estimates finite under complete separation. Treatment effects on the
risk-difference scale come from standardization: averaging per-subject
differences of predicted response probabilities with treatment toggled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .subgroup_expr import MembershipVector, SubgroupExpr, membership
from .trial_data import BOOLEAN, CATEGORICAL, NUMERIC, TrialDataset

TARGET_SUBGROUP = "subgroup"
TARGET_COMPLEMENT = "complement"
TARGET_OVERALL = "overall"

INTERACTION_COLUMN = "treatment:subgroup"


class SingularModelError(ValueError):
    """The design matrix is rank deficient."""

    def __init__(self, columns: tuple[str, ...]):
        super().__init__(f"singular model: column(s) {', '.join(columns)} are linearly dependent")
        self.columns = columns


class DesignError(ValueError):
    """The design matrix cannot be built as requested."""


@dataclass(frozen=True)
class ModelSpec:
    """Adjustment covariates (by name) and whether the interaction enters."""

    adjustment_covariates: tuple[str, ...] = ("WEIGHT", "NAVTNF")
    include_interaction: bool = True


@dataclass(frozen=True)
class FitConfig:
    tol: float = 1e-8  # on the max absolute modified-score component
    max_iter: int = 50
    max_halvings: int = 10


class DesignMatrix(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...]


@dataclass(frozen=True)
class FittedModel:
    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    penalized_loglik: float
    column_names: tuple[str, ...]


@dataclass(frozen=True)
class FitDiagnostics:
    hat_values: np.ndarray
    score_norm_at_exit: float
    step_halvings: int


def _numeric_column(ds: TrialDataset, name: str) -> np.ndarray:
    spec = ds.schema.get(name)
    values = np.full(ds.n_subjects, np.nan)
    for i, s in enumerate(ds.subjects):
        v = s.covariates[name]
        if v is None:
            continue
        if spec.kind == BOOLEAN:
            values[i] = 1.0 if v else 0.0
        else:
            values[i] = float(v)
    return values


def _impute_mean(values: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    observed = values[~np.isnan(values)]
    if observed.size == 0:
        raise DesignError(f"adjustment covariate {name!r} has no observed values")
    mean = float(observed.mean())
    return np.where(np.isnan(values), mean, values), mean


def build_design_matrix(
    ds: TrialDataset,
    m: MembershipVector | None,
    spec: ModelSpec,
) -> DesignMatrix:
    """Fixed-order design: intercept, treatment, subgroup, interaction, adjusters.

    Numeric adjustment covariates are mean-centered, binaries enter as 0/1
    and categoricals are one-hot encoded against their first level.
    Missing adjustment values are imputed to the column mean so every
    subject stays in the scored population. Requires a complete outcome
    vector (apply the composite non-response rule first).

    Pass ``m=None`` to omit the subgroup terms (intercept plus treatment
    model), e.g. for overall-effect estimation.
    """
    n = ds.n_subjects
    if any(s.outcome is None for s in ds.subjects):
        raise DesignError("dataset has missing outcomes; apply the composite rule first")
    y = np.array([s.outcome for s in ds.subjects], dtype=float)
    t = np.array([s.arm for s in ds.subjects], dtype=float)

    columns = [np.ones(n), t]
    names = ["intercept", "treatment"]
    if m is not None:
        if len(m.flags) != n:
            raise DesignError("membership vector does not match the dataset")
        s_col = np.array(m.flags, dtype=float)
        if s_col.min() == s_col.max():
            warnings.warn(
                "subgroup membership is constant; the model is rank deficient",
                RuntimeWarning,
                stacklevel=2,
            )
        columns.append(s_col)
        names.append("subgroup")
        if spec.include_interaction:
            columns.append(t * s_col)
            names.append(INTERACTION_COLUMN)

    for cov_name in spec.adjustment_covariates:
        if cov_name not in ds.schema:
            raise DesignError(f"adjustment covariate {cov_name!r} is not in the schema")
        cov_spec = ds.schema.get(cov_name)
        if cov_spec.kind == CATEGORICAL:
            levels = cov_spec.levels or ()
            for level in levels[1:]:
                raw = np.full(n, np.nan)
                for i, subj in enumerate(ds.subjects):
                    v = subj.covariates[cov_name]
                    if v is not None:
                        raw[i] = 1.0 if v == level else 0.0
                filled, _ = _impute_mean(raw, cov_name)
                columns.append(filled)
                names.append(f"{cov_name}[{level}]")
            continue
        raw = _numeric_column(ds, cov_name)
        filled, mean = _impute_mean(raw, cov_name)
        if cov_spec.kind == NUMERIC:
            filled = filled - mean
        columns.append(filled)
        names.append(cov_name)

    x = np.column_stack(columns)
    return DesignMatrix(x=x, y=y, column_names=tuple(names))


def _check_rank(x: np.ndarray, names: tuple[str, ...]) -> None:
    r = np.linalg.qr(x, mode="r")
    diag = np.abs(np.diag(r))
    tol = max(x.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    bad = [names[j] for j in range(len(diag)) if diag[j] <= tol]
    if bad:
        raise SingularModelError(tuple(bad))


def _penalized_loglik(x: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    eta = x @ beta
    ll = float(np.sum(y * -np.logaddexp(0.0, -eta) + (1.0 - y) * -np.logaddexp(0.0, eta)))
    p = expit(eta)
    w = p * (1.0 - p)
    info = (x * w[:, None]).T @ x
    sign, logdet = np.linalg.slogdet(info)
    if sign <= 0:
        return -np.inf
    return ll + 0.5 * logdet


def _hat_diagonal(x: np.ndarray, w: np.ndarray, info: np.ndarray) -> np.ndarray:
    # h_i = w_i x_i' I^{-1} x_i
    v = np.linalg.solve(info, (x * w[:, None]).T)
    return np.einsum("ij,ji->i", x, v)


def _newton_firth(
    x: np.ndarray,
    y: np.ndarray,
    cfg: FitConfig,
) -> tuple[np.ndarray, bool, int, int, float, list[float]]:
    """Newton iteration on the modified score; returns the loglik trace too."""
    beta = np.zeros(x.shape[1])
    converged = False
    total_halvings = 0
    score_norm = np.inf
    trace = [_penalized_loglik(x, y, beta)]
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        p = expit(x @ beta)
        w = p * (1.0 - p)
        info = (x * w[:, None]).T @ x
        h = _hat_diagonal(x, w, info)
        score = x.T @ (y - p + h * (0.5 - p))
        score_norm = float(np.max(np.abs(score)))
        if score_norm < cfg.tol:
            converged = True
            break
        # The modified score equals X'[(y + h/2) - (1+h)p], so the
        # augmented information X'W(1+h)X is its dominant Jacobian and
        # gives fast steps even when a cell is nearly empty.
        info_aug = (x * (w * (1.0 + h))[:, None]).T @ x
        try:
            step = np.linalg.solve(info_aug, score)
        except np.linalg.LinAlgError as exc:
            raise SingularModelError(("<unknown>",)) from exc
        current = trace[-1]
        # near the optimum the per-step loglik change is below float
        # resolution; treat ties within a few ulps as non-decreasing
        slack = 1e-11 * (1.0 + abs(current))
        trial = beta + step
        halvings = 0
        trial_ll = _penalized_loglik(x, y, trial)
        while trial_ll < current - slack and halvings < cfg.max_halvings:
            step = step / 2.0
            trial = beta + step
            trial_ll = _penalized_loglik(x, y, trial)
            halvings += 1
        total_halvings += halvings
        if trial_ll < current - slack:
            break  # no improving step found; report non-convergence
        beta = trial
        trace.append(trial_ll)
    return beta, converged, iterations, total_halvings, score_norm, trace


def fit_firth_logistic(
    x: np.ndarray,
    y: np.ndarray,
    cfg: FitConfig = FitConfig(),
    column_names: tuple[str, ...] | None = None,
) -> tuple[FittedModel, FitDiagnostics]:
    """Maximize the Jeffreys-penalized logistic log-likelihood.

    Newton iteration on the modified score
    ``U*_r = sum_i (y_i - p_i + h_i (1/2 - p_i)) x_ir`` with step-halving
    whenever the penalized log-likelihood would decrease; the start value
    is 0. The covariance is the inverse Fisher information at the
    penalized estimate. ``converged`` is true when the largest absolute
    modified-score component drops below ``cfg.tol``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be 2-d with one row per outcome")
    names = column_names or tuple(f"x{j}" for j in range(x.shape[1]))
    if len(names) != x.shape[1]:
        raise ValueError("column_names does not match the design matrix")
    _check_rank(x, names)

    beta, converged, iterations, halvings, score_norm, trace = _newton_firth(x, y, cfg)

    p = expit(x @ beta)
    w = p * (1.0 - p)
    info = (x * w[:, None]).T @ x
    covariance = np.linalg.inv(info)
    covariance = (covariance + covariance.T) / 2.0
    hat = _hat_diagonal(x, w, info)
    model = FittedModel(
        coefficients=beta,
        covariance=covariance,
        converged=converged,
        iterations=iterations,
        penalized_loglik=trace[-1],
        column_names=names,
    )
    diagnostics = FitDiagnostics(
        hat_values=hat,
        score_norm_at_exit=score_norm,
        step_halvings=halvings,
    )
    return model, diagnostics


def interaction_statistic(fm: FittedModel) -> tuple[float, float]:
    """Interaction coefficient and its Wald standard error."""
    if INTERACTION_COLUMN not in fm.column_names:
        raise ValueError("model was fitted without an interaction term")
    j = fm.column_names.index(INTERACTION_COLUMN)
    return float(fm.coefficients[j]), float(np.sqrt(fm.covariance[j, j]))


def standardized_risk_difference(
    fm: FittedModel,
    design: DesignMatrix,
    target: str = TARGET_SUBGROUP,
) -> float:
    """Marginal risk difference by averaging counterfactual predictions.

    For every subject in the target population the treatment indicator is
    toggled while subgroup membership and covariates keep their observed
    values; the result is the mean predicted-probability difference.
    """
    if target not in (TARGET_SUBGROUP, TARGET_COMPLEMENT, TARGET_OVERALL):
        raise ValueError(f"unknown target {target!r}")
    names = design.column_names
    t_idx = names.index("treatment")
    x1 = design.x.copy()
    x0 = design.x.copy()
    x1[:, t_idx] = 1.0
    x0[:, t_idx] = 0.0
    if "subgroup" in names:
        s = design.x[:, names.index("subgroup")]
        if INTERACTION_COLUMN in names:
            ts_idx = names.index(INTERACTION_COLUMN)
            x1[:, ts_idx] = s
            x0[:, ts_idx] = 0.0
    else:
        s = None
    diff = expit(x1 @ fm.coefficients) - expit(x0 @ fm.coefficients)
    if target == TARGET_OVERALL:
        mask = np.ones(len(diff), dtype=bool)
    else:
        if s is None:
            raise ValueError("design has no subgroup column for this target")
        mask = s == 1.0 if target == TARGET_SUBGROUP else s == 0.0
    if not mask.any():
        raise ValueError(f"empty target population {target!r}")
    return float(diff[mask].mean())


def bootstrap_sd(
    ds: TrialDataset,
    expr: SubgroupExpr,
    spec: ModelSpec,
    b_resamples: int,
    seed: int,
    cfg: FitConfig = FitConfig(),
) -> float:
    """Stratified bootstrap standard deviation of the subgroup risk difference.

    Resamples subjects with replacement within each study-by-arm stratum,
    refits the model on every resample and returns the sample standard
    deviation of the subgroup risk differences. Per-resample generators
    derive from (seed, resample index), so the result is deterministic.
    A resample whose refit degenerates (for example an empty subgroup-arm
    cell) is redrawn up to 100 times before giving up.

    If the subgroup covers the whole dataset, the subgroup terms are
    unidentifiable and unnecessary; the model is then fitted without them
    and the overall risk difference (identical by construction) is used.
    """
    if b_resamples < 2:
        raise ValueError("b_resamples must be at least 2")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    m = membership(expr, ds)
    everyone = all(m.flags)
    design = build_design_matrix(ds, None if everyone else m, spec)
    target = TARGET_OVERALL if everyone else TARGET_SUBGROUP

    strata_keys = sorted({(s.study_id, s.arm) for s in ds.subjects})
    strata = [
        np.array([i for i, s in enumerate(ds.subjects) if (s.study_id, s.arm) == key])
        for key in strata_keys
    ]

    deltas = np.empty(b_resamples)
    for b in range(b_resamples):
        for attempt in range(100):
            rng = np.random.default_rng([seed, b, attempt])
            idx = np.concatenate(
                [stratum[rng.integers(0, len(stratum), len(stratum))] for stratum in strata]
            )
            boot = DesignMatrix(
                x=design.x[idx], y=design.y[idx], column_names=design.column_names
            )
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fm, _ = fit_firth_logistic(boot.x, boot.y, cfg, boot.column_names)
                deltas[b] = standardized_risk_difference(fm, boot, target)
                break
            except (SingularModelError, ValueError, np.linalg.LinAlgError):
                continue
        else:
            raise RuntimeError(f"bootstrap resample {b} failed after 100 redraws")
    return float(np.std(deltas, ddof=1))
