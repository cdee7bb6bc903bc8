"""Submission validation and team scoring.

Each team submits a subgroup expression plus a predicted risk difference
``delta_pred`` with its uncertainty ``sigma_pred``. A submission is valid
when subgroup and complement both have at least 10 subjects on each arm
of the holdout trial. Valid teams are scored by the interaction
z-statistic (S1) and a Gaussian log-score of their prediction against
the observed subgroup risk difference (S2); both are standardized across
teams with median/MAD and averaged into the final score Z.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import subgroup_expr as sx
from .inference import (
    DesignMatrix,
    FitConfig,
    ModelSpec,
    SingularModelError,
    TARGET_OVERALL,
    TARGET_SUBGROUP,
    build_design_matrix,
    fit_firth_logistic,
    interaction_statistic,
    standardized_risk_difference,
)
from .subgroup_expr import MembershipVector, membership
from .trial_data import TrialDataset, apply_composite_nonresponse

MIN_CELL = 10
MAX_EXPRESSION_CHARS = 100

MAD_SCALE = 1.4826  # Gaussian-consistent scaling of the MAD


class ScoringError(RuntimeError):
    """The round cannot be scored as requested."""


@dataclass(frozen=True)
class Submission:
    team_id: str
    expression_text: str
    delta_pred: float
    sigma_pred: float
    methods_text: str = ""


@dataclass(frozen=True)
class CellCounts:
    subgroup_treated: int
    subgroup_control: int
    complement_treated: int
    complement_control: int

    def as_dict(self) -> dict[str, int]:
        return {
            "subgroup_treated": self.subgroup_treated,
            "subgroup_control": self.subgroup_control,
            "complement_treated": self.complement_treated,
            "complement_control": self.complement_control,
        }


@dataclass(frozen=True)
class ValidityReport:
    team_id: str
    counts: CellCounts | None
    valid: bool
    reasons: tuple[str, ...]


@dataclass(frozen=True)
class TeamScore:
    team_id: str
    valid: bool
    reasons: tuple[str, ...] = ()
    counts: CellCounts | None = None
    subgroup_size: int | None = None
    s1: float | None = None
    s2: float | None = None
    delta_hat: float | None = None
    z1: float | None = None
    z2: float | None = None
    z: float | None = None
    rank: int | None = None
    s_alt: tuple[tuple[float, float], ...] = ()
    rank_average: int | None = None


@dataclass(frozen=True)
class ScoreBoard:
    teams: tuple[TeamScore, ...]
    k: int
    alpha_list: tuple[float, ...] = ()


@dataclass(frozen=True)
class AltScoreConfig:
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def load_submission(path: str | Path) -> Submission:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScoringError(f"cannot read submission {path}: {exc}") from exc
    for key in ("team_id", "subgroup", "delta_pred", "sigma_pred"):
        if key not in doc:
            raise ScoringError(f"submission {path} is missing {key!r}")
    try:
        return Submission(
            team_id=str(doc["team_id"]),
            expression_text=str(doc["subgroup"]),
            delta_pred=float(doc["delta_pred"]),
            sigma_pred=float(doc["sigma_pred"]),
            methods_text=str(doc.get("methods", "")),
        )
    except (TypeError, ValueError) as exc:
        raise ScoringError(f"submission {path} has a malformed field: {exc}") from exc


def load_submissions_dir(directory: str | Path) -> list[Submission]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise ScoringError(f"no submission files found in {directory}")
    return [load_submission(p) for p in paths]


def check_validity(sub: Submission, holdout: TrialDataset) -> ValidityReport:
    """Size rule on the holdout: at least 10 per arm in subgroup and complement.

    Needs only arms and covariates, never the outcome, so it supports the
    pre-final feedback workflow of reporting subgroup sizes alone.
    """
    reasons: list[str] = []
    if len(sub.expression_text) > MAX_EXPRESSION_CHARS:
        reasons.append(
            f"expression has {len(sub.expression_text)} characters "
            f"(limit {MAX_EXPRESSION_CHARS})"
        )
    try:
        expr = sx.parse(sub.expression_text)
    except sx.ParseError as exc:
        reasons.append(f"expression does not parse: {exc}")
        return ValidityReport(sub.team_id, None, False, tuple(reasons))
    unknown = sx.variables_used(expr) - set(holdout.schema.names)
    if unknown:
        reasons.append(f"unknown covariate(s): {', '.join(sorted(unknown))}")
    if reasons:
        return ValidityReport(sub.team_id, None, False, tuple(reasons))

    try:
        m = membership(expr, holdout)
    except sx.EvalError as exc:
        return ValidityReport(sub.team_id, None, False, (f"expression cannot be evaluated: {exc}",))
    arms = [s.arm for s in holdout.subjects]
    counts = CellCounts(
        subgroup_treated=sum(1 for f, a in zip(m.flags, arms) if f and a == 1),
        subgroup_control=sum(1 for f, a in zip(m.flags, arms) if f and a == 0),
        complement_treated=sum(1 for f, a in zip(m.flags, arms) if not f and a == 1),
        complement_control=sum(1 for f, a in zip(m.flags, arms) if not f and a == 0),
    )
    for cell, count in counts.as_dict().items():
        if count < MIN_CELL:
            reasons.append(f"{cell.replace('_', '/')} cell has {count} subjects (minimum {MIN_CELL})")
    return ValidityReport(sub.team_id, counts, not reasons, tuple(reasons))


def score_s1(
    holdout: TrialDataset,
    m: MembershipVector,
    spec: ModelSpec,
    cfg: FitConfig = FitConfig(),
):
    """Interaction z-statistic from the penalized logistic fit on the holdout."""
    design = build_design_matrix(holdout, m, spec)
    fm, _ = fit_firth_logistic(design.x, design.y, cfg, design.column_names)
    beta, se = interaction_statistic(fm)
    return beta / se, fm


def score_s2(delta_pred: float, sigma_pred: float, delta_hat: float) -> float:
    """Gaussian log-density of the observed effect under the team's prediction."""
    if sigma_pred <= 0:
        raise ValueError("sigma_pred must be strictly positive")
    residual = (delta_hat - delta_pred) / sigma_pred
    return -0.5 * math.log(2.0 * math.pi) - math.log(sigma_pred) - 0.5 * residual * residual


def robust_standardize(scores) -> np.ndarray:
    """Center by the median and scale by 1.4826 times the MAD.

    A degenerate MAD of zero falls back to 1.4826 times the mean absolute
    deviation about the median; if that is zero too, all scores map to 0.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("robust standardization needs at least 2 scores")
    med = float(np.median(s))
    abs_dev = np.abs(s - med)
    scale = MAD_SCALE * float(np.median(abs_dev))
    if scale == 0.0:
        scale = MAD_SCALE * float(np.mean(abs_dev))
    if scale == 0.0:
        return np.zeros_like(s)
    return (s - med) / scale


def final_scores(z1, z2) -> np.ndarray:
    """Average the two standardized score vectors elementwise."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != z2.shape:
        raise ValueError("score vectors have different lengths")
    return (z1 + z2) / 2.0


def _sort_key(score: TeamScore):
    s1 = score.s1 if score.s1 is not None else -math.inf
    return (-(score.z if score.z is not None else -math.inf), -s1, score.team_id)


def rank_teams(scores, alpha_list: tuple[float, ...] = ()) -> ScoreBoard:
    """Rank valid teams by Z descending; ties by higher S1, then team id.

    Invalid teams are listed unranked after the ranked teams.
    """
    valid = sorted((t for t in scores if t.valid), key=_sort_key)
    invalid = sorted((t for t in scores if not t.valid), key=lambda t: t.team_id)
    ranked = tuple(replace(t, rank=i + 1) for i, t in enumerate(valid))
    return ScoreBoard(
        teams=ranked + tuple(invalid),
        k=len(ranked),
        alpha_list=tuple(alpha_list),
    )


def score_alt_from_fit(fm, design: DesignMatrix, holdout_size: int, alpha: float) -> float:
    subgroup_n = int(np.sum(design.x[:, design.column_names.index("subgroup")]))
    f_sub = subgroup_n / holdout_size
    delta_sub = standardized_risk_difference(fm, design, TARGET_SUBGROUP)
    delta_overall = standardized_risk_difference(fm, design, TARGET_OVERALL)
    return (f_sub**alpha) * (delta_sub - delta_overall)


def score_alt(
    holdout: TrialDataset,
    m: MembershipVector,
    spec: ModelSpec,
    cfg: AltScoreConfig = AltScoreConfig(),
) -> float:
    """Risk-difference score: f_sub^alpha times (subgroup minus overall effect).

    The subgroup-fraction factor damps the reward for very small subgroups.
    Both effects come from the same interaction-model fit.
    """
    design = build_design_matrix(holdout, m, spec)
    fm, _ = fit_firth_logistic(design.x, design.y, column_names=design.column_names)
    return score_alt_from_fit(fm, design, holdout.n_subjects, cfg.alpha)


def _average_ranks_descending(values: np.ndarray) -> np.ndarray:
    """Rank 1 for the largest value; tied values share the average rank."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(-v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    position = 0
    while position < len(v):
        end = position
        while end + 1 < len(v) and v[order[end + 1]] == v[order[position]]:
            end += 1
        mean_rank = (position + end) / 2.0 + 1.0
        ranks[order[position : end + 1]] = mean_rank
        position = end + 1
    return ranks


def rank_average(s1, s2, team_ids=None) -> np.ndarray:
    """Alternative ranking: average the per-score ranks, then re-rank.

    Ties in the averaged rank break like the main ranking (higher s1,
    then team id; input order stands in for missing ids).
    """
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if s1.shape != s2.shape:
        raise ValueError("score vectors have different lengths")
    ids = list(team_ids) if team_ids is not None else [str(i) for i in range(len(s1))]
    if len(ids) != len(s1):
        raise ValueError("team_ids does not match the score vectors")
    avg = (_average_ranks_descending(s1) + _average_ranks_descending(s2)) / 2.0
    order = sorted(range(len(s1)), key=lambda i: (avg[i], -s1[i], ids[i]))
    final = np.empty(len(s1), dtype=int)
    for rank, i in enumerate(order, start=1):
        final[i] = rank
    return final


def _score_one_team(
    sub: Submission,
    holdout: TrialDataset,
    spec: ModelSpec,
    alphas: tuple[float, ...],
    cfg: FitConfig,
) -> TeamScore:
    report = check_validity(sub, holdout)
    reasons = list(report.reasons)
    if sub.sigma_pred <= 0:
        reasons.append("sigma_pred must be strictly positive")
    if not -1.0 <= sub.delta_pred <= 1.0:
        reasons.append("delta_pred must lie in [-1, 1]")
    size = None
    if report.counts is not None:
        size = report.counts.subgroup_treated + report.counts.subgroup_control
    if reasons:
        return TeamScore(
            team_id=sub.team_id,
            valid=False,
            reasons=tuple(reasons),
            counts=report.counts,
            subgroup_size=size,
        )
    m = membership(sx.parse(sub.expression_text), holdout)
    try:
        design = build_design_matrix(holdout, m, spec)
        fm, _ = fit_firth_logistic(design.x, design.y, cfg, design.column_names)
        beta, se = interaction_statistic(fm)
        s1 = beta / se
        delta_hat = standardized_risk_difference(fm, design, TARGET_SUBGROUP)
        s2 = score_s2(sub.delta_pred, sub.sigma_pred, delta_hat)
        s_alt = tuple(
            (alpha, score_alt_from_fit(fm, design, holdout.n_subjects, alpha))
            for alpha in alphas
        )
    except (SingularModelError, ValueError, np.linalg.LinAlgError) as exc:
        return TeamScore(
            team_id=sub.team_id,
            valid=False,
            reasons=(f"model fit failed: {exc}",),
            counts=report.counts,
            subgroup_size=size,
        )
    return TeamScore(
        team_id=sub.team_id,
        valid=True,
        counts=report.counts,
        subgroup_size=size,
        s1=s1,
        s2=s2,
        delta_hat=delta_hat,
        s_alt=s_alt,
    )


def score_round(
    holdout: TrialDataset,
    submissions,
    spec: ModelSpec,
    alphas: tuple[float, ...] = (0.0, 0.5, 1.0),
    cfg: FitConfig = FitConfig(),
    workers: int = 1,
) -> ScoreBoard:
    """Score a full round end to end and return the ranked board.

    Per-team failures mark the team invalid with a reason; they never
    abort the round. Standardization needs at least two valid teams.
    """
    ds = apply_composite_nonresponse(holdout)
    subs = list(submissions)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            drafts = list(pool.map(lambda s: _score_one_team(s, ds, spec, alphas, cfg), subs))
    else:
        drafts = [_score_one_team(s, ds, spec, alphas, cfg) for s in subs]

    valid = [t for t in drafts if t.valid]
    if len(valid) < 2:
        raise ScoringError(
            f"only {len(valid)} valid team(s); robust standardization needs at least 2"
        )
    z1 = robust_standardize([t.s1 for t in valid])
    z2 = robust_standardize([t.s2 for t in valid])
    z = final_scores(z1, z2)
    alt_ranks = rank_average([t.s1 for t in valid], [t.s2 for t in valid], [t.team_id for t in valid])
    scored = {
        t.team_id: replace(t, z1=float(a), z2=float(b), z=float(c), rank_average=int(r))
        for t, a, b, c, r in zip(valid, z1, z2, z, alt_ranks)
    }
    drafts = [scored.get(t.team_id, t) for t in drafts]
    return rank_teams(drafts, alpha_list=alphas)


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return "%.6g" % value


def scoreboard_header(alpha_list: tuple[float, ...]) -> list[str]:
    header = ["team_id", "N", "S1", "S2", "Z1", "Z2", "Z", "rank", "valid", "reasons"]
    header.extend("S_alt_a%g" % a for a in alpha_list)
    header.append("rank_avg")
    return header


def write_scoreboard_csv(board: ScoreBoard, path: str | Path) -> None:
    """Fixed column order, 6 significant digits, ranked teams first."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(scoreboard_header(board.alpha_list))
        for t in board.teams:
            alt = dict(t.s_alt)
            row = [
                t.team_id,
                "" if t.subgroup_size is None else str(t.subgroup_size),
                _fmt(t.s1),
                _fmt(t.s2),
                _fmt(t.z1),
                _fmt(t.z2),
                _fmt(t.z),
                "" if t.rank is None else str(t.rank),
                "true" if t.valid else "false",
                "; ".join(t.reasons),
            ]
            row.extend(_fmt(alt.get(a)) for a in board.alpha_list)
            row.append("" if t.rank_average is None else str(t.rank_average))
            writer.writerow(row)


def board_to_dict(board: ScoreBoard) -> dict:
    return {
        "k": board.k,
        "alpha_list": list(board.alpha_list),
        "teams": [
            {
                "team_id": t.team_id,
                "valid": t.valid,
                "reasons": list(t.reasons),
                "counts": t.counts.as_dict() if t.counts is not None else None,
                "subgroup_size": t.subgroup_size,
                "s1": t.s1,
                "s2": t.s2,
                "delta_hat": t.delta_hat,
                "z1": t.z1,
                "z2": t.z2,
                "z": t.z,
                "rank": t.rank,
                "s_alt": {"%g" % a: v for a, v in t.s_alt},
                "rank_average": t.rank_average,
            }
            for t in board.teams
        ],
    }


def board_from_dict(doc: dict) -> ScoreBoard:
    teams = []
    for entry in doc["teams"]:
        counts = entry.get("counts")
        teams.append(
            TeamScore(
                team_id=entry["team_id"],
                valid=entry["valid"],
                reasons=tuple(entry.get("reasons", ())),
                counts=CellCounts(**counts) if counts else None,
                subgroup_size=entry.get("subgroup_size"),
                s1=entry.get("s1"),
                s2=entry.get("s2"),
                delta_hat=entry.get("delta_hat"),
                z1=entry.get("z1"),
                z2=entry.get("z2"),
                z=entry.get("z"),
                rank=entry.get("rank"),
                s_alt=tuple(sorted((float(a), v) for a, v in entry.get("s_alt", {}).items())),
                rank_average=entry.get("rank_average"),
            )
        )
    return ScoreBoard(
        teams=tuple(teams),
        k=doc["k"],
        alpha_list=tuple(doc.get("alpha_list", ())),
    )
