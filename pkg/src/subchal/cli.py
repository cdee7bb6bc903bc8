"""Command-line entry point for organizer workflows.

Exit codes: 0 success, 1 input error, 2 validity failures (validate only).
The environment variable SUBCHAL_THREADS caps per-team parallelism while
scoring; every command is deterministic given its inputs and seed.
"""

from __future__ import annotations

import csv
import json
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from . import analysis as analysis_mod
from . import simulate as sim_mod
from .inference import ModelSpec
from .scoring import (
    ScoringError,
    TeamScore,
    board_to_dict,
    check_validity,
    final_scores,
    load_submissions_dir,
    rank_average,
    rank_teams,
    robust_standardize,
    score_round,
    write_scoreboard_csv,
)
from .subgroup_expr import parse, membership
from .trial_data import DataFormatError, TrialDataset, load_dataset


@dataclass(frozen=True)
class ChallengeRound:
    holdout: str
    schema: str
    submissions: str
    out: str
    model_config: str | None = None
    alpha_list: tuple[float, ...] = (0.0, 0.5, 1.0)
    svg: bool = False
    rerank_only: str | None = None


def _workers() -> int:
    raw = os.environ.get("SUBCHAL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _fail(message: str) -> int:
    click.echo(f"error: {message}", err=True)
    return 1


def _safe_name(team_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]", "_", team_id)


def _load_model_spec(path: str | None, holdout: TrialDataset) -> ModelSpec:
    if path is None:
        spec = ModelSpec()
        missing = [c for c in spec.adjustment_covariates if c not in holdout.schema]
        if missing:
            raise DataFormatError(
                f"default adjustment covariates {missing} are not in the schema; "
                "pass --model-config (use an empty adjustment_covariates list to adjust for nothing)"
            )
        return spec
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ModelSpec(
        adjustment_covariates=tuple(doc.get("adjustment_covariates", ())),
        include_interaction=bool(doc.get("include_interaction", True)),
    )


def cmd_validate(rnd: ChallengeRound) -> int:
    """Size-only feedback: report the four cell counts, never fit a model.

    Works on a holdout file with the outcome column removed, so subgroup
    sizes can be checked before unblinding.
    """
    try:
        holdout = load_dataset(rnd.holdout, rnd.schema, require_outcome=False)
        submissions = load_submissions_dir(rnd.submissions)
    except (DataFormatError, ScoringError, OSError) as exc:
        return _fail(str(exc))
    out = Path(rnd.out)
    out.mkdir(parents=True, exist_ok=True)
    all_valid = True
    for sub in submissions:
        report = check_validity(sub, holdout)
        all_valid = all_valid and report.valid
        doc = {
            "team_id": report.team_id,
            "valid": report.valid,
            "counts": report.counts.as_dict() if report.counts is not None else None,
            "reasons": list(report.reasons),
        }
        path = out / f"validity_{_safe_name(sub.team_id)}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        status = "valid" if report.valid else "invalid: " + "; ".join(report.reasons)
        click.echo(f"{sub.team_id}: {status}")
    return 0 if all_valid else 2


def _rerank_board(path: str, alpha_list: tuple[float, ...]):
    """Re-rank already-standardized scores from a CSV (team_id, Z1, Z2[, N])."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ScoringError(f"{path} has no rows")
    for column in ("team_id", "Z1", "Z2"):
        if column not in rows[0]:
            raise ScoringError(f"{path} is missing column {column!r}")
    ids = [r["team_id"] for r in rows]
    z1 = [float(r["Z1"]) for r in rows]
    z2 = [float(r["Z2"]) for r in rows]
    z = final_scores(z1, z2)
    alt = rank_average(z1, z2, ids)
    drafts = [
        TeamScore(
            team_id=ids[i],
            valid=True,
            subgroup_size=int(rows[i]["N"]) if rows[i].get("N") else None,
            z1=float(z1[i]),
            z2=float(z2[i]),
            z=float(z[i]),
            rank_average=int(alt[i]),
        )
        for i in range(len(rows))
    ]
    return rank_teams(drafts, alpha_list=alpha_list)


def cmd_score(rnd: ChallengeRound) -> int:
    """Full scoring pipeline; per-team failures never abort the round."""
    out = Path(rnd.out)
    try:
        if rnd.rerank_only is not None:
            board = _rerank_board(rnd.rerank_only, rnd.alpha_list)
        else:
            holdout = load_dataset(rnd.holdout, rnd.schema)
            submissions = load_submissions_dir(rnd.submissions)
            spec = _load_model_spec(rnd.model_config, holdout)
            board = score_round(
                holdout, submissions, spec, alphas=rnd.alpha_list, workers=_workers()
            )
    except (DataFormatError, ScoringError, OSError, json.JSONDecodeError, ValueError) as exc:
        return _fail(str(exc))
    out.mkdir(parents=True, exist_ok=True)
    write_scoreboard_csv(board, out / "scoreboard.csv")
    (out / "report.json").write_text(
        json.dumps(board_to_dict(board), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for team in board.teams:
        if team.rank is not None:
            click.echo(f"rank {team.rank}: {team.team_id} (Z = {team.z:.4f})")
        else:
            click.echo(f"unranked: {team.team_id} ({'; '.join(team.reasons)})")
    return 0


def cmd_analyze(rnd: ChallengeRound) -> int:
    """Cross-team analyses on top of an existing scoreboard."""
    out = Path(rnd.out)
    report_path = out / "report.json"
    if not report_path.exists():
        return _fail(f"{report_path} not found; run score first")
    try:
        from .scoring import board_from_dict

        board = board_from_dict(json.loads(report_path.read_text(encoding="utf-8")))
        holdout = load_dataset(rnd.holdout, rnd.schema, require_outcome=False)
        submissions = load_submissions_dir(rnd.submissions)
    except (DataFormatError, ScoringError, OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(str(exc))
    by_team = {s.team_id: s for s in submissions}
    memberships = {}
    for team in board.teams:
        if not team.valid:
            continue
        if team.team_id not in by_team:
            return _fail(f"submission for scored team {team.team_id!r} not found")
        memberships[team.team_id] = membership(
            parse(by_team[team.team_id].expression_text), holdout
        )
    bundle = analysis_mod.compute_analyses(board, submissions, memberships)
    written = analysis_mod.emit_report(board, bundle, out, svg=rnd.svg)
    for path in written:
        click.echo(f"wrote {path}")
    return 0


def cmd_simulate(config: str, replications: int, seed: int | None, out: str) -> int:
    """Run the challenge simulation and write its report files."""
    if replications < 1:
        return _fail("replications must be at least 1")
    try:
        if config in ("null", "modifier"):
            cfg = sim_mod.bundled_config(config)
        else:
            cfg = sim_mod.load_generator_config(config)
    except sim_mod.ConfigError as exc:
        return _fail(str(exc))
    use_seed = cfg.seed if seed is None else seed
    try:
        report = sim_mod.run_challenge_simulation(cfg, replications, use_seed)
    except (ValueError, RuntimeError) as exc:
        return _fail(str(exc))
    written = sim_mod.write_simulation_report(report, out)
    agg = report.aggregates
    click.echo(
        f"scored {agg.n_scored} replications ({agg.n_skipped} skipped); "
        f"mean overestimation {agg.mean_overestimation:.4f}; "
        f"coverage {agg.coverage:.3f}; mean S1 {agg.mean_s1:.3f}"
    )
    for path in written:
        click.echo(f"wrote {path}")
    return 0


def _parse_alpha_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise click.BadParameter(f"bad alpha list {text!r}") from exc


@click.group()
def main() -> None:
    """Evaluation harness for subgroup-identification challenges."""


@main.command("validate")
@click.option("--holdout", required=True, help="Holdout trial CSV (outcome column optional).")
@click.option("--schema", required=True, help="Covariate schema JSON.")
@click.option("--submissions", required=True, help="Directory of submission JSON files.")
@click.option("--out", required=True, help="Output directory for validity reports.")
def validate_command(holdout: str, schema: str, submissions: str, out: str) -> None:
    """Check subgroup sizes only; exit 2 if any submission is invalid."""
    sys.exit(cmd_validate(ChallengeRound(holdout, schema, submissions, out)))


@main.command("score")
@click.option("--holdout", default=None, help="Holdout trial CSV with outcomes.")
@click.option("--schema", default=None, help="Covariate schema JSON.")
@click.option("--submissions", default=None, help="Directory of submission JSON files.")
@click.option("--out", required=True, help="Output directory.")
@click.option("--model-config", default=None, help="JSON with adjustment_covariates.")
@click.option("--alpha-list", default="0,0.5,1", help="Alpha exponents for the size-damped score.")
@click.option(
    "--rerank-only",
    default=None,
    help="CSV of already-standardized scores (team_id, Z1, Z2[, N]); skips model fitting.",
)
def score_command(holdout, schema, submissions, out, model_config, alpha_list, rerank_only) -> None:
    """Score a round end to end and write scoreboard.csv plus report.json."""
    if rerank_only is None and not (holdout and schema and submissions):
        click.echo("error: --holdout, --schema and --submissions are required", err=True)
        sys.exit(1)
    rnd = ChallengeRound(
        holdout=holdout or "",
        schema=schema or "",
        submissions=submissions or "",
        out=out,
        model_config=model_config,
        alpha_list=_parse_alpha_list(alpha_list),
        rerank_only=rerank_only,
    )
    sys.exit(cmd_score(rnd))


@main.command("analyze")
@click.option("--holdout", required=True, help="Holdout trial CSV (outcome column optional).")
@click.option("--schema", required=True, help="Covariate schema JSON.")
@click.option("--submissions", required=True, help="Directory of submission JSON files.")
@click.option("--out", required=True, help="Directory holding score outputs; analyses land here.")
@click.option("--svg", is_flag=True, default=False, help="Also render SVG figures.")
def analyze_command(holdout, schema, submissions, out, svg) -> None:
    """Similarity, embedding and prediction-error analyses of a scored round."""
    rnd = ChallengeRound(holdout, schema, submissions, out, svg=svg)
    sys.exit(cmd_analyze(rnd))


@main.command("simulate")
@click.option("--config", required=True, help="Generator config path, or 'null' / 'modifier'.")
@click.option("--replications", required=True, type=int, help="Number of simulated challenges.")
@click.option("--seed", default=None, type=int, help="Root seed (defaults to the config's).")
@click.option("--out", required=True, help="Output directory.")
def simulate_command(config, replications, seed, out) -> None:
    """Simulate challenges against fresh holdouts and report prediction errors."""
    sys.exit(cmd_simulate(config, replications, seed, out))


if __name__ == "__main__":
    main()
