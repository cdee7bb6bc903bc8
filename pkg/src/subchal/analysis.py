"""Cross-team analyses: subgroup similarity, embeddings and prediction errors.

Everything here is a pure function of the scored round; emit_report is
the only writer and produces reproducible, byte-stable files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import subgroup_expr as sx
from .scoring import ScoreBoard, board_to_dict, write_scoreboard_csv
from .subgroup_expr import MembershipVector, jaccard_distance


@dataclass(frozen=True)
class DistanceMatrix:
    labels: tuple[str, ...]
    values: np.ndarray  # symmetric, nonnegative, zero diagonal


@dataclass(frozen=True)
class Embedding2D:
    labels: tuple[str, ...]
    coordinates: np.ndarray  # k x 2
    eigenvalues_used: tuple[float, float]


@dataclass(frozen=True)
class PredictionErrorRow:
    team_id: str
    delta_pred: float
    delta_hat: float
    error: float
    abs_error: float
    subgroup_size: int
    interval_low: float
    interval_high: float
    covered: bool


@dataclass(frozen=True)
class PredictionErrorReport:
    rows: tuple[PredictionErrorRow, ...]
    mean_pct_overestimation: float | None
    n_excluded: int
    coverage: float | None


@dataclass(frozen=True)
class AnalysisBundle:
    distance: DistanceMatrix
    embedding: Embedding2D | None
    variable_frequency_full: tuple[tuple[str, int], ...]
    prediction_errors: PredictionErrorReport
    correlations: dict[str, float | None]


def variable_frequency(submissions) -> list[tuple[str, int]]:
    """How many teams reference each covariate, most used first.

    Counts teams, not occurrences; the default report view keeps only
    covariates used by at least two teams, this full list keeps all.
    """
    counts: dict[str, int] = {}
    for sub in submissions:
        for name in sx.variables_used(sx.parse(sub.expression_text)):
            counts[name] = counts.get(name, 0) + 1
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def pairwise_jaccard_matrix(labels, memberships) -> DistanceMatrix:
    """Jaccard distance between every pair of team subgroups."""
    labels = tuple(labels)
    memberships = list(memberships)
    if len(labels) != len(memberships):
        raise ValueError("labels and memberships differ in length")
    k = len(labels)
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d[i, j] = d[j, i] = jaccard_distance(memberships[i], memberships[j])
    return DistanceMatrix(labels=labels, values=d)


def classical_mds(d: DistanceMatrix, dims: int = 2) -> Embedding2D:
    """Principal-coordinate embedding by double centering and eigendecomposition.

    Negative eigenvalues (possible for non-Euclidean distances) are
    clamped to zero. Each axis is reflected so its first nonzero
    coordinate, scanning points in sorted-label order, is positive; that
    fixes the arbitrary reflections deterministically and keeps the
    embedding equivariant under input permutations.
    """
    k = len(d.labels)
    if k < 3:
        raise ValueError("embedding needs at least 3 points")
    sq = np.asarray(d.values, dtype=float) ** 2
    centering = np.eye(k) - np.ones((k, k)) / k
    b = -0.5 * centering @ sq @ centering
    eigenvalues, eigenvectors = np.linalg.eigh(b)
    order = np.argsort(eigenvalues)[::-1][:dims]
    top_values = np.clip(eigenvalues[order], 0.0, None)
    coords = eigenvectors[:, order] * np.sqrt(top_values)[None, :]
    scan_order = sorted(range(k), key=lambda i: d.labels[i])
    for axis in range(coords.shape[1]):
        column = coords[:, axis]
        threshold = 1e-9 * max(1.0, float(np.max(np.abs(column))))
        for i in scan_order:
            if abs(column[i]) > threshold:
                if column[i] < 0:
                    coords[:, axis] = -column
                break
    return Embedding2D(
        labels=d.labels,
        coordinates=coords,
        eigenvalues_used=(float(top_values[0]), float(top_values[1])),
    )


def spearman(x, y) -> float | None:
    """Rank correlation (ties averaged); None when either input is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx_ = rx - rx.mean()
    sy_ = ry - ry.mean()
    denom = np.sqrt(np.sum(sx_**2) * np.sum(sy_**2))
    if denom == 0.0:
        return None
    return float(np.sum(sx_ * sy_) / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    position = 0
    while position < len(v):
        end = position
        while end + 1 < len(v) and v[order[end + 1]] == v[order[position]]:
            end += 1
        ranks[order[position : end + 1]] = (position + end) / 2.0 + 1.0
        position = end + 1
    return ranks


def prediction_error_report(board: ScoreBoard, submissions) -> PredictionErrorReport:
    """Per-team prediction errors and the aggregate overestimation.

    The mean percentage overestimation averages (delta_pred - delta_hat)
    / delta_hat over teams whose observed effect is positive; teams with
    a nonpositive observed effect are excluded and counted.
    """
    by_team = {s.team_id: s for s in submissions}
    rows = []
    pct = []
    excluded = 0
    for t in board.teams:
        if not t.valid or t.delta_hat is None:
            continue
        sub = by_team[t.team_id]
        error = sub.delta_pred - t.delta_hat
        low = sub.delta_pred - 1.96 * sub.sigma_pred
        high = sub.delta_pred + 1.96 * sub.sigma_pred
        rows.append(
            PredictionErrorRow(
                team_id=t.team_id,
                delta_pred=sub.delta_pred,
                delta_hat=t.delta_hat,
                error=error,
                abs_error=abs(error),
                subgroup_size=t.subgroup_size or 0,
                interval_low=low,
                interval_high=high,
                covered=low <= t.delta_hat <= high,
            )
        )
        if t.delta_hat > 0:
            pct.append(error / t.delta_hat)
        else:
            excluded += 1
    coverage = sum(r.covered for r in rows) / len(rows) if rows else None
    return PredictionErrorReport(
        rows=tuple(rows),
        mean_pct_overestimation=float(np.mean(pct)) if pct else None,
        n_excluded=excluded,
        coverage=coverage,
    )


def compute_analyses(
    board: ScoreBoard,
    submissions,
    memberships: dict[str, MembershipVector],
) -> AnalysisBundle:
    """Assemble every cross-team analysis for the scored round."""
    valid = [t for t in board.teams if t.valid]
    labels = [t.team_id for t in valid]
    distance = pairwise_jaccard_matrix(labels, [memberships[t] for t in labels])
    embedding = classical_mds(distance) if len(labels) >= 3 else None
    parseable = []
    for sub in submissions:
        try:
            sx.parse(sub.expression_text)
        except sx.ParseError:
            continue
        parseable.append(sub)
    frequencies = tuple(variable_frequency(parseable))
    errors = prediction_error_report(board, submissions)
    z = [t.z for t in valid]
    correlations = {
        "spearman_s1_z": spearman([t.s1 for t in valid], z) if len(valid) >= 2 else None,
        "spearman_s2_z": spearman([t.s2 for t in valid], z) if len(valid) >= 2 else None,
    }
    return AnalysisBundle(
        distance=distance,
        embedding=embedding,
        variable_frequency_full=frequencies,
        prediction_errors=errors,
        correlations=correlations,
    )


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _g(value: float) -> str:
    return "%.6g" % value


def bundle_to_dict(bundle: AnalysisBundle) -> dict:
    return {
        "jaccard": {
            "labels": list(bundle.distance.labels),
            "matrix": [[float(v) for v in row] for row in bundle.distance.values],
        },
        "mds": None
        if bundle.embedding is None
        else {
            "labels": list(bundle.embedding.labels),
            "coordinates": [[float(v) for v in row] for row in bundle.embedding.coordinates],
            "eigenvalues_used": list(bundle.embedding.eigenvalues_used),
        },
        "variable_frequency": [[name, count] for name, count in bundle.variable_frequency_full],
        "prediction_errors": {
            "rows": [
                {
                    "team_id": r.team_id,
                    "delta_pred": r.delta_pred,
                    "delta_hat": r.delta_hat,
                    "error": r.error,
                    "abs_error": r.abs_error,
                    "subgroup_size": r.subgroup_size,
                    "interval_low": r.interval_low,
                    "interval_high": r.interval_high,
                    "covered": r.covered,
                }
                for r in bundle.prediction_errors.rows
            ],
            "mean_pct_overestimation": bundle.prediction_errors.mean_pct_overestimation,
            "n_excluded": bundle.prediction_errors.n_excluded,
            "coverage": bundle.prediction_errors.coverage,
        },
        "correlations": bundle.correlations,
    }


def emit_report(
    board: ScoreBoard,
    bundle: AnalysisBundle,
    out_dir: str | Path,
    svg: bool = False,
) -> list[Path]:
    """Write the delimited outputs, the JSON bundle and optional figures.

    Files: scoreboard.csv, jaccard.csv, mds.csv, variable_frequency.csv,
    prediction_errors.csv and report.json; with svg=True also mds.svg and
    error_vs_size.svg. Reruns on identical inputs are byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    scoreboard = out / "scoreboard.csv"
    write_scoreboard_csv(board, scoreboard)
    written.append(scoreboard)

    jaccard = out / "jaccard.csv"
    labels = bundle.distance.labels
    _write_csv(
        jaccard,
        ["team_id", *labels],
        [[label, *(_g(v) for v in row)] for label, row in zip(labels, bundle.distance.values)],
    )
    written.append(jaccard)

    mds = out / "mds.csv"
    if bundle.embedding is None:
        _write_csv(mds, ["team_id", "x", "y"], [])
    else:
        _write_csv(
            mds,
            ["team_id", "x", "y"],
            [
                [label, _g(row[0]), _g(row[1])]
                for label, row in zip(bundle.embedding.labels, bundle.embedding.coordinates)
            ],
        )
    written.append(mds)

    freq = out / "variable_frequency.csv"
    _write_csv(
        freq,
        ["covariate", "teams"],
        [[name, str(count)] for name, count in bundle.variable_frequency_full if count >= 2],
    )
    written.append(freq)

    errors = out / "prediction_errors.csv"
    _write_csv(
        errors,
        [
            "team_id",
            "delta_pred",
            "delta_hat",
            "error",
            "abs_error",
            "subgroup_size",
            "interval_low",
            "interval_high",
            "covered",
        ],
        [
            [
                r.team_id,
                _g(r.delta_pred),
                _g(r.delta_hat),
                _g(r.error),
                _g(r.abs_error),
                str(r.subgroup_size),
                _g(r.interval_low),
                _g(r.interval_high),
                "true" if r.covered else "false",
            ]
            for r in bundle.prediction_errors.rows
        ],
    )
    written.append(errors)

    report = out / "report.json"
    doc = board_to_dict(board)
    doc["analysis"] = bundle_to_dict(bundle)
    report.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(report)

    if svg:
        from . import figures

        if bundle.embedding is not None:
            path = out / "mds.svg"
            figures.save_svg(figures.embedding_figure(bundle.embedding), path)
            written.append(path)
        path = out / "error_vs_size.svg"
        figures.save_svg(figures.error_vs_size_figure(bundle.prediction_errors), path)
        written.append(path)
    return written
