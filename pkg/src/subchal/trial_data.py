"""Trial data model: covariate schema, subject records and dataset ingestion.

A dataset is a wide CSV (one row per subject) described by a JSON covariate
schema. Datasets are immutable once built; every transform returns a new
dataset. Missing numeric cells are the empty string, "NA" or "NaN"
(case-insensitive); unparseable numeric cells also map to missing.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

NUMERIC = "numeric"
CATEGORICAL = "categorical"
BOOLEAN = "boolean"
_KINDS = (NUMERIC, CATEGORICAL, BOOLEAN)

REQUIRED_COLUMNS = ("subject_id", "study_id", "arm", "outcome", "discontinued")

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_RESERVED_NAMES = frozenset({"true", "false"})
_MISSING_TOKENS = frozenset({"", "na", "nan"})
_TRUE_TOKENS = frozenset({"true", "1"})
_FALSE_TOKENS = frozenset({"false", "0"})

# A covariate value: finite float, category label, bool, or None for missing.
CovariateValue = float | str | bool | None


class DataFormatError(ValueError):
    """An input file violates the dataset contract."""


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str
    levels: tuple[str, ...] | None = None
    unit: str | None = None


@dataclass(frozen=True)
class CovariateSchema:
    covariates: tuple[CovariateSpec, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def get(self, name: str) -> CovariateSpec:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.covariates)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    study_id: str
    arm: int
    outcome: int | None
    discontinued: bool
    covariates: dict[str, CovariateValue]


@dataclass(frozen=True)
class TrialDataset:
    schema: CovariateSchema
    subjects: tuple[SubjectRecord, ...]
    label: str

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def arm_count(self, arm: int) -> int:
        return sum(1 for s in self.subjects if s.arm == arm)


@dataclass(frozen=True)
class DatasetSummary:
    label: str
    n_subjects: int
    n_control: int
    n_treated: int
    response_rate_control: float | None
    response_rate_treated: float | None
    missingness: dict[str, float]


def validate_schema(schema: CovariateSchema) -> None:
    seen: set[str] = set()
    for cov in schema.covariates:
        if not _IDENT_RE.match(cov.name):
            raise DataFormatError(f"covariate name {cov.name!r} is not a valid identifier")
        if cov.name.lower() in _RESERVED_NAMES:
            raise DataFormatError(f"covariate name {cov.name!r} is a reserved word")
        if cov.name in seen:
            raise DataFormatError(f"duplicate covariate name {cov.name!r}")
        seen.add(cov.name)
        if cov.kind not in _KINDS:
            raise DataFormatError(f"covariate {cov.name!r} has unknown kind {cov.kind!r}")
        if cov.kind == CATEGORICAL and not cov.levels:
            raise DataFormatError(f"categorical covariate {cov.name!r} declares no levels")


def load_schema(path: str | Path) -> CovariateSchema:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read schema {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("covariates"), list):
        raise DataFormatError(f"schema {path} must be an object with a 'covariates' list")
    covs = []
    for entry in doc["covariates"]:
        if not isinstance(entry, dict) or "name" not in entry or "kind" not in entry:
            raise DataFormatError(f"schema {path}: each covariate needs 'name' and 'kind'")
        levels = entry.get("levels")
        covs.append(
            CovariateSpec(
                name=str(entry["name"]),
                kind=str(entry["kind"]),
                levels=tuple(str(v) for v in levels) if levels is not None else None,
                unit=entry.get("unit"),
            )
        )
    schema = CovariateSchema(covariates=tuple(covs))
    validate_schema(schema)
    return schema


def save_schema(schema: CovariateSchema, path: str | Path) -> None:
    doc = {
        "covariates": [
            {
                "name": c.name,
                "kind": c.kind,
                **({"levels": list(c.levels)} if c.levels is not None else {}),
                **({"unit": c.unit} if c.unit is not None else {}),
            }
            for c in schema.covariates
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _is_missing_token(cell: str) -> bool:
    return cell.strip().lower() in _MISSING_TOKENS


def _parse_bool(cell: str, column: str, row: int) -> bool:
    token = cell.strip().lower()
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    raise DataFormatError(f"row {row}: column {column!r} has non-boolean value {cell!r}")


def _parse_covariate(cell: str, spec: CovariateSpec, row: int) -> CovariateValue:
    if _is_missing_token(cell):
        return None
    if spec.kind == NUMERIC:
        try:
            value = float(cell)
        except ValueError:
            return None
        return value if math.isfinite(value) else None
    if spec.kind == BOOLEAN:
        return _parse_bool(cell, spec.name, row)
    if cell not in (spec.levels or ()):
        raise DataFormatError(
            f"row {row}: value {cell!r} for {spec.name!r} is not a declared level"
        )
    return cell


def load_dataset(
    data_path: str | Path,
    schema_path: str | Path,
    *,
    require_outcome: bool = True,
) -> TrialDataset:
    """Load a wide CSV against its JSON schema.

    With require_outcome=False the outcome column may be absent entirely
    (used for size-only feedback before unblinding); outcomes are then
    loaded as missing.
    """
    schema = load_schema(schema_path)
    data_path = Path(data_path)
    try:
        text = data_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read data file {data_path}: {exc}") from exc

    reader = csv.DictReader(text.splitlines())
    header = reader.fieldnames or []
    if len(set(header)) != len(header):
        raise DataFormatError(f"{data_path}: duplicate column names in header")
    required = [c for c in REQUIRED_COLUMNS if require_outcome or c != "outcome"]
    for column in required:
        if column not in header:
            raise DataFormatError(f"{data_path}: missing required column {column!r}")
    for name in schema.names:
        if name not in header:
            raise DataFormatError(f"{data_path}: missing covariate column {name!r}")
    known = set(REQUIRED_COLUMNS) | set(schema.names)
    extra = [c for c in header if c not in known]
    if extra:
        raise DataFormatError(f"{data_path}: unknown columns {extra}")

    has_outcome = "outcome" in header
    subjects: list[SubjectRecord] = []
    seen_ids: set[str] = set()
    label = ""
    for i, rec in enumerate(reader, start=2):
        subject_id = (rec["subject_id"] or "").strip()
        if not subject_id:
            raise DataFormatError(f"{data_path} row {i}: empty subject_id")
        if subject_id in seen_ids:
            raise DataFormatError(f"{data_path} row {i}: duplicate subject_id {subject_id!r}")
        seen_ids.add(subject_id)
        study_id = (rec["study_id"] or "").strip()
        label = label or study_id

        arm_cell = (rec["arm"] or "").strip()
        if arm_cell not in ("0", "1"):
            raise DataFormatError(
                f"{data_path} row {i}: arm value {arm_cell!r} outside {{0,1}}"
            )
        arm = int(arm_cell)

        outcome: int | None = None
        if has_outcome:
            cell = rec["outcome"] or ""
            if not _is_missing_token(cell):
                if cell.strip() not in ("0", "1"):
                    raise DataFormatError(
                        f"{data_path} row {i}: outcome value {cell!r} outside {{0,1,NA}}"
                    )
                outcome = int(cell.strip())

        discontinued = _parse_bool(rec["discontinued"] or "", "discontinued", i)
        covariates = {
            spec.name: _parse_covariate(rec[spec.name] or "", spec, i)
            for spec in schema.covariates
        }
        subjects.append(
            SubjectRecord(
                subject_id=subject_id,
                study_id=study_id,
                arm=arm,
                outcome=outcome,
                discontinued=discontinued,
                covariates=covariates,
            )
        )

    ds = TrialDataset(schema=schema, subjects=tuple(subjects), label=label or data_path.stem)
    for arm in (0, 1):
        if ds.arm_count(arm) == 0:
            raise DataFormatError(f"{data_path}: no subjects on arm {arm}")
    return ds


def _format_value(value: CovariateValue) -> str:
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return value


def save_dataset(ds: TrialDataset, path: str | Path) -> None:
    """Write a dataset back to the wide CSV form (round-trips exactly)."""
    header = list(REQUIRED_COLUMNS) + list(ds.schema.names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in ds.subjects:
            row = [
                s.subject_id,
                s.study_id,
                str(s.arm),
                "NA" if s.outcome is None else str(s.outcome),
                "true" if s.discontinued else "false",
            ]
            row.extend(_format_value(s.covariates[name]) for name in ds.schema.names)
            writer.writerow(row)


def apply_composite_nonresponse(ds: TrialDataset) -> TrialDataset:
    """Impute non-response for discontinued subjects and missing outcomes.

    Subjects who discontinued, or whose outcome was never observed, count
    as non-responders; the result has a complete 0/1 outcome vector.
    Idempotent, and never touches arm, covariates or subject count.
    """
    subjects = tuple(
        replace(s, outcome=0) if (s.discontinued or s.outcome is None) else s
        for s in ds.subjects
    )
    return replace(ds, subjects=subjects)


def pool_studies(datasets: list[TrialDataset]) -> TrialDataset:
    """Concatenate studies sharing one schema into a single dataset.

    Subject ids that collide across studies are disambiguated by
    prefixing the study label.
    """
    if not datasets:
        raise ValueError("nothing to pool")
    schema = datasets[0].schema
    for ds in datasets[1:]:
        if ds.schema != schema:
            raise DataFormatError(
                f"schema mismatch between {datasets[0].label!r} and {ds.label!r}"
            )
    counts = Counter(s.subject_id for ds in datasets for s in ds.subjects)
    subjects: list[SubjectRecord] = []
    for ds in datasets:
        for s in ds.subjects:
            if counts[s.subject_id] > 1:
                s = replace(s, subject_id=f"{ds.label}:{s.subject_id}")
            subjects.append(s)
    if len({s.subject_id for s in subjects}) != len(subjects):
        raise DataFormatError("subject ids still collide after study-label prefixing")
    label = "+".join(ds.label for ds in datasets)
    return TrialDataset(schema=schema, subjects=tuple(subjects), label=label)


def summarize(ds: TrialDataset) -> DatasetSummary:
    """Per-arm counts, response rates and per-covariate missingness."""
    n_control = ds.arm_count(0)
    n_treated = ds.arm_count(1)

    def rate(arm: int) -> float | None:
        outcomes = [s.outcome for s in ds.subjects if s.arm == arm and s.outcome is not None]
        return sum(outcomes) / len(outcomes) if outcomes else None

    missingness = {}
    n = max(ds.n_subjects, 1)
    for name in ds.schema.names:
        n_missing = sum(1 for s in ds.subjects if s.covariates.get(name) is None)
        missingness[name] = n_missing / n
    return DatasetSummary(
        label=ds.label,
        n_subjects=ds.n_subjects,
        n_control=n_control,
        n_treated=n_treated,
        response_rate_control=rate(0),
        response_rate_treated=rate(1),
        missingness=missingness,
    )
