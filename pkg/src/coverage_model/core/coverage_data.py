# src/coverage_model/core/coverage_data.py
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.special import logit

from ..models.configs import ColumnMapping
from ..models.records import (
    VACCINE_ALIASES,
    CoverageRecord,
    DenominatorRow,
    DenominatorTable,
    Evidence,
    ICDataset,
    ProcessingEntry,
    SourceKind,
    Validity,
    YoviRow,
    YoviTable,
)
from .errors import DataParseError, DuplicateRecordError

logger = logging.getLogger(__name__)

PROVENANCE_PREFIX = "# provenance:"
_EVIDENCE = {"card": Evidence.CARD, "card or history": Evidence.CARD_OR_HISTORY}
_VALIDITY = {"crude": Validity.CRUDE, "valid": Validity.VALID}
_REPORTED_KINDS = (SourceKind.ADMIN, SourceKind.OFFICIAL)

PathLike = Union[str, Path]


def _read_frame(path: PathLike, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataParseError("file is empty, a header row is required", path=str(path), line=1) from None
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DataParseError(f"missing required columns: {', '.join(missing)}", path=str(path), line=1)
    for column in frame.columns:
        frame[column] = frame[column].astype(str).str.strip()
    return frame


def _line(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _to_float(value: str, field: str, path: Path, index: int) -> float:
    try:
        number = float(value)
    except ValueError:
        raise DataParseError(f"non-numeric {field} '{value}'", path=str(path), line=_line(index)) from None
    if not np.isfinite(number):
        raise DataParseError(f"non-finite {field} '{value}'", path=str(path), line=_line(index))
    return number


def _to_int(value: str, field: str, path: Path, index: int) -> int:
    try:
        return int(value)
    except ValueError:
        try:
            number = float(value)
        except ValueError:
            number = float("nan")
        if np.isfinite(number) and number == int(number):
            return int(number)
        raise DataParseError(f"bad {field} '{value}'", path=str(path), line=_line(index)) from None


def normalize_vaccine(code: str) -> str:
    code = code.strip().upper()
    return VACCINE_ALIASES.get(code, code)


def _build_record(fields: Dict, path: Path, index: int) -> CoverageRecord:
    try:
        return CoverageRecord(**fields)
    except ValidationError as exc:
        reasons = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'record'}: {err['msg']}" for err in exc.errors())
        raise DataParseError(reasons, path=str(path), line=_line(index)) from None


def _drop(entries: List[ProcessingEntry], path: Path, index: int, reason: str) -> None:
    key = f"{path.name}:{_line(index)}"
    logger.debug(f"Dropping row {key}: {reason}")
    entries.append(ProcessingEntry(key=key, action="dropped", reason=reason))


def parse_coverage_csv(
    path: PathLike,
    kind: Optional[Union[SourceKind, str]] = None,
    columns: Optional[ColumnMapping] = None,
) -> ICDataset:
    """
    Parses an admin/official coverage export into an ICDataset.

    Args:
        path: CSV file with country, region, year, antigen, coverage_category and coverage columns.
        kind: Keep only this category (admin or official). None keeps both.
        columns: Header names for each column role.

    Returns:
        ICDataset with one record per kept row. Dropped rows are listed in the processing log.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataParseError: On a missing header, non-numeric coverage, bad year or unknown region.
    """
    columns = columns or ColumnMapping()
    path = Path(path)
    if kind is not None:
        kind = SourceKind(kind)
        if kind not in _REPORTED_KINDS:
            raise ValueError(f"parse_coverage_csv handles admin or official data, not '{kind.value}'")
    wanted = (kind,) if kind is not None else _REPORTED_KINDS
    wanted_values = {k.value for k in wanted}

    frame = _read_frame(path, [columns.country, columns.region, columns.year, columns.vaccine,
                               columns.category, columns.coverage])
    records: List[CoverageRecord] = []
    entries: List[ProcessingEntry] = []
    for index, row in frame.iterrows():
        category = row[columns.category].lower()
        if category not in wanted_values:
            _drop(entries, path, index, "category_excluded")
            continue
        if not row[columns.region]:
            _drop(entries, path, index, "missing_region")
            continue
        if not row[columns.coverage]:
            _drop(entries, path, index, "missing_coverage")
            continue
        records.append(_build_record({
            "country": row[columns.country],
            "region": row[columns.region].upper(),
            "vaccine": normalize_vaccine(row[columns.vaccine]),
            "year": _to_int(row[columns.year], "year", path, index),
            "source": SourceKind(category),
            "coverage_pct": _to_float(row[columns.coverage], "coverage", path, index),
        }, path, index))

    logger.info(f"Parsed {len(records)} records from {path} ({len(entries)} rows dropped)")
    return ICDataset(records=records, processing_log=entries)


def parse_survey_csv(path: PathLike, columns: Optional[ColumnMapping] = None) -> ICDataset:
    """
    Parses a survey coverage export. The year column holds the birth-cohort year as given.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataParseError: On malformed values or an evidence label other than Card / Card or History.
    """
    columns = columns or ColumnMapping()
    path = Path(path)
    frame = _read_frame(path, [columns.country, columns.region, columns.year, columns.vaccine,
                               columns.coverage, columns.sample_size, columns.evidence, columns.validity])
    has_survey_id = columns.survey_id in frame.columns

    records: List[CoverageRecord] = []
    entries: List[ProcessingEntry] = []
    for index, row in frame.iterrows():
        if not row[columns.region]:
            _drop(entries, path, index, "missing_region")
            continue
        if not row[columns.coverage]:
            _drop(entries, path, index, "missing_coverage")
            continue

        evidence_text = row[columns.evidence].lower()
        if evidence_text not in _EVIDENCE:
            raise DataParseError(f"unknown evidence '{row[columns.evidence]}', expected 'Card' or 'Card or History'",
                                 path=str(path), line=_line(index))
        validity_text = row[columns.validity].lower()
        if validity_text and validity_text not in _VALIDITY:
            raise DataParseError(f"unknown validity '{row[columns.validity]}', expected crude or valid",
                                 path=str(path), line=_line(index))
        size_text = row[columns.sample_size]

        records.append(_build_record({
            "country": row[columns.country],
            "region": row[columns.region].upper(),
            "vaccine": normalize_vaccine(row[columns.vaccine]),
            "year": _to_int(row[columns.year], "year", path, index),
            "source": SourceKind.SURVEY,
            "coverage_pct": _to_float(row[columns.coverage], "coverage", path, index),
            "sample_size": _to_int(size_text, "sample_size", path, index) if size_text else None,
            "evidence": _EVIDENCE[evidence_text],
            "validity": _VALIDITY[validity_text] if validity_text else None,
            "survey_id": (row[columns.survey_id] or None) if has_survey_id else None,
        }, path, index))

    logger.info(f"Parsed {len(records)} survey records from {path} ({len(entries)} rows dropped)")
    return ICDataset(records=records, processing_log=entries)


def merge_and_filter(
    sets: Iterable[ICDataset],
    vaccines: Optional[Sequence[str]] = None,
    years: Optional[Tuple[int, int]] = None,
    drop_zero: bool = True,
) -> ICDataset:
    """
    Concatenates datasets, restricts them to the requested vaccines and
    inclusive year range, optionally drops exact zeros, and sorts by
    (country, vaccine, year, source). Applying it twice is a no-op.

    Raises:
        DuplicateRecordError: If admin or official records repeat a key.
    """
    sets = list(sets)
    flags = set().union(*(d.provenance_flags for d in sets)) if sets else set()
    log = [entry for d in sets for entry in d.processing_log]
    wanted = {normalize_vaccine(v) for v in vaccines} if vaccines is not None else None

    kept: List[CoverageRecord] = []
    entries: List[ProcessingEntry] = []
    for record in (r for d in sets for r in d.records):
        reason = None
        if wanted is not None and record.vaccine not in wanted:
            reason = "vaccine_excluded"
        elif years is not None and not (years[0] <= record.year <= years[1]):
            reason = "year_excluded"
        elif drop_zero and record.coverage_pct == 0.0:
            reason = "zero_coverage"
        if reason:
            entries.append(ProcessingEntry(key=record.label(), action="dropped", reason=reason))
            continue
        kept.append(record)

    seen = set()
    duplicates = []
    for record in kept:
        if record.source in _REPORTED_KINDS:
            if record.key in seen and record.key not in duplicates:
                duplicates.append(record.key)
            seen.add(record.key)
    if duplicates:
        raise DuplicateRecordError([(c, v, y, s.value) for c, v, y, s in duplicates])

    kept.sort(key=lambda r: r.sort_key)
    logger.info(f"Merged {len(sets)} datasets into {len(kept)} records ({len(entries)} filtered out)")
    return ICDataset(records=kept, provenance_flags=flags, processing_log=log + entries)


def write_dataset_csv(dataset: ICDataset, path: PathLike) -> None:
    """Writes the analysis-ready dataset; a logit column is filled once coverage has been clamped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = dataset.to_frame()
    if "clamped" in dataset.provenance_flags and len(frame):
        frame["logit"] = logit(frame["coverage_pct"].astype(float) / 100.0)
    else:
        frame["logit"] = np.nan
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"{PROVENANCE_PREFIX} {','.join(sorted(dataset.provenance_flags))}\n")
        frame.to_csv(handle, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} records to {path}")


def read_dataset_csv(path: PathLike) -> ICDataset:
    """
    Reads a dataset written by write_dataset_csv.

    Raises:
        FileNotFoundError: If the file does not exist.
        DataParseError: If the provenance line or a record is malformed.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().rstrip("\n")
    if not first.startswith(PROVENANCE_PREFIX):
        raise DataParseError("missing provenance line", path=str(path), line=1)
    flags = {flag for flag in first[len(PROVENANCE_PREFIX):].strip().split(",") if flag}

    frame = pd.read_csv(path, skiprows=1, dtype=str, keep_default_na=False)
    records = []
    for index, row in frame.iterrows():
        fields = {name: (row[name] if row[name] != "" else None) for name in CoverageRecord.model_fields}
        fields["recall_adjusted"] = fields["recall_adjusted"] == "True"
        try:
            records.append(CoverageRecord(**fields))
        except ValidationError as exc:
            # data line numbers are shifted by the provenance line
            raise DataParseError(str(exc.errors()[0]["msg"]), path=str(path), line=_line(index) + 1) from None
    return ICDataset(records=records, provenance_flags=flags)


def read_denominators_csv(path: PathLike, columns: Optional[ColumnMapping] = None) -> DenominatorTable:
    """Reads target populations (country, antigen, year, target_population)."""
    columns = columns or ColumnMapping()
    path = Path(path)
    frame = _read_frame(path, [columns.country, columns.vaccine, columns.year, "target_population"])
    rows = []
    for index, row in frame.iterrows():
        population = _to_float(row["target_population"], "target_population", path, index)
        if population <= 0:
            raise DataParseError(f"target_population must be positive, got {population}", path=str(path), line=_line(index))
        rows.append(DenominatorRow(
            country=row[columns.country],
            vaccine=normalize_vaccine(row[columns.vaccine]),
            year=_to_int(row[columns.year], "year", path, index),
            target_population=population,
        ))
    try:
        return DenominatorTable(rows=rows)
    except ValidationError as exc:
        raise DataParseError(str(exc.errors()[0]["msg"]), path=str(path)) from None


def read_yovi_csv(path: PathLike, columns: Optional[ColumnMapping] = None) -> YoviTable:
    """Reads year-of-introduction rows (country, antigen, intro_year)."""
    columns = columns or ColumnMapping()
    path = Path(path)
    frame = _read_frame(path, [columns.country, columns.vaccine, "intro_year"])
    rows = [
        YoviRow(
            country=row[columns.country],
            vaccine=normalize_vaccine(row[columns.vaccine]),
            intro_year=_to_int(row["intro_year"], "intro_year", path, index),
        )
        for index, row in frame.iterrows()
    ]
    try:
        return YoviTable(rows=rows)
    except ValidationError as exc:
        raise DataParseError(str(exc.errors()[0]["msg"]), path=str(path)) from None
