from enum import Enum
from typing import Dict, Iterable, List, Optional, Set, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

WHO_REGIONS = ("AFR", "AMR", "EMR", "EUR", "SEAR", "WPR")
REGION_ALIASES = {f"{code}O": code for code in WHO_REGIONS}
VACCINE_ALIASES = {"DTPCV1": "DTP1", "DTPCV2": "DTP2", "DTPCV3": "DTP3"}
DEFAULT_VACCINES = ("DTP1", "DTP3", "MCV1", "MCV2", "PCV3")
RATIO_SUFFIX = "_RATIO"


class SourceKind(str, Enum):
    """The three coverage data sources, ordered Admin < Official < Survey."""
    ADMIN = "admin"
    OFFICIAL = "official"
    SURVEY = "survey"

    @property
    def index(self) -> int:
        return _SOURCE_ORDER[self]

    @classmethod
    def ordered(cls) -> Tuple["SourceKind", ...]:
        return (cls.ADMIN, cls.OFFICIAL, cls.SURVEY)


_SOURCE_ORDER = {SourceKind.ADMIN: 0, SourceKind.OFFICIAL: 1, SourceKind.SURVEY: 2}


class Evidence(str, Enum):
    CARD = "Card"
    CARD_OR_HISTORY = "Card or History"


class Validity(str, Enum):
    CRUDE = "crude"
    VALID = "valid"


class CoverageRecord(BaseModel):
    """
    One (country, vaccine, year, source) coverage observation, in percent.
    Survey-only fields (sample_size, evidence, validity, survey_id) stay empty
    for admin and official records.
    """
    model_config = ConfigDict(frozen=True)

    country: str
    region: str
    vaccine: str
    year: int
    source: SourceKind
    coverage_pct: float = Field(ge=0.0)
    sample_size: Optional[int] = Field(default=None, gt=0)
    evidence: Optional[Evidence] = None
    validity: Optional[Validity] = None
    survey_id: Optional[str] = None
    recall_adjusted: bool = False
    ratio_denominator: Optional[str] = None

    @field_validator("region")
    @classmethod
    def _known_region(cls, value: str) -> str:
        value = REGION_ALIASES.get(value, value)
        if value not in WHO_REGIONS:
            raise ValueError(f"unknown WHO region code '{value}'")
        return value

    @model_validator(mode="after")
    def _survey_fields_only_on_surveys(self) -> "CoverageRecord":
        if self.source != SourceKind.SURVEY:
            extras = [name for name in ("sample_size", "evidence", "validity", "survey_id")
                      if getattr(self, name) is not None]
            if extras:
                raise ValueError(f"survey-only fields set on a {self.source.value} record: {', '.join(extras)}")
        return self

    @property
    def key(self) -> Tuple[str, str, int, SourceKind]:
        return (self.country, self.vaccine, self.year, self.source)

    @property
    def sort_key(self) -> Tuple[str, str, int, int]:
        return (self.country, self.vaccine, self.year, self.source.index)

    def label(self) -> str:
        return f"{self.country}/{self.vaccine}/{self.year}/{self.source.value}"


class ProcessingEntry(BaseModel):
    """One line of the processing report: what happened to which record and why."""
    model_config = ConfigDict(frozen=True)

    key: str
    action: str  # dropped | adjusted | clamped | selected | skipped | renamed
    reason: str
    detail: Optional[str] = None

    def render(self) -> str:
        text = f"{self.action:<9} {self.key:<32} {self.reason}"
        return f"{text} ({self.detail})" if self.detail else text


class ICDataset(BaseModel):
    """
    Immunization coverage dataset: records plus notes on the processing applied.

    Datasets are immutable; every processing step returns a new dataset whose
    provenance flags and processing log extend those of its input.
    """
    model_config = ConfigDict(frozen=True)

    records: List[CoverageRecord] = Field(default_factory=list)
    provenance_flags: Set[str] = Field(default_factory=set)
    processing_log: List[ProcessingEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def derive(
        self,
        records: Iterable[CoverageRecord],
        add_flags: Iterable[str] = (),
        entries: Iterable[ProcessingEntry] = (),
    ) -> "ICDataset":
        """Returns a new dataset with the given records; flags and log only ever grow."""
        return ICDataset(
            records=list(records),
            provenance_flags=set(self.provenance_flags) | set(add_flags),
            processing_log=list(self.processing_log) + list(entries),
        )

    @property
    def ratio_map(self) -> Dict[str, Tuple[str, str]]:
        """Maps ratio pseudo-vaccines to (denominator vaccine, numerator vaccine)."""
        mapping: Dict[str, Tuple[str, str]] = {}
        for record in self.records:
            if record.ratio_denominator:
                numerator = record.vaccine[: -len(RATIO_SUFFIX)]
                mapping[record.vaccine] = (record.ratio_denominator, numerator)
        return mapping

    def to_frame(self) -> pd.DataFrame:
        columns = list(CoverageRecord.model_fields)
        if not self.records:
            return pd.DataFrame(columns=columns)
        rows = [record.model_dump(mode="json") for record in self.records]
        return pd.DataFrame(rows, columns=columns)

    def report_text(self) -> str:
        """Renders the processing report listing every dropped or adjusted record."""
        lines = [
            f"records: {len(self.records)}",
            f"provenance: {','.join(sorted(self.provenance_flags)) or '-'}",
            f"entries: {len(self.processing_log)}",
            "",
        ]
        lines.extend(entry.render() for entry in self.processing_log)
        return "\n".join(lines) + "\n"


class DenominatorRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    country: str
    vaccine: str
    year: int
    target_population: float = Field(gt=0.0)


class DenominatorTable(BaseModel):
    """Target populations per (country, vaccine, year), used as regional weights."""
    rows: List[DenominatorRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_keys(self) -> "DenominatorTable":
        seen: Set[Tuple[str, str, int]] = set()
        for row in self.rows:
            key = (row.country, row.vaccine, row.year)
            if key in seen:
                raise ValueError(f"duplicate denominator row for {key}")
            seen.add(key)
        return self

    def lookup(self) -> Dict[Tuple[str, str, int], float]:
        return {(row.country, row.vaccine, row.year): row.target_population for row in self.rows}


class YoviRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    country: str
    vaccine: str
    intro_year: int


class YoviTable(BaseModel):
    """Year of vaccine introduction per (country, vaccine)."""
    rows: List[YoviRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_keys(self) -> "YoviTable":
        keys = [(row.country, row.vaccine) for row in self.rows]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (country, vaccine) rows in yovi table")
        return self

    def lookup(self) -> Dict[Tuple[str, str], int]:
        return {(row.country, row.vaccine): row.intro_year for row in self.rows}

    def countries(self) -> Set[str]:
        return {row.country for row in self.rows}
