# src/coverage_model/core/preprocess.py
"""
Bias corrections and transforms applied between ingestion and model fitting.

Order used by the pipeline: recall-bias adjustment, survey selection,
ratio construction, clamping, logit transform.
"""
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logit

from ..models.records import (
    RATIO_SUFFIX,
    CoverageRecord,
    Evidence,
    ICDataset,
    ProcessingEntry,
    SourceKind,
    Validity,
    YoviTable,
)
from ..models.reports import EstimateTable

logger = logging.getLogger(__name__)

CLAMP_LOWER = 0.001
CLAMP_UPPER = 0.999
DEFAULT_RECALL_PAIRS: Tuple[Tuple[str, str], ...] = (("DTP3", "DTP1"), ("PCV3", "PCV1"))


class LogitObservation(BaseModel):
    """One observation on the logit scale; indices are 0-based."""
    model_config = ConfigDict(frozen=True)

    i: int
    j: int
    t: int
    source: SourceKind
    y: float


class LogitData(BaseModel):
    """Model-ready observations plus the index maps that label them."""
    model_config = ConfigDict(frozen=True)

    observations: List[LogitObservation] = Field(default_factory=list)
    countries: List[str] = Field(default_factory=list)
    vaccines: List[str] = Field(default_factory=list)
    years: List[int] = Field(default_factory=list)
    regions: Dict[str, str] = Field(default_factory=dict)
    ratio_map: Dict[str, Tuple[str, str]] = Field(default_factory=dict)
    provenance_flags: List[str] = Field(default_factory=list)


def _prefer_valid(records: List[CoverageRecord]) -> Optional[CoverageRecord]:
    if not records:
        return None
    for record in records:
        if record.validity == Validity.VALID:
            return record
    return records[0]


def recall_bias_adjust(
    dataset: ICDataset,
    vaccine_pairs: Sequence[Tuple[str, str]] = DEFAULT_RECALL_PAIRS,
) -> ICDataset:
    """
    Replaces 'Card or History' third-dose survey estimates with
    VD3_card * VD1_card_or_history / VD1_card, per (country, year, survey).

    Args:
        dataset: Dataset holding survey records with evidence labels.
        vaccine_pairs: (third-dose code, first-dose code) pairs to adjust.

    Returns:
        New dataset with adjusted records flagged recall_adjusted. Groups
        lacking an input keep their original values; a zero card-only first
        dose skips the group and is logged.
    """
    groups: Dict[Tuple, List[int]] = OrderedDict()
    for position, record in enumerate(dataset.records):
        if record.source == SourceKind.SURVEY:
            groups.setdefault((record.country, record.year, record.survey_id), []).append(position)

    records = list(dataset.records)
    entries: List[ProcessingEntry] = []
    adjusted_count = 0
    for (country, year, survey_id), positions in groups.items():
        members = [dataset.records[p] for p in positions]
        label = f"{country}/{year}/{survey_id or '-'}"

        def pick(vaccine: str, evidence: Evidence) -> List[CoverageRecord]:
            return [r for r in members if r.vaccine == vaccine and r.evidence == evidence]

        for dose3, dose1 in vaccine_pairs:
            targets = [p for p in positions
                       if records[p].vaccine == dose3 and records[p].evidence == Evidence.CARD_OR_HISTORY]
            vd3_card = _prefer_valid(pick(dose3, Evidence.CARD))
            vd1_card = _prefer_valid(pick(dose1, Evidence.CARD))
            vd1_history = _prefer_valid(pick(dose1, Evidence.CARD_OR_HISTORY))
            if vd3_card is None or vd1_card is None or vd1_history is None:
                if targets:
                    entries.append(ProcessingEntry(key=f"{label}/{dose3}", action="skipped", reason="recall_inputs_missing"))
                continue
            if vd1_card.coverage_pct == 0.0:
                logger.warning(f"Recall adjustment skipped for {label}/{dose3}: card-only {dose1} coverage is zero")
                entries.append(ProcessingEntry(key=f"{label}/{dose3}", action="skipped", reason="zero_card_first_dose"))
                continue
            if not targets:
                entries.append(ProcessingEntry(key=f"{label}/{dose3}", action="skipped", reason="no_target"))
                continue
            value = vd3_card.coverage_pct * vd1_history.coverage_pct / vd1_card.coverage_pct
            for p in targets:
                before = records[p].coverage_pct
                records[p] = records[p].model_copy(update={"coverage_pct": value, "recall_adjusted": True})
                adjusted_count += 1
                entries.append(ProcessingEntry(
                    key=records[p].label(), action="adjusted", reason="recall_bias",
                    detail=f"{before:g} -> {value:g}",
                ))
                logger.debug(f"Recall-adjusted {records[p].label()}: {before} -> {value}")

    logger.info(f"Recall-bias adjustment replaced {adjusted_count} survey estimates")
    return dataset.derive(records, add_flags=["recall_adjusted"], entries=entries)


def _evidence_rank(record: CoverageRecord) -> int:
    if record.evidence == Evidence.CARD_OR_HISTORY:
        return 2
    if record.evidence == Evidence.CARD:
        return 1
    return 0


def _choose(candidates: List[CoverageRecord]) -> CoverageRecord:
    sized = [r for r in candidates if r.sample_size is not None]
    if sized:
        # max keeps the first of equal sizes
        return max(sized, key=lambda r: r.sample_size)
    return _prefer_valid(candidates)


def select_survey_estimates(dataset: ICDataset, min_n: int = 300) -> ICDataset:
    """
    Keeps at most one survey record per (country, vaccine, year).

    An estimate is acceptable when its sample size exceeds min_n or it is
    labelled valid. Among acceptable ones, 'Card or History' wins over 'Card',
    then the largest sample size, then the first valid estimate, then file
    order. Recall-adjusted estimates, when present, are the only candidates
    for their key.
    """
    groups: Dict[Tuple[str, str, int], List[int]] = OrderedDict()
    for position, record in enumerate(dataset.records):
        if record.source == SourceKind.SURVEY:
            groups.setdefault((record.country, record.vaccine, record.year), []).append(position)

    dropped = set()
    entries: List[ProcessingEntry] = []
    for key, positions in groups.items():
        members = [(p, dataset.records[p]) for p in positions]
        if any(r.recall_adjusted for _, r in members):
            for p, r in members:
                if not r.recall_adjusted:
                    dropped.add(p)
                    entries.append(ProcessingEntry(key=r.label(), action="dropped", reason="superseded_by_adjusted"))
            members = [(p, r) for p, r in members if r.recall_adjusted]

        acceptable = []
        for p, r in members:
            if (r.sample_size is not None and r.sample_size > min_n) or r.validity == Validity.VALID:
                acceptable.append((p, r))
            else:
                dropped.add(p)
                entries.append(ProcessingEntry(key=r.label(), action="dropped", reason="not_acceptable",
                                               detail=f"n={r.sample_size}, validity={r.validity.value if r.validity else '-'}"))
        if not acceptable:
            continue

        best_rank = max(_evidence_rank(r) for _, r in acceptable)
        finalists = [(p, r) for p, r in acceptable if _evidence_rank(r) == best_rank]
        winner = _choose([r for _, r in finalists])
        for p, r in acceptable:
            if r is not winner:
                dropped.add(p)
                entries.append(ProcessingEntry(key=r.label(), action="dropped", reason="not_selected"))

    kept = [r for p, r in enumerate(dataset.records) if p not in dropped]
    logger.info(f"Survey selection kept {sum(1 for r in kept if r.source == SourceKind.SURVEY)} of "
                f"{sum(len(v) for v in groups.values())} survey estimates (min_n={min_n})")
    return dataset.derive(kept, add_flags=["survey_selected"], entries=entries)


def apply_ratio(dataset: ICDataset, numerator: str = "DTP3", denominator: str = "DTP1") -> ICDataset:
    """
    Replaces numerator records by the pseudo-vaccine '<numerator>_RATIO'
    holding 100 * numerator / denominator, computed before any capping.
    Denominator values above 100 are then capped at 99.9. Ratios above one
    are capped at 0.999; numerator rows without a denominator are dropped.
    """
    pseudo = f"{numerator}{RATIO_SUFFIX}"
    denominators: Dict[Tuple[str, int, SourceKind], CoverageRecord] = {}
    for record in dataset.records:
        if record.vaccine == denominator:
            denominators[(record.country, record.year, record.source)] = record

    out: List[CoverageRecord] = []
    entries: List[ProcessingEntry] = []
    for record in dataset.records:
        if record.vaccine == denominator and record.coverage_pct > 100.0:
            entries.append(ProcessingEntry(key=record.label(), action="clamped", reason="above_100",
                                           detail=f"{record.coverage_pct:g} -> 99.9"))
            out.append(record.model_copy(update={"coverage_pct": 99.9}))
        elif record.vaccine == numerator:
            base = denominators.get((record.country, record.year, record.source))
            if base is None or base.coverage_pct == 0.0:
                reason = "missing_denominator" if base is None else "zero_denominator"
                logger.warning(f"Dropping {record.label()}: no usable {denominator} to form the ratio")
                entries.append(ProcessingEntry(key=record.label(), action="dropped", reason=reason))
                continue
            ratio = record.coverage_pct / base.coverage_pct
            if ratio > 1.0:
                logger.warning(f"Ratio {numerator}/{denominator} above one for {record.label()} ({ratio:.4f}); capped at 0.999")
                entries.append(ProcessingEntry(key=record.label(), action="clamped", reason="ratio_above_one",
                                               detail=f"{ratio:g} -> 0.999"))
                ratio = CLAMP_UPPER
            out.append(record.model_copy(update={
                "vaccine": pseudo,
                "coverage_pct": 100.0 * ratio,
                "ratio_denominator": denominator,
            }))
        else:
            out.append(record)

    out.sort(key=lambda r: r.sort_key)
    logger.info(f"Built {sum(1 for r in out if r.vaccine == pseudo)} {pseudo} records")
    return dataset.derive(out, add_flags=["ratio_applied"], entries=entries)


def apply_dtp_ratio(dataset: ICDataset) -> ICDataset:
    return apply_ratio(dataset, numerator="DTP3", denominator="DTP1")


def clamp_coverage(dataset: ICDataset, lower: float = CLAMP_LOWER, upper: float = CLAMP_UPPER) -> ICDataset:
    """Clamps every coverage proportion into [lower, upper]; values stay in percent."""
    out: List[CoverageRecord] = []
    entries: List[ProcessingEntry] = []
    lo_pct, hi_pct = 100.0 * lower, 100.0 * upper
    for record in dataset.records:
        value = float(np.clip(record.coverage_pct, lo_pct, hi_pct))
        if value != record.coverage_pct:
            entries.append(ProcessingEntry(key=record.label(), action="clamped",
                                           reason="above_upper" if value == hi_pct else "below_lower",
                                           detail=f"{record.coverage_pct:g} -> {value:g}"))
            record = record.model_copy(update={"coverage_pct": value})
        out.append(record)
    logger.info(f"Clamped {len(entries)} coverage values into [{lower}, {upper}]")
    return dataset.derive(out, add_flags=["clamped"], entries=entries)


def to_logit_data(dataset: ICDataset) -> LogitData:
    """
    Logit-transforms an already clamped dataset and assigns 0-based indices.
    Years span the full range from the first to the last observed year.
    """
    if not dataset.records:
        return LogitData(provenance_flags=sorted(set(dataset.provenance_flags) | {"logit_ready"}))
    countries = sorted({r.country for r in dataset.records})
    vaccines = sorted({r.vaccine for r in dataset.records})
    first, last = min(r.year for r in dataset.records), max(r.year for r in dataset.records)
    years = list(range(first, last + 1))
    ci = {c: n for n, c in enumerate(countries)}
    vi = {v: n for n, v in enumerate(vaccines)}

    values = logit(np.array([r.coverage_pct for r in dataset.records]) / 100.0)
    observations = [
        LogitObservation(i=ci[r.country], j=vi[r.vaccine], t=r.year - first, source=r.source, y=float(y))
        for r, y in zip(dataset.records, values)
    ]
    return LogitData(
        observations=observations,
        countries=countries,
        vaccines=vaccines,
        years=years,
        regions={r.country: r.region for r in dataset.records},
        ratio_map=dataset.ratio_map,
        provenance_flags=sorted(set(dataset.provenance_flags) | {"logit_ready"}),
    )


def clamp_and_logit(dataset: ICDataset) -> LogitData:
    """Clamps proportions into [0.001, 0.999] and returns logit observations with index maps."""
    return to_logit_data(clamp_coverage(dataset))


def prepare_dataset(dataset: ICDataset, min_n: int = 300, ratio: bool = True) -> ICDataset:
    """Runs recall adjustment, survey selection, the DTP ratio (optional) and clamping."""
    dataset = recall_bias_adjust(dataset)
    dataset = select_survey_estimates(dataset, min_n=min_n)
    if ratio:
        dataset = apply_dtp_ratio(dataset)
    else:
        dataset = dataset.derive(dataset.records, add_flags=["ratio_skipped"])
    return clamp_coverage(dataset)


def yovi_filter(estimates: EstimateTable, yovi: YoviTable) -> EstimateTable:
    """Removes estimate rows dated before the vaccine's introduction year."""
    intro = yovi.lookup()
    known = yovi.countries()
    missing = sorted({row.country for row in estimates.rows} - known)
    if missing:
        logger.info(f"No introduction years for {', '.join(missing)}; keeping their estimates in full")
    kept = [row for row in estimates.rows if row.year >= intro.get((row.country, row.vaccine), row.year)]
    logger.info(f"yovi filter removed {len(estimates.rows) - len(kept)} estimate rows")
    return EstimateTable(rows=kept)
