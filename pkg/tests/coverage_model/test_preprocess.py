import math
from typing import Optional

import numpy as np
import pytest
from scipy.special import expit

from src.coverage_model.core.preprocess import (
    apply_dtp_ratio,
    apply_ratio,
    clamp_and_logit,
    clamp_coverage,
    prepare_dataset,
    recall_bias_adjust,
    select_survey_estimates,
    yovi_filter,
)
from src.coverage_model.models.records import (
    CoverageRecord,
    Evidence,
    ICDataset,
    SourceKind,
    Validity,
    YoviRow,
    YoviTable,
)
from src.coverage_model.models.reports import EstimateRow, EstimateTable

LOGIT_UPPER = math.log(999.0)


def _survey(vaccine: str, pct: float, evidence: Evidence, n: Optional[int] = 1000,
            validity: Optional[Validity] = Validity.CRUDE, year: int = 2010, survey_id: Optional[str] = "S1",
            country: str = "KEN") -> CoverageRecord:
    return CoverageRecord(country=country, region="AFR", vaccine=vaccine, year=year, source=SourceKind.SURVEY,
                          coverage_pct=pct, sample_size=n, evidence=evidence, validity=validity, survey_id=survey_id)


def _reported(vaccine: str, pct: float, source: SourceKind = SourceKind.ADMIN, year: int = 2010,
              country: str = "KEN") -> CoverageRecord:
    return CoverageRecord(country=country, region="AFR", vaccine=vaccine, year=year, source=source, coverage_pct=pct)


def _recall_group(vd3_card=50.0, vd1_history=80.0, vd1_card=70.0, vd3_history=45.0):
    return ICDataset(records=[
        _survey("DTP3", vd3_history, Evidence.CARD_OR_HISTORY),
        _survey("DTP3", vd3_card, Evidence.CARD),
        _survey("DTP1", vd1_history, Evidence.CARD_OR_HISTORY),
        _survey("DTP1", vd1_card, Evidence.CARD),
    ])


class TestRecallBiasAdjust:

    def test_formula(self):
        adjusted = recall_bias_adjust(_recall_group())
        target = adjusted.records[0]
        assert target.coverage_pct == pytest.approx(50.0 * 80.0 / 70.0, abs=1e-12)
        assert target.coverage_pct == pytest.approx(57.142857142857, abs=1e-9)
        assert target.recall_adjusted
        assert "recall_adjusted" in adjusted.provenance_flags

    def test_equal_first_doses_gives_card_value(self):
        adjusted = recall_bias_adjust(_recall_group(vd1_history=70.0, vd1_card=70.0))
        assert adjusted.records[0].coverage_pct == 50.0

    def test_missing_input_keeps_value(self):
        dataset = ICDataset(records=_recall_group().records[:3])
        adjusted = recall_bias_adjust(dataset)
        assert adjusted.records[0].coverage_pct == 45.0
        assert not adjusted.records[0].recall_adjusted
        assert "recall_adjusted" in adjusted.provenance_flags
        assert adjusted.processing_log[-1].reason == "recall_inputs_missing"

    def test_zero_card_first_dose_is_skipped(self):
        adjusted = recall_bias_adjust(_recall_group(vd1_card=0.0))
        assert adjusted.records[0].coverage_pct == 45.0
        assert adjusted.processing_log[-1].reason == "zero_card_first_dose"

    def test_groups_by_survey(self):
        records = _recall_group().records[:2] + [
            _survey("DTP1", 80.0, Evidence.CARD_OR_HISTORY, survey_id="S2"),
            _survey("DTP1", 70.0, Evidence.CARD, survey_id="S2"),
        ]
        adjusted = recall_bias_adjust(ICDataset(records=records))
        assert adjusted.records[0].coverage_pct == 45.0

    def test_idempotent(self):
        once = recall_bias_adjust(_recall_group())
        twice = recall_bias_adjust(once)
        assert [r.coverage_pct for r in twice.records] == [r.coverage_pct for r in once.records]

    def test_prefers_valid_inputs(self):
        records = _recall_group().records + [_survey("DTP3", 60.0, Evidence.CARD, validity=Validity.VALID)]
        adjusted = recall_bias_adjust(ICDataset(records=records))
        assert adjusted.records[0].coverage_pct == pytest.approx(60.0 * 80.0 / 70.0)


class TestSelectSurveyEstimates:

    def test_small_crude_singleton_dropped(self):
        dataset = ICDataset(records=[_survey("MCV1", 88.0, Evidence.CARD_OR_HISTORY, n=250)])
        selected = select_survey_estimates(dataset)
        assert len(selected) == 0
        assert selected.processing_log[0].reason == "not_acceptable"

    def test_small_valid_singleton_kept(self):
        dataset = ICDataset(records=[_survey("MCV1", 88.0, Evidence.CARD, n=120, validity=Validity.VALID)])
        assert len(select_survey_estimates(dataset)) == 1

    def test_card_or_history_preferred(self):
        dataset = ICDataset(records=[
            _survey("MCV1", 70.0, Evidence.CARD, n=5000),
            _survey("MCV1", 85.0, Evidence.CARD_OR_HISTORY, n=400),
        ])
        selected = select_survey_estimates(dataset)
        assert [r.coverage_pct for r in selected.records] == [85.0]

    def test_largest_sample_wins(self):
        dataset = ICDataset(records=[
            _survey("MCV1", 80.0, Evidence.CARD_OR_HISTORY, n=400),
            _survey("MCV1", 82.0, Evidence.CARD_OR_HISTORY, n=900),
        ])
        assert [r.sample_size for r in select_survey_estimates(dataset).records] == [900]

    def test_first_valid_when_sizes_missing(self):
        dataset = ICDataset(records=[
            _survey("MCV1", 80.0, Evidence.CARD, n=None, validity=Validity.VALID, survey_id="A"),
            _survey("MCV1", 81.0, Evidence.CARD, n=None, validity=Validity.VALID, survey_id="B"),
        ])
        assert [r.survey_id for r in select_survey_estimates(dataset).records] == ["A"]

    def test_adjusted_estimates_supersede(self):
        adjusted = recall_bias_adjust(_recall_group())
        selected = select_survey_estimates(adjusted)
        dtp3 = [r for r in selected.records if r.vaccine == "DTP3"]
        assert len(dtp3) == 1 and dtp3[0].recall_adjusted
        assert "superseded_by_adjusted" in {e.reason for e in selected.processing_log}

    def test_reported_sources_untouched(self):
        dataset = ICDataset(records=[_reported("MCV1", 90.0), _survey("MCV1", 88.0, Evidence.CARD, n=10)])
        selected = select_survey_estimates(dataset)
        assert [r.source for r in selected.records] == [SourceKind.ADMIN]


class TestRatio:

    def test_denominator_above_100(self):
        result = apply_dtp_ratio(ICDataset(records=[_reported("DTP1", 104.0), _reported("DTP3", 101.92)]))
        by_vaccine = {r.vaccine: r for r in result.records}
        assert by_vaccine["DTP1"].coverage_pct == 99.9
        assert by_vaccine["DTP3_RATIO"].coverage_pct == pytest.approx(98.0, abs=1e-12)
        assert by_vaccine["DTP3_RATIO"].ratio_denominator == "DTP1"
        assert result.ratio_map == {"DTP3_RATIO": ("DTP1", "DTP3")}
        assert "ratio_applied" in result.provenance_flags

    def test_halving(self):
        result = apply_dtp_ratio(ICDataset(records=[_reported("DTP1", 90.0), _reported("DTP3", 45.0)]))
        assert result.records[1].coverage_pct == pytest.approx(50.0, abs=1e-12)

    def test_equal_doses_clamped_later(self):
        result = apply_dtp_ratio(ICDataset(records=[_reported("DTP1", 80.0), _reported("DTP3", 80.0)]))
        assert result.records[1].coverage_pct == 100.0
        clamped = clamp_coverage(result)
        assert clamped.records[1].coverage_pct == pytest.approx(99.9, abs=1e-12)

    def test_ratio_above_one_capped(self):
        result = apply_dtp_ratio(ICDataset(records=[_reported("DTP1", 60.0), _reported("DTP3", 66.0)]))
        assert result.records[1].coverage_pct == pytest.approx(99.9, abs=1e-12)
        assert result.processing_log[0].reason == "ratio_above_one"

    def test_numerator_without_denominator_dropped(self):
        result = apply_dtp_ratio(ICDataset(records=[
            _reported("DTP3", 45.0),
            _reported("DTP1", 90.0, source=SourceKind.OFFICIAL),
        ]))
        assert [r.vaccine for r in result.records] == ["DTP1"]
        assert result.processing_log[0].reason == "missing_denominator"

    def test_matches_per_source(self):
        result = apply_dtp_ratio(ICDataset(records=[
            _reported("DTP1", 90.0), _reported("DTP3", 45.0),
            _reported("DTP1", 80.0, source=SourceKind.OFFICIAL), _reported("DTP3", 60.0, source=SourceKind.OFFICIAL),
        ]))
        ratios = {r.source: r.coverage_pct for r in result.records if r.vaccine == "DTP3_RATIO"}
        assert ratios == {SourceKind.ADMIN: pytest.approx(50.0), SourceKind.OFFICIAL: pytest.approx(75.0)}

    def test_other_pair(self):
        result = apply_ratio(ICDataset(records=[_reported("MCV1", 90.0), _reported("MCV2", 72.0)]),
                             numerator="MCV2", denominator="MCV1")
        assert result.ratio_map == {"MCV2_RATIO": ("MCV1", "MCV2")}
        assert result.records[1].coverage_pct == pytest.approx(80.0)

    def test_round_trip_to_numerator(self):
        dtp1, dtp3 = 88.0, 61.6
        result = apply_dtp_ratio(ICDataset(records=[_reported("DTP1", dtp1), _reported("DTP3", dtp3)]))
        ratio = result.records[1].coverage_pct / 100.0
        assert dtp1 * ratio == pytest.approx(dtp3, abs=1e-12)


class TestClampAndLogit:

    def test_examples(self):
        dataset = ICDataset(records=[
            _reported("MCV1", 50.0, year=2010),
            _reported("MCV1", 100.0, year=2011),
            _reported("MCV1", 0.05, year=2012),
        ])
        data = clamp_and_logit(dataset)
        y = [obs.y for obs in data.observations]
        assert y[0] == pytest.approx(0.0, abs=1e-12)
        assert y[1] == pytest.approx(LOGIT_UPPER, abs=1e-12)
        assert y[2] == pytest.approx(-LOGIT_UPPER, abs=1e-12)
        assert y[1] == pytest.approx(6.906754778648554, abs=1e-12)

    def test_index_maps(self):
        dataset = ICDataset(records=[
            _reported("MCV1", 60.0, year=2012, country="UGA"),
            _reported("DTP1", 70.0, year=2010, country="KEN"),
            _survey("DTP1", 75.0, Evidence.CARD, year=2014, country="KEN"),
        ])
        data = clamp_and_logit(dataset)
        assert data.countries == ["KEN", "UGA"]
        assert data.vaccines == ["DTP1", "MCV1"]
        assert data.years == [2010, 2011, 2012, 2013, 2014]
        first = data.observations[0]
        assert (first.i, first.j, first.t) == (1, 1, 2)
        assert data.observations[2].source == SourceKind.SURVEY
        assert "logit_ready" in data.provenance_flags

    def test_inverse_round_trip(self):
        p = np.linspace(0.001, 0.999, 101)
        dataset = ICDataset(records=[_reported("MCV1", 100.0 * v, year=2000 + n) for n, v in enumerate(p)])
        y = np.array([obs.y for obs in clamp_and_logit(dataset).observations])
        assert np.max(np.abs(expit(y) - p)) < 1e-12


class TestPrepareAndYovi:

    def test_no_ratio_flag(self):
        dataset = ICDataset(records=[_reported("DTP1", 90.0), _reported("DTP3", 45.0)])
        prepared = prepare_dataset(dataset, ratio=False)
        assert "ratio_skipped" in prepared.provenance_flags
        assert "ratio_applied" not in prepared.provenance_flags
        assert {r.vaccine for r in prepared.records} == {"DTP1", "DTP3"}

    def test_full_chain_flags(self):
        prepared = prepare_dataset(_recall_group())
        assert {"recall_adjusted", "survey_selected", "ratio_applied", "clamped"} <= prepared.provenance_flags

    @staticmethod
    def _estimates(country: str, vaccine: str, years) -> EstimateTable:
        return EstimateTable(rows=[
            EstimateRow(country=country, vaccine=vaccine, year=y, mean_pct=80.0, q025_pct=70.0, q50_pct=80.0,
                        q975_pct=90.0)
            for y in years
        ])

    def test_yovi_threshold(self):
        yovi = YoviTable(rows=[YoviRow(country="NGA", vaccine="PCV3", intro_year=2014)])
        filtered = yovi_filter(self._estimates("NGA", "PCV3", range(2000, 2020)), yovi)
        assert [row.year for row in filtered.rows] == list(range(2014, 2020))

    def test_yovi_untouched_cases(self):
        yovi = YoviTable(rows=[YoviRow(country="NGA", vaccine="PCV3", intro_year=1995)])
        assert len(yovi_filter(self._estimates("NGA", "PCV3", range(2000, 2020)), yovi)) == 20
        assert len(yovi_filter(self._estimates("NGA", "DTP1", range(2000, 2020)), yovi)) == 20
        assert len(yovi_filter(self._estimates("GHA", "PCV3", range(2000, 2020)), yovi)) == 20
