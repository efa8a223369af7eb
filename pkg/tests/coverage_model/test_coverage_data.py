from pathlib import Path

import pytest

from src.coverage_model.core.coverage_data import (
    merge_and_filter,
    parse_coverage_csv,
    parse_survey_csv,
    read_dataset_csv,
    read_denominators_csv,
    read_yovi_csv,
    write_dataset_csv,
)
from src.coverage_model.core.errors import DataParseError, DuplicateRecordError
from src.coverage_model.models.configs import ColumnMapping
from src.coverage_model.models.records import CoverageRecord, Evidence, ICDataset, SourceKind, Validity


def _admin(country="NGA", vaccine="DTP1", year=2006, pct=80.0, source=SourceKind.ADMIN) -> CoverageRecord:
    return CoverageRecord(country=country, region="AFR", vaccine=vaccine, year=year, source=source, coverage_pct=pct)


class TestParseCoverage:

    def test_aliases_and_categories(self, coverage_csv: Path):
        dataset = parse_coverage_csv(coverage_csv)
        first = dataset.records[0]
        assert (first.country, first.vaccine, first.year, first.source, first.coverage_pct) == \
            ("NGA", "DTP1", 2006, SourceKind.ADMIN, 73.0)
        assert {r.vaccine for r in dataset.records} == {"DTP1", "DTP3", "MCV1"}
        assert {r.region for r in dataset.records} == {"AFR"}

    def test_lossless_modulo_drops(self, coverage_csv: Path):
        dataset = parse_coverage_csv(coverage_csv)
        assert len(dataset) == 8
        reasons = sorted(entry.reason for entry in dataset.processing_log)
        assert reasons == ["category_excluded", "missing_coverage"]
        assert len(dataset) + len(dataset.processing_log) == 10

    def test_single_kind(self, coverage_csv: Path):
        dataset = parse_coverage_csv(coverage_csv, kind="official")
        assert len(dataset) == 2
        assert all(r.source == SourceKind.OFFICIAL for r in dataset.records)

    def test_header_only_file(self, write_csv):
        path = write_csv("empty.csv", "code,region,year,antigen,coverage_category,coverage\n")
        dataset = parse_coverage_csv(path)
        assert len(dataset) == 0
        assert dataset.processing_log == []

    def test_non_numeric_coverage_names_line(self, write_csv):
        path = write_csv("bad.csv", """
            code,region,year,antigen,coverage_category,coverage
            NGA,AFR,2006,DTP1,admin,73.0
            NGA,AFR,2007,DTP1,admin,seventy
        """)
        with pytest.raises(DataParseError) as excinfo:
            parse_coverage_csv(path)
        assert excinfo.value.line == 3
        assert "non-numeric coverage 'seventy'" in str(excinfo.value)

    def test_unknown_region(self, write_csv):
        path = write_csv("region.csv", """
            code,region,year,antigen,coverage_category,coverage
            NGA,XYZ,2006,DTP1,admin,73.0
        """)
        with pytest.raises(DataParseError) as excinfo:
            parse_coverage_csv(path)
        assert "unknown WHO region code 'XYZ'" in str(excinfo.value)
        assert excinfo.value.line == 2

    def test_missing_file_names_path(self, tmp_path: Path):
        missing = tmp_path / "nope.csv"
        with pytest.raises(FileNotFoundError) as excinfo:
            parse_coverage_csv(missing)
        assert str(missing) in str(excinfo.value)

    def test_custom_column_names(self, write_csv):
        path = write_csv("renamed.csv", """
            iso3,who_region,yr,vaccine_code,category,value
            KEN,AFR,2010,MCV1,admin,85.5
        """)
        columns = ColumnMapping(country="iso3", region="who_region", year="yr", vaccine="vaccine_code",
                                category="category", coverage="value")
        dataset = parse_coverage_csv(path, columns=columns)
        assert dataset.records[0].label() == "KEN/MCV1/2010/admin"


class TestParseSurvey:

    def test_field_mapping(self, survey_csv: Path):
        dataset = parse_survey_csv(survey_csv)
        assert len(dataset) == 6
        first = dataset.records[0]
        assert first.evidence == Evidence.CARD_OR_HISTORY
        assert first.sample_size == 4200
        assert first.survey_id == "DHS2008"
        assert dataset.records[-1].validity == Validity.VALID

    def test_same_key_rows_kept(self, write_csv):
        path = write_csv("dupes.csv", """
            code,region,year,antigen,coverage,sample_size,evidence,validity
            GHA,AFR,2006,MCV1,88.0,250,Card,crude
            GHA,AFR,2006,MCV1,86.0,1250,Card,crude
        """)
        dataset = parse_survey_csv(path)
        assert [r.sample_size for r in dataset.records] == [250, 1250]
        assert all(r.survey_id is None for r in dataset.records)

    def test_unknown_evidence(self, write_csv):
        path = write_csv("evidence.csv", """
            code,region,year,antigen,coverage,sample_size,evidence,validity
            GHA,AFR,2006,MCV1,88.0,250,Recall,crude
        """)
        with pytest.raises(DataParseError) as excinfo:
            parse_survey_csv(path)
        assert "unknown evidence 'Recall'" in str(excinfo.value)


class TestMergeAndFilter:

    def test_drop_zero_and_year_range(self):
        records = [_admin(pct=0.0), _admin(year=2007), _admin(year=2020)]
        merged = merge_and_filter([ICDataset(records=records)], years=(2000, 2019))
        assert [r.year for r in merged.records] == [2007]
        assert sorted(e.reason for e in merged.processing_log) == ["year_excluded", "zero_coverage"]

    def test_keep_zero(self):
        merged = merge_and_filter([ICDataset(records=[_admin(pct=0.0)])], drop_zero=False)
        assert len(merged) == 1

    def test_vaccine_restriction_uses_aliases(self):
        records = [_admin(vaccine="DTP1"), _admin(vaccine="BCG")]
        merged = merge_and_filter([ICDataset(records=records)], vaccines=["DTPCV1"])
        assert [r.vaccine for r in merged.records] == ["DTP1"]

    def test_sorted_and_idempotent(self, coverage_csv: Path, survey_csv: Path):
        merged = merge_and_filter([parse_survey_csv(survey_csv), parse_coverage_csv(coverage_csv)])
        keys = [r.sort_key for r in merged.records]
        assert keys == sorted(keys)
        again = merge_and_filter([merged])
        assert again.records == merged.records

    def test_duplicate_admin_keys(self):
        with pytest.raises(DuplicateRecordError) as excinfo:
            merge_and_filter([ICDataset(records=[_admin()]), ICDataset(records=[_admin(pct=81.0)])])
        assert excinfo.value.keys == [("NGA", "DTP1", 2006, "admin")]
        assert "NGA,DTP1,2006,admin" in str(excinfo.value)


class TestDatasetFiles:

    def test_round_trip_keeps_flags(self, tmp_path: Path, survey_csv: Path):
        dataset = parse_survey_csv(survey_csv).derive(parse_survey_csv(survey_csv).records,
                                                       add_flags=["survey_selected"])
        path = tmp_path / "out" / "dataset.csv"
        write_dataset_csv(dataset, path)
        assert path.read_text(encoding="utf-8").startswith("# provenance: survey_selected\n")
        loaded = read_dataset_csv(path)
        assert loaded.records == dataset.records
        assert loaded.provenance_flags == {"survey_selected"}

    def test_missing_provenance_line(self, write_csv):
        path = write_csv("plain.csv", "country,region\n")
        with pytest.raises(DataParseError) as excinfo:
            read_dataset_csv(path)
        assert excinfo.value.line == 1

    def test_denominators(self, write_csv):
        path = write_csv("pop.csv", """
            code,antigen,year,target_population
            NGA,DTPCV3,2006,6000000
            GHA,MCV1,2006,800000
        """)
        table = read_denominators_csv(path)
        assert table.lookup()[("NGA", "DTP3", 2006)] == 6000000.0

    def test_non_positive_denominator(self, write_csv):
        path = write_csv("pop.csv", """
            code,antigen,year,target_population
            NGA,DTP3,2006,0
        """)
        with pytest.raises(DataParseError) as excinfo:
            read_denominators_csv(path)
        assert "target_population must be positive" in str(excinfo.value)

    def test_yovi(self, write_csv):
        path = write_csv("yovi.csv", """
            code,antigen,intro_year
            NGA,PCV3,2014
        """)
        table = read_yovi_csv(path)
        assert table.lookup() == {("NGA", "PCV3"): 2014}
        assert table.countries() == {"NGA"}
