import textwrap
from pathlib import Path

import numpy as np
import pytest

from src.coverage_model.core.model import ModelDims, ObservationData
from src.coverage_model.models.configs import ChainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long statistical checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def _write_csv(directory: Path, name: str, body: str) -> Path:
    path = directory / name
    path.write_text(textwrap.dedent(body).lstrip("\n"), encoding="utf-8")
    return path


@pytest.fixture
def write_csv(tmp_path: Path):
    """Writes a dedented CSV body under tmp_path and returns its path."""
    def writer(name: str, body: str) -> Path:
        return _write_csv(tmp_path, name, body)
    return writer


@pytest.fixture
def coverage_csv(tmp_path: Path) -> Path:
    return _write_csv(tmp_path, "coverage.csv", """
        code,region,year,antigen,coverage_category,coverage
        NGA,AFR,2006,DTPCV1,admin,73.0
        NGA,AFR,2006,DTPCV3,admin,58.4
        NGA,AFR,2006,DTPCV1,official,70.0
        NGA,AFR,2006,DTPCV3,official,56.0
        NGA,AFR,2007,DTPCV1,admin,104.0
        NGA,AFR,2007,DTPCV3,admin,101.92
        NGA,AFR,2007,MCV1,admin,
        NGA,AFR,2007,MCV1,wuenic,60.0
        GHA,AFRO,2006,MCV1,admin,90.0
        GHA,AFRO,2007,MCV1,admin,100.0
    """)


@pytest.fixture
def survey_csv(tmp_path: Path) -> Path:
    return _write_csv(tmp_path, "survey.csv", """
        code,region,year,antigen,coverage,sample_size,evidence,validity,survey_id
        NGA,AFR,2006,DTP3,40.0,4200,Card or History,crude,DHS2008
        NGA,AFR,2006,DTP3,50.0,4200,Card,crude,DHS2008
        NGA,AFR,2006,DTP1,80.0,4200,Card or History,crude,DHS2008
        NGA,AFR,2006,DTP1,70.0,4200,Card,crude,DHS2008
        GHA,AFR,2006,MCV1,88.0,250,Card or History,crude,MICS2007
        GHA,AFR,2007,MCV1,91.0,900,Card or History,valid,MICS2008
    """)


@pytest.fixture
def small_chain() -> ChainConfig:
    """Short chains for smoke runs; not long enough for convergence checks."""
    return ChainConfig(n_chains=2, iterations=60, warmup=30, seed=11)


@pytest.fixture
def tiny_observations() -> ObservationData:
    """Two countries, two vaccines, three years, every source observed at least once."""
    rng = np.random.default_rng(5)
    dims = ModelDims(C=2, V=2, T=3)
    k, i, j, t = (axis.ravel() for axis in np.indices((3, 2, 2, 3)))
    keep = rng.uniform(size=k.size) > 0.3
    keep[:3] = True
    y = rng.normal(0.5, 0.8, size=int(keep.sum()))
    return ObservationData(dims=dims, k=k[keep], i=i[keep], j=j[keep], t=t[keep], y=y)
