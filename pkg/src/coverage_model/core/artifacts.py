# src/coverage_model/core/artifacts.py
"""
On-disk layout of a fitted model, one directory per region (or ALL when pooled):

    draws.csv         one row per retained draw: chain, draw, then one column per scalar
    diagnostics.csv   parameter, mean, sd, rhat, ess
    estimates.csv     coverage summaries
    observations.csv  the logit observations the model was fitted to
    fit.json          FitMetadata
"""
import itertools
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..models.records import SourceKind
from ..models.reports import DiagnosticsReport, EstimateTable, FitMetadata
from .errors import ArtifactError
from .model import Hyperparams, LatentField, ModelDims, ModelKind, ObservationData
from .sampler import Draws

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
DRAWS_FILE = "draws.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
ESTIMATES_FILE = "estimates.csv"
OBSERVATIONS_FILE = "observations.csv"
METADATA_FILE = "fit.json"

PathLike = Union[str, Path]


def _scalar_names(name: str, shape: Tuple[int, ...]) -> List[str]:
    if not shape:
        return [name]
    return [f"{name}[{','.join(str(i + 1) for i in index)}]"
            for index in itertools.product(*(range(n) for n in shape))]


def draws_to_frame(draws: Draws) -> pd.DataFrame:
    """Wide table: chain and draw columns, then every latent scalar, then the hyperparameters."""
    m, n = draws.n_chains, draws.n_draws
    columns: Dict[str, np.ndarray] = {
        "chain": np.repeat(np.arange(1, m + 1), n),
        "draw": np.tile(np.arange(1, n + 1), m),
    }
    for name, values in draws.latent.items():
        flat = values.reshape(m * n, -1)
        for position, label in enumerate(_scalar_names(name, values.shape[2:])):
            columns[label] = flat[:, position]
    for name, values in draws.hyper.items():
        columns[name] = values.reshape(m * n)
    return pd.DataFrame(columns)


def draws_from_frame(frame: pd.DataFrame, model: ModelKind, dims: ModelDims) -> Draws:
    """
    Rebuilds Draws from draws_to_frame output.

    Raises:
        ArtifactError: If an expected column is missing.
    """
    model = ModelKind(model)
    m = int(frame["chain"].max())
    n = len(frame) // m
    template = LatentField.zeros(dims).components(model)
    latent = {}
    try:
        for name, value in template.items():
            shape = np.shape(value)
            labels = _scalar_names(name, shape)
            latent[name] = frame[labels].to_numpy(dtype=float).reshape((m, n) + shape)
        hyper = {name: frame[name].to_numpy(dtype=float).reshape(m, n) for name in Hyperparams.names(model)}
    except KeyError as exc:
        raise ArtifactError(f"draws file lacks column(s) {exc}") from None
    return Draws(model=model, dims=dims, latent=latent, hyper=hyper)


def observations_to_frame(data: ObservationData, meta: FitMetadata) -> pd.DataFrame:
    sources = [k.value for k in SourceKind.ordered()]
    return pd.DataFrame({
        "source": [sources[k] for k in data.k],
        "country": [meta.countries[i] for i in data.i],
        "vaccine": [meta.vaccines[j] for j in data.j],
        "year": [meta.years[t] for t in data.t],
        "y": data.y,
    })


def observations_from_frame(frame: pd.DataFrame, meta: FitMetadata) -> ObservationData:
    sources = {k.value: n for n, k in enumerate(SourceKind.ordered())}
    ci = {c: n for n, c in enumerate(meta.countries)}
    vi = {v: n for n, v in enumerate(meta.vaccines)}
    first = meta.years[0]
    try:
        return ObservationData(
            dims=ModelDims(len(meta.countries), len(meta.vaccines), len(meta.years)),
            k=[sources[s] for s in frame["source"]],
            i=[ci[c] for c in frame["country"]],
            j=[vi[v] for v in frame["vaccine"]],
            t=[int(y) - first for y in frame["year"]],
            y=frame["y"].to_numpy(dtype=float),
        )
    except KeyError as exc:
        raise ArtifactError(f"observations file does not match fit metadata: unknown {exc}") from None


def write_fit(directory: PathLike, meta: FitMetadata, draws: Draws, report: DiagnosticsReport,
              estimates: EstimateTable, data: ObservationData) -> Path:
    """Writes every artifact of one fit into `directory` and returns it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    draws_to_frame(draws).to_csv(directory / DRAWS_FILE, index=False, float_format=FLOAT_FORMAT)
    report.to_frame().to_csv(directory / DIAGNOSTICS_FILE, index=False, float_format=FLOAT_FORMAT)
    estimates.to_frame().to_csv(directory / ESTIMATES_FILE, index=False, float_format=FLOAT_FORMAT)
    observations_to_frame(data, meta).to_csv(directory / OBSERVATIONS_FILE, index=False, float_format=FLOAT_FORMAT)
    (directory / METADATA_FILE).write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote fit '{meta.label}' to {directory}")
    return directory


def read_metadata(directory: PathLike) -> FitMetadata:
    path = Path(directory) / METADATA_FILE
    if not path.is_file():
        raise ArtifactError(f"fit metadata not found: {path}")
    try:
        return FitMetadata.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ArtifactError(f"invalid fit metadata in {path}: {exc}") from None


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not path.is_file():
        raise ArtifactError(f"artifact not found: {path}")
    return pd.read_csv(path, **kwargs)


def load_fit(directory: PathLike) -> Tuple[FitMetadata, Draws, ObservationData]:
    """
    Loads what a downstream stage needs from a fit directory.

    Raises:
        ArtifactError: If a file is missing or inconsistent.
    """
    directory = Path(directory)
    meta = read_metadata(directory)
    dims = ModelDims(len(meta.countries), len(meta.vaccines), len(meta.years))
    draws = draws_from_frame(_read_csv(directory / DRAWS_FILE), ModelKind(meta.model), dims)
    observations = _read_csv(directory / OBSERVATIONS_FILE, dtype={"source": str, "country": str, "vaccine": str},
                             keep_default_na=False)
    data = observations_from_frame(observations, meta)
    logger.info(f"Loaded fit '{meta.label}' ({draws.total} draws) from {directory}")
    return meta, draws, data


def find_fit_dirs(root: PathLike) -> List[Path]:
    """Fit directories under `root` (root itself if it is one), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise ArtifactError(f"fit directory not found: {root}")
    if (root / METADATA_FILE).is_file():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / METADATA_FILE).is_file())
    if not found:
        raise ArtifactError(f"no fit directories (with {METADATA_FILE}) under {root}")
    return found


def read_estimates(directory: PathLike) -> EstimateTable:
    frame = _read_csv(Path(directory) / ESTIMATES_FILE, dtype={"country": str, "vaccine": str}, keep_default_na=False)
    return EstimateTable.from_frame(frame)
