import math
from typing import Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, Field, model_validator

from .configs import ChainConfig, ModelName, PriorConfig

QUANTILE_COLUMNS = ("2.5%", "50%", "97.5%")
ESTIMATE_COLUMNS = ["country", "vaccine", "year", "mean", *QUANTILE_COLUMNS, "prediction"]
REGIONAL_COLUMNS = ["region", "vaccine", "year", "mean", *QUANTILE_COLUMNS, "prediction"]


class EstimateRow(BaseModel):
    country: str
    vaccine: str
    year: int
    mean_pct: float
    q025_pct: float
    q50_pct: float
    q975_pct: float
    is_prediction: bool = False


class EstimateTable(BaseModel):
    """Posterior coverage summaries per (country, vaccine, year), in percent."""
    rows: List[EstimateRow] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        records = [
            {
                "country": r.country, "vaccine": r.vaccine, "year": r.year, "mean": r.mean_pct,
                "2.5%": r.q025_pct, "50%": r.q50_pct, "97.5%": r.q975_pct, "prediction": r.is_prediction,
            }
            for r in self.rows
        ]
        return pd.DataFrame(records, columns=ESTIMATE_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "EstimateTable":
        rows = [
            EstimateRow(
                country=str(rec["country"]), vaccine=str(rec["vaccine"]), year=int(rec["year"]),
                mean_pct=float(rec["mean"]), q025_pct=float(rec["2.5%"]), q50_pct=float(rec["50%"]),
                q975_pct=float(rec["97.5%"]), is_prediction=bool(rec["prediction"]),
            )
            for rec in frame.to_dict(orient="records")
        ]
        return cls(rows=rows)


class RegionalRow(BaseModel):
    region: str
    vaccine: str
    year: int
    mean_pct: float
    q025_pct: float
    q50_pct: float
    q975_pct: float
    is_prediction: bool = False


class RegionalTable(BaseModel):
    rows: List[RegionalRow] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        records = [
            {
                "region": r.region, "vaccine": r.vaccine, "year": r.year, "mean": r.mean_pct,
                "2.5%": r.q025_pct, "50%": r.q50_pct, "97.5%": r.q975_pct, "prediction": r.is_prediction,
            }
            for r in self.rows
        ]
        return pd.DataFrame(records, columns=REGIONAL_COLUMNS)


class WaicReport(BaseModel):
    """
    WAIC summary. gof is -2 * lppd, penalty is the variance-form effective
    number of parameters, and waic = gof + 2 * penalty.
    """
    gof: float
    penalty: float = Field(ge=0.0)
    waic: float
    n_observations: int = 0
    n_draws: int = 0

    @model_validator(mode="after")
    def _identity(self) -> "WaicReport":
        if not math.isclose(self.waic, self.gof + 2.0 * self.penalty, rel_tol=0.0, abs_tol=1e-9 * max(1.0, abs(self.waic))):
            raise ValueError(f"waic ({self.waic}) != gof + 2*penalty ({self.gof + 2.0 * self.penalty})")
        return self

    @classmethod
    def from_components(cls, gof: float, penalty: float, n_observations: int = 0, n_draws: int = 0) -> "WaicReport":
        return cls(gof=gof, penalty=penalty, waic=gof + 2.0 * penalty,
                   n_observations=n_observations, n_draws=n_draws)


class ParameterDiagnostic(BaseModel):
    name: str
    mean: float
    sd: float
    rhat: Optional[float] = None  # None when the within-chain variance is zero
    ess_bulk: Optional[float] = None


class DiagnosticsReport(BaseModel):
    parameters: List[ParameterDiagnostic] = Field(default_factory=list)
    rhat_threshold: float = 1.05

    @property
    def max_rhat(self) -> Optional[float]:
        values = [p.rhat for p in self.parameters if p.rhat is not None]
        return max(values) if values else None

    @property
    def passed(self) -> bool:
        worst = self.max_rhat
        return worst is None or worst < self.rhat_threshold

    def failing(self) -> List[str]:
        return [p.name for p in self.parameters if p.rhat is not None and p.rhat >= self.rhat_threshold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [p.model_dump() for p in self.parameters],
            columns=["name", "mean", "sd", "rhat", "ess_bulk"],
        ).rename(columns={"name": "parameter", "ess_bulk": "ess"})


class ValidationMetrics(BaseModel):
    """Point and interval accuracy of estimates against known truth, percent scale."""
    av_bias: float
    rmse: float
    mae: float
    coverage95: float
    correlation: float  # nan when either side is constant
    n: int

    def as_dict(self) -> Dict[str, float]:
        return {
            "AvBias": self.av_bias,
            "RMSE": self.rmse,
            "MAE": self.mae,
            "95% coverage": self.coverage95,
            "Correlation": self.correlation,
        }


class FitMetadata(BaseModel):
    """Everything a downstream stage needs to rebuild a fit from its directory."""
    model: ModelName
    label: str
    countries: List[str]
    vaccines: List[str]
    years: List[int]
    regions: Dict[str, str] = Field(default_factory=dict)
    ratio_map: Dict[str, List[str]] = Field(default_factory=dict)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    n_draws: int = 0
    rhat_passed: bool = True
    version: str = ""


METRIC_NAMES = ("AvBias", "RMSE", "MAE", "95% coverage", "Correlation")


class ExperimentCell(BaseModel):
    model: ModelName
    horizon: str
    metrics: ValidationMetrics
    rhat_passed: bool = True

    @property
    def column(self) -> str:
        return f"{self.model.upper()} {self.horizon}"


class ExperimentReport(BaseModel):
    """Validation statistics of one simulation run, one cell per (model, horizon)."""
    scenario: str
    mode: str
    seed: int
    dims: Tuple[int, int, int]
    base_years: int
    cells: List[ExperimentCell] = Field(default_factory=list)
    annotations: List[str] = Field(default_factory=list)

    def metrics(self, model: str, horizon: str) -> ValidationMetrics:
        for cell in self.cells:
            if cell.model == model and cell.horizon == horizon:
                return cell.metrics
        raise KeyError(f"no result for {model} {horizon}")

    def to_frame(self) -> pd.DataFrame:
        """Rows are the metrics, columns are '<MODEL> <horizon>'."""
        data = {cell.column: [cell.metrics.as_dict()[name] for name in METRIC_NAMES] for cell in self.cells}
        return pd.DataFrame(data, index=list(METRIC_NAMES))

    def to_text(self) -> str:
        C, V, T = self.dims
        lines = [
            f"scenario: {self.scenario}",
            f"dims: C={C} V={V} T={T}, base years {self.base_years}, mode {self.mode}, seed {self.seed}",
            "",
            self.to_frame().to_string(float_format=lambda value: f"{value:.2f}"),
        ]
        lines.extend(f"note: {note}" for note in self.annotations)
        return "\n".join(lines) + "\n"
