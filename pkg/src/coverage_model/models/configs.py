from typing import Any, Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ModelName = Literal["bdsl", "idml"]
BlockingMode = Literal["joint", "single"]


class ColumnMapping(BaseModel):
    """Maps column roles to the header names used by a particular CSV export."""
    country: str = "code"
    region: str = "region"
    year: str = "year"
    vaccine: str = "antigen"
    category: str = "coverage_category"
    coverage: str = "coverage"
    sample_size: str = "sample_size"
    evidence: str = "evidence"
    validity: str = "validity"
    survey_id: str = "survey_id"


class ChainConfig(BaseModel):
    n_chains: int = Field(default=4, ge=1)
    iterations: int = Field(default=4000, ge=1)
    warmup: int = Field(default=2000, ge=0)
    thin: int = Field(default=1, ge=1)
    seed: int = Field(default=20220101, ge=0, lt=2**64)
    init_jitter: float = Field(default=0.5, ge=0.0)
    blocking: BlockingMode = "joint"
    n_workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _warmup_before_end(self) -> "ChainConfig":
        if self.warmup >= self.iterations:
            raise ValueError(f"warmup ({self.warmup}) must be smaller than iterations ({self.iterations})")
        return self

    @property
    def draws_per_chain(self) -> int:
        return len(range(0, self.iterations - self.warmup, self.thin))

    @property
    def total_draws(self) -> int:
        return self.n_chains * self.draws_per_chain


class PriorConfig(BaseModel):
    """
    Prior settings for both models.

    Source intercepts get normal priors, source and residual scales get
    half-Cauchy priors (the survey scale optionally truncated at sigma3_upper),
    and the remaining random-effect scales get a uniform prior on
    (0, flat_scale_upper]. Every autocorrelation is uniform on (-1, 1).
    """
    lambda_src_var: Tuple[float, float, float] = (0.25, 0.25, 0.25)
    sigma_src_scale: Tuple[float, float, float] = (2.0, 2.0, 0.2)
    sigma3_upper: Optional[float] = 0.4
    lambda_var: float = 1.0
    sigma_scale: float = 2.0
    sigma_nu_scale: float = 2.0
    flat_scale_upper: float = 100.0

    @field_validator("lambda_src_var", "sigma_src_scale")
    @classmethod
    def _positive_triple(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v <= 0 for v in value):
            raise ValueError(f"prior variances and scales must be positive, got {value}")
        return value

    @field_validator("lambda_var", "sigma_scale", "sigma_nu_scale", "flat_scale_upper")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"prior variances and scales must be positive, got {value}")
        return value

    @field_validator("sigma3_upper")
    @classmethod
    def _positive_upper(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError(f"sigma3 upper bound must be positive, got {value}")
        return value

    @classmethod
    def unrestricted(cls) -> "PriorConfig":
        """Half-Cauchy(0, 2) on every source scale with no truncation."""
        return cls(sigma_src_scale=(2.0, 2.0, 2.0), sigma3_upper=None)


class ScenarioSpec(BaseModel):
    """True parameter values and data-generation settings for one synthetic scenario."""
    model_config = ConfigDict(frozen=True)

    name: str
    sigma2_beta: float = 1.0
    sigma2_alpha: float = 1.0
    rho_gamma: float = 0.5
    sigma2_gamma: float = 1.0
    rho_phi: float = 0.3
    sigma2_phi: float = 0.25
    rho_delta: float = 0.4
    sigma2_delta: float = 0.64
    sigma2_psi: float = 1.0
    rho_omega: float = 0.7
    sigma2_omega: float = 0.64
    lambda_src: Tuple[float, float, float] = (0.07, 0.02, 0.05)
    lambda_bdsl: float = 0.05
    sigma2_bdsl: float = 1.0
    source_var: Tuple[float, float, float] = (1.0, 0.64, 0.16)
    sigma2_nu: float = 0.6
    missing_rates: Tuple[float, float, float] = (0.15, 0.15, 0.20)
    late_starts: Tuple[int, ...] = (10, 15)
    n_late_vaccines: int = Field(default=2, ge=0)

    @field_validator("missing_rates")
    @classmethod
    def _rates_in_unit_interval(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 or r > 1 for r in value):
            raise ValueError(f"missingness rates must lie in [0, 1], got {value}")
        return value

    @model_validator(mode="after")
    def _valid_truth(self) -> "ScenarioSpec":
        variances = [
            self.sigma2_beta, self.sigma2_alpha, self.sigma2_gamma, self.sigma2_phi,
            self.sigma2_delta, self.sigma2_psi, self.sigma2_omega, self.sigma2_bdsl,
            self.sigma2_nu, *self.source_var,
        ]
        if any(v <= 0 for v in variances):
            raise ValueError(f"scenario '{self.name}' has a non-positive variance")
        for rho in (self.rho_gamma, self.rho_phi, self.rho_delta, self.rho_omega):
            if abs(rho) >= 1:
                raise ValueError(f"scenario '{self.name}' has |rho| >= 1 ({rho})")
        if any(start < 1 for start in self.late_starts):
            raise ValueError("late vaccine start indices are 1-based and must be >= 1")
        return self

    @classmethod
    def numbered(cls, number: int) -> "ScenarioSpec":
        settings = {
            1: ((1.0, 0.64, 0.16), 0.6),
            2: ((9.0, 4.0, 0.25), 4.0),
            3: ((1.0, 1.0, 1.0), 0.1),
        }
        if number not in settings:
            raise ValueError(f"unknown scenario {number}; choose 1, 2 or 3")
        source_var, sigma2_nu = settings[number]
        return cls(name=f"scenario{number}", source_var=source_var, sigma2_nu=sigma2_nu)

    @classmethod
    def near_noiseless(cls) -> "ScenarioSpec":
        """Source noise at 0.01 on the scale, every series complete from t=1."""
        return cls(
            name="near_noiseless",
            source_var=(1e-4, 1e-4, 1e-4),
            sigma2_bdsl=1e-4,
            sigma2_nu=1e-4,
            missing_rates=(0.0, 0.0, 0.0),
            late_starts=(1,),
            n_late_vaccines=0,
        )


class RunConfig(BaseModel):
    """Settings shared by the CLI subcommands, loadable from a flat key=value file."""
    model: ModelName = "idml"
    pooled: bool = False
    min_sample_size: int = Field(default=300, ge=0)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    chain: ChainConfig = Field(default_factory=ChainConfig)
    columns: ColumnMapping = Field(default_factory=ColumnMapping)

    def to_flat(self) -> Dict[str, str]:
        p = self.priors
        flat = {
            "model": self.model,
            "pooled": "true" if self.pooled else "false",
            "min_sample_size": str(self.min_sample_size),
            "prior.lambda_a.var": repr(p.lambda_src_var[0]),
            "prior.lambda_o.var": repr(p.lambda_src_var[1]),
            "prior.lambda_s.var": repr(p.lambda_src_var[2]),
            "prior.sigma1.scale": repr(p.sigma_src_scale[0]),
            "prior.sigma2.scale": repr(p.sigma_src_scale[1]),
            "prior.sigma3.scale": repr(p.sigma_src_scale[2]),
            "prior.sigma3.upper": "none" if p.sigma3_upper is None else repr(p.sigma3_upper),
            "prior.lambda.var": repr(p.lambda_var),
            "prior.sigma.scale": repr(p.sigma_scale),
            "prior.sigma_nu.scale": repr(p.sigma_nu_scale),
            "prior.flat_scale.upper": repr(p.flat_scale_upper),
        }
        for name, value in self.chain.model_dump().items():
            flat[f"chain.{name}"] = repr(value) if isinstance(value, float) else str(value)
        for role, column in self.columns.model_dump().items():
            flat[f"columns.{role}"] = column
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, Optional[str]], base: Optional["RunConfig"] = None) -> "RunConfig":
        """
        Builds a RunConfig from flat keys, starting from `base` (or defaults).

        Raises:
            ValueError: If a key is unknown or a value cannot be converted.
        """
        base = base or cls()
        top: Dict[str, Any] = {"model": base.model, "pooled": base.pooled,
                               "min_sample_size": base.min_sample_size}
        priors = base.priors.model_dump()
        chain = base.chain.model_dump()
        columns = base.columns.model_dump()
        src_index = {"a": 0, "o": 1, "s": 2, "1": 0, "2": 1, "3": 2}

        for key, raw in flat.items():
            if raw is None:
                raise ValueError(f"config key '{key}' has no value")
            value = raw.strip()
            if key == "model":
                top["model"] = value.lower()
            elif key == "pooled":
                top["pooled"] = _parse_bool(key, value)
            elif key == "min_sample_size":
                top["min_sample_size"] = _parse_number(key, value, int)
            elif key.startswith("columns."):
                role = key.split(".", 1)[1]
                if role not in columns:
                    raise ValueError(f"unknown column role in config key '{key}'")
                columns[role] = value
            elif key.startswith("chain."):
                name = key.split(".", 1)[1]
                if name not in chain:
                    raise ValueError(f"unknown chain setting '{key}'")
                if name == "blocking":
                    chain[name] = value
                elif name == "init_jitter":
                    chain[name] = _parse_number(key, value, float)
                else:
                    chain[name] = _parse_number(key, value, int)
            elif key.startswith("prior."):
                _apply_prior_key(priors, key, value, src_index)
            else:
                raise ValueError(f"unknown config key '{key}'")

        return cls(
            **top,
            priors=PriorConfig(**priors),
            chain=ChainConfig(**chain),
            columns=ColumnMapping(**columns),
        )


def _apply_prior_key(priors: Dict[str, Any], key: str, value: str, src_index: Dict[str, int]) -> None:
    parts = key.split(".")
    if len(parts) != 3:
        raise ValueError(f"unknown prior key '{key}'")
    _, name, field = parts
    if name.startswith("lambda_") and field == "var" and name[7:] in src_index:
        triple = list(priors["lambda_src_var"])
        triple[src_index[name[7:]]] = _parse_number(key, value, float)
        priors["lambda_src_var"] = tuple(triple)
    elif name in ("sigma1", "sigma2", "sigma3") and field == "scale":
        triple = list(priors["sigma_src_scale"])
        triple[src_index[name[-1]]] = _parse_number(key, value, float)
        priors["sigma_src_scale"] = tuple(triple)
    elif name == "sigma3" and field == "upper":
        priors["sigma3_upper"] = None if value.lower() == "none" else _parse_number(key, value, float)
    elif (name, field) == ("lambda", "var"):
        priors["lambda_var"] = _parse_number(key, value, float)
    elif (name, field) == ("sigma", "scale"):
        priors["sigma_scale"] = _parse_number(key, value, float)
    elif (name, field) == ("sigma_nu", "scale"):
        priors["sigma_nu_scale"] = _parse_number(key, value, float)
    elif (name, field) == ("flat_scale", "upper"):
        priors["flat_scale_upper"] = _parse_number(key, value, float)
    else:
        raise ValueError(f"unknown prior key '{key}'")


def _parse_number(key: str, value: str, kind: type) -> Any:
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"config key '{key}' expects a {kind.__name__}, got '{value}'") from None


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"config key '{key}' expects true/false, got '{value}'")
