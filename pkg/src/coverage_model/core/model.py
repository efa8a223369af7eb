# src/coverage_model/core/model.py
"""
BDSL and IDML model definitions.

Both models share the latent mean

    mu_ijt = beta_i + alpha_j + gamma_t + phi_it + delta_jt + psi_ij + omega_ijt

and differ in how the three sources enter the likelihood:

- BDSL: y_ijt^(k) = lambda + mu_ijt + nu^(k) + e, e ~ N(0, sigma^2), on the
  complete (k, i, j, t) grid; unobserved cells are imputed by the sampler.
- IDML: y_ijt^(k) = lambda^(k) + mu_ijt + e_k, e_k ~ N(0, sigma_k^2), only on
  the times each source actually reports.

Indices are 0-based throughout.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from ..models.configs import PriorConfig
from .errors import ModelDomainError
from .linalg import ar1_bands, ar1_logdet, ar1_quadratic, ar1_structure

logger = logging.getLogger(__name__)

N_SOURCES = 3
SOURCE_LABELS = ("a", "o", "s")
_LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "ModelKind", "ModelDims", "LatentField", "Hyperparams", "ObservationData", "KroneckerPrecision",
    "ar1_structure", "interaction_precision", "shared_mean", "log_likelihood", "log_prior_latent",
    "log_prior_hyper", "log_posterior",
]


class ModelKind(str, Enum):
    BDSL = "bdsl"
    IDML = "idml"


@dataclass(frozen=True)
class ModelDims:
    C: int
    V: int
    T: int

    def __post_init__(self):
        for name in ("C", "V", "T"):
            if getattr(self, name) < 1:
                raise ModelDomainError(f"dimension {name} must be >= 1, got {getattr(self, name)}")

    @property
    def n_cells(self) -> int:
        return self.C * self.V * self.T


@dataclass
class LatentField:
    """All location parameters and random effects of either model."""
    lam: float
    lam_src: np.ndarray   # (3,) IDML source intercepts
    nu: np.ndarray        # (3,) BDSL source effects
    beta: np.ndarray      # (C,)
    alpha: np.ndarray     # (V,)
    gamma: np.ndarray     # (T,)
    phi: np.ndarray       # (C, T)
    delta: np.ndarray     # (V, T)
    psi: np.ndarray       # (C, V)
    omega: np.ndarray     # (C, V, T)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "LatentField":
        C, V, T = dims.C, dims.V, dims.T
        return cls(
            lam=0.0, lam_src=np.zeros(N_SOURCES), nu=np.zeros(N_SOURCES),
            beta=np.zeros(C), alpha=np.zeros(V), gamma=np.zeros(T),
            phi=np.zeros((C, T)), delta=np.zeros((V, T)), psi=np.zeros((C, V)), omega=np.zeros((C, V, T)),
        )

    @property
    def dims(self) -> ModelDims:
        C, V, T = self.omega.shape
        return ModelDims(C, V, T)

    def copy(self) -> "LatentField":
        return LatentField(**{f.name: np.array(getattr(self, f.name), copy=True) if f.name != "lam"
                              else float(self.lam) for f in fields(self)})

    def check_shapes(self, dims: ModelDims) -> None:
        expected = {
            "lam_src": (N_SOURCES,), "nu": (N_SOURCES,), "beta": (dims.C,), "alpha": (dims.V,),
            "gamma": (dims.T,), "phi": (dims.C, dims.T), "delta": (dims.V, dims.T),
            "psi": (dims.C, dims.V), "omega": (dims.C, dims.V, dims.T),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ModelDomainError(f"latent '{name}' has shape {np.shape(getattr(self, name))}, expected {shape}")

    def components(self, model: ModelKind) -> Dict[str, np.ndarray]:
        """Named arrays of the components active in `model`, in storage order."""
        head = ({"lambda_src": self.lam_src} if model == ModelKind.IDML
                else {"lambda": np.array(self.lam), "nu": self.nu})
        return {**head, "beta": self.beta, "alpha": self.alpha, "gamma": self.gamma, "phi": self.phi,
                "delta": self.delta, "psi": self.psi, "omega": self.omega}

    @classmethod
    def from_components(cls, values: Dict[str, np.ndarray], dims: ModelDims) -> "LatentField":
        out = cls.zeros(dims)
        for name, value in values.items():
            if name == "lambda":
                out.lam = float(value)
            elif name == "lambda_src":
                out.lam_src = np.asarray(value, dtype=float)
            else:
                setattr(out, name, np.asarray(value, dtype=float))
        return out


HYPER_SHARED = (
    "sigma_beta", "sigma_alpha", "rho_gamma", "sigma_gamma", "rho_phi", "sigma_phi",
    "rho_delta", "sigma_delta", "sigma_psi", "rho_omega", "sigma_omega",
)
FLAT_SCALES = ("sigma_beta", "sigma_alpha", "sigma_gamma", "sigma_phi", "sigma_delta", "sigma_psi", "sigma_omega")
RHOS = ("rho_gamma", "rho_phi", "rho_delta", "rho_omega")


@dataclass
class Hyperparams:
    """
    Variance and autocorrelation parameters, held as standard deviations.

    sigma and sigma_nu belong to BDSL; sigma_src = (sigma1, sigma2, sigma3) to IDML.
    """
    sigma: float = 1.0
    sigma_src: np.ndarray = field(default_factory=lambda: np.ones(N_SOURCES))
    sigma_nu: float = 1.0
    sigma_beta: float = 1.0
    sigma_alpha: float = 1.0
    rho_gamma: float = 0.0
    sigma_gamma: float = 1.0
    rho_phi: float = 0.0
    sigma_phi: float = 1.0
    rho_delta: float = 0.0
    sigma_delta: float = 1.0
    sigma_psi: float = 1.0
    rho_omega: float = 0.0
    sigma_omega: float = 1.0

    @staticmethod
    def names(model: ModelKind) -> List[str]:
        head = ["sigma1", "sigma2", "sigma3"] if model == ModelKind.IDML else ["sigma", "sigma_nu"]
        return head + list(HYPER_SHARED)

    def get(self, name: str) -> float:
        if name in ("sigma1", "sigma2", "sigma3"):
            return float(self.sigma_src[int(name[-1]) - 1])
        return float(getattr(self, name))

    def set(self, name: str, value: float) -> None:
        if name in ("sigma1", "sigma2", "sigma3"):
            self.sigma_src = np.array(self.sigma_src, dtype=float)
            self.sigma_src[int(name[-1]) - 1] = value
        else:
            setattr(self, name, float(value))

    def to_dict(self, model: ModelKind) -> Dict[str, float]:
        return {name: self.get(name) for name in self.names(model)}

    @classmethod
    def from_dict(cls, values: Dict[str, float]) -> "Hyperparams":
        out = cls()
        for name, value in values.items():
            out.set(name, value)
        return out

    def copy(self) -> "Hyperparams":
        return replace(self, sigma_src=np.array(self.sigma_src, dtype=float, copy=True))

    def in_domain(self, priors: PriorConfig, model: ModelKind) -> bool:
        """True when every scale is positive (flat ones bounded above) and every |rho| < 1."""
        values = self.to_dict(model)
        if not all(np.isfinite(v) for v in values.values()):
            return False
        if any(abs(values[name]) >= 1.0 for name in RHOS):
            return False
        if any(not (0.0 < values[name] <= priors.flat_scale_upper) for name in FLAT_SCALES):
            return False
        if model == ModelKind.IDML:
            if np.any(self.sigma_src <= 0.0):
                return False
            if priors.sigma3_upper is not None and self.sigma_src[2] > priors.sigma3_upper:
                return False
        elif self.sigma <= 0.0 or self.sigma_nu <= 0.0:
            return False
        return True


@dataclass
class ObservationData:
    """
    Logit observations as flat arrays (source, country, vaccine, time, value).

    Sources are coded 0=admin, 1=official, 2=survey.
    """
    dims: ModelDims
    k: np.ndarray
    i: np.ndarray
    j: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.shape[0]
        if any(arr.shape != (n,) for arr in (self.k, self.i, self.j, self.t)):
            raise ModelDomainError("observation index arrays must all have the same length")
        if n:
            bounds = {"k": (self.k, N_SOURCES), "i": (self.i, self.dims.C), "j": (self.j, self.dims.V),
                      "t": (self.t, self.dims.T)}
            for name, (arr, upper) in bounds.items():
                if arr.min() < 0 or arr.max() >= upper:
                    raise ModelDomainError(f"observation index '{name}' outside 0..{upper - 1}")
            if not np.all(np.isfinite(self.y)):
                raise ModelDomainError("observations must be finite")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def cell(self) -> np.ndarray:
        """Flat (i, j, t) cell index into a C x V x T array."""
        return (self.i * self.dims.V + self.j) * self.dims.T + self.t

    def counts(self) -> np.ndarray:
        return np.bincount(self.k, minlength=N_SOURCES)

    def observed_times(self, i: int, j: int, k: int) -> np.ndarray:
        mask = (self.i == i) & (self.j == j) & (self.k == k)
        return np.sort(self.t[mask])

    def to_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Balanced (3, C, V, T) layout.

        Returns:
            (values, observed): values hold NaN where no observation exists.

        Raises:
            ModelDomainError: If a (k, i, j, t) cell is observed more than once.
        """
        shape = (N_SOURCES, self.dims.C, self.dims.V, self.dims.T)
        flat = np.ravel_multi_index((self.k, self.i, self.j, self.t), shape) if len(self) else np.zeros(0, dtype=int)
        if np.unique(flat).size != flat.size:
            raise ModelDomainError("more than one observation for a (source, country, vaccine, time) cell")
        values = np.full(int(np.prod(shape)), np.nan)
        values[flat] = self.y
        observed = np.zeros(values.size, dtype=bool)
        observed[flat] = True
        return values.reshape(shape), observed.reshape(shape)

    @classmethod
    def from_logit_data(cls, data) -> "ObservationData":
        """Builds arrays from preprocess.LogitData."""
        obs = data.observations
        dims = ModelDims(max(len(data.countries), 1), max(len(data.vaccines), 1), max(len(data.years), 1))
        return cls(
            dims=dims,
            k=[o.source.index for o in obs],
            i=[o.i for o in obs],
            j=[o.j for o in obs],
            t=[o.t for o in obs],
            y=[o.y for o in obs],
        )


@dataclass(frozen=True)
class KroneckerPrecision:
    """
    Precision I_n (x) R(rho) / sigma^2 kept as n identical T x T AR(1) blocks.
    Vectors are laid out block-major, i.e. as an (n, T) array.
    """
    n_blocks: int
    T: int
    rho: float
    sigma: float

    def block(self) -> np.ndarray:
        return ar1_structure(self.T, self.rho) / self.sigma ** 2

    def bands(self) -> Tuple[np.ndarray, np.ndarray]:
        diag, off = ar1_bands(self.T, self.rho)
        return diag / self.sigma ** 2, off / self.sigma ** 2

    def quadratic(self, x: np.ndarray) -> float:
        rows = np.asarray(x, dtype=float).reshape(self.n_blocks, self.T)
        return float(np.sum(ar1_quadratic(rows, self.rho))) / self.sigma ** 2

    def logdet(self) -> float:
        return self.n_blocks * (ar1_logdet(self.T, self.rho) - 2.0 * self.T * np.log(self.sigma))

    def log_density(self, x: np.ndarray) -> float:
        """Zero-mean Gaussian log density with this precision."""
        dim = self.n_blocks * self.T
        return -0.5 * dim * _LOG_2PI + 0.5 * self.logdet() - 0.5 * self.quadratic(x)

    def to_dense(self) -> np.ndarray:
        return np.kron(np.eye(self.n_blocks), self.block())


def interaction_precision(kind: str, dims: ModelDims, rho: float, sigma: float) -> KroneckerPrecision:
    """
    Structured precision of an AR(1)-in-time effect.

    Args:
        kind: 'gamma' (one series), 'phi' (one per country), 'delta' (one per
            vaccine) or 'omega' (one per country-vaccine pair).
        dims: Model dimensions.
        rho: Autocorrelation, |rho| < 1.
        sigma: Innovation standard deviation, > 0.

    Raises:
        ModelDomainError: On an unknown kind, |rho| >= 1 or sigma <= 0.
    """
    blocks = {"gamma": 1, "phi": dims.C, "delta": dims.V, "omega": dims.C * dims.V}
    if kind not in blocks:
        raise ModelDomainError(f"unknown interaction kind '{kind}'")
    if not np.isfinite(rho) or abs(rho) >= 1.0:
        raise ModelDomainError(f"autocorrelation must satisfy |rho| < 1, got {rho}")
    if not sigma > 0.0:
        raise ModelDomainError(f"scale must be positive, got {sigma}")
    return KroneckerPrecision(n_blocks=blocks[kind], T=dims.T, rho=float(rho), sigma=float(sigma))


def shared_mean(latent: LatentField, model: ModelKind) -> np.ndarray:
    """
    C x V x T array of latent logit coverage. BDSL adds its global intercept;
    source intercepts and source effects are never part of the shared mean.
    """
    mu = (
        latent.beta[:, None, None]
        + latent.alpha[None, :, None]
        + latent.gamma[None, None, :]
        + latent.phi[:, None, :]
        + latent.delta[None, :, :]
        + latent.psi[:, :, None]
        + latent.omega
    )
    if model == ModelKind.BDSL:
        mu = mu + latent.lam
    return mu


def _completed_grid(data: ObservationData, missing_y: Optional[np.ndarray]) -> np.ndarray:
    values, observed = data.to_grid()
    if observed.all():
        return values
    if missing_y is None:
        raise ModelDomainError("BDSL density needs imputed values for every unobserved cell")
    missing_y = np.asarray(missing_y, dtype=float)
    if missing_y.shape == values.shape:
        return np.where(observed, values, missing_y)
    if missing_y.shape == (int((~observed).sum()),):
        values[~observed] = missing_y
        return values
    raise ModelDomainError(f"imputed values have shape {missing_y.shape}, expected {values.shape}")


def log_likelihood(latent: LatentField, hyper: Hyperparams, data: ObservationData, model: ModelKind,
                   missing_y: Optional[np.ndarray] = None) -> float:
    """Gaussian log likelihood including normalizing constants."""
    mu = shared_mean(latent, model)
    if model == ModelKind.IDML:
        if not len(data):
            return 0.0
        mean = latent.lam_src[data.k] + mu.ravel()[data.cell]
        return float(np.sum(stats.norm.logpdf(data.y, loc=mean, scale=hyper.sigma_src[data.k])))
    grid = _completed_grid(data, missing_y)
    mean = mu[None, :, :, :] + latent.nu[:, None, None, None]
    return float(np.sum(stats.norm.logpdf(grid, loc=mean, scale=hyper.sigma)))


def log_prior_latent(latent: LatentField, hyper: Hyperparams, priors: PriorConfig, model: ModelKind) -> float:
    """Random-effect log densities plus the intercept priors."""
    dims = latent.dims
    total = 0.0
    if model == ModelKind.IDML:
        total += float(np.sum(stats.norm.logpdf(latent.lam_src, scale=np.sqrt(priors.lambda_src_var))))
    else:
        total += float(stats.norm.logpdf(latent.lam, scale=np.sqrt(priors.lambda_var)))
        total += float(np.sum(stats.norm.logpdf(latent.nu, scale=hyper.sigma_nu)))
    total += float(np.sum(stats.norm.logpdf(latent.beta, scale=hyper.sigma_beta)))
    total += float(np.sum(stats.norm.logpdf(latent.alpha, scale=hyper.sigma_alpha)))
    total += float(np.sum(stats.norm.logpdf(latent.psi, scale=hyper.sigma_psi)))
    total += interaction_precision("gamma", dims, hyper.rho_gamma, hyper.sigma_gamma).log_density(latent.gamma)
    total += interaction_precision("phi", dims, hyper.rho_phi, hyper.sigma_phi).log_density(latent.phi)
    total += interaction_precision("delta", dims, hyper.rho_delta, hyper.sigma_delta).log_density(latent.delta)
    total += interaction_precision("omega", dims, hyper.rho_omega, hyper.sigma_omega).log_density(latent.omega)
    return total


def log_prior_hyper(hyper: Hyperparams, priors: PriorConfig, model: ModelKind) -> float:
    """
    Half-Cauchy priors on source/residual scales (untruncated normalization,
    truncation as an indicator), uniform on (0, flat_scale_upper] for the
    other scales and uniform on (-1, 1) for every rho.
    """
    if not hyper.in_domain(priors, model):
        return -np.inf
    if model == ModelKind.IDML:
        total = float(np.sum(stats.halfcauchy.logpdf(hyper.sigma_src, scale=np.asarray(priors.sigma_src_scale))))
    else:
        total = float(stats.halfcauchy.logpdf(hyper.sigma, scale=priors.sigma_scale))
        total += float(stats.halfcauchy.logpdf(hyper.sigma_nu, scale=priors.sigma_nu_scale))
    total += len(FLAT_SCALES) * float(-np.log(priors.flat_scale_upper))
    total += len(RHOS) * float(np.log(0.5))
    return total


def log_posterior(latent: LatentField, hyper: Hyperparams, priors: PriorConfig, data: ObservationData,
                  model: ModelKind, missing_y: Optional[np.ndarray] = None) -> float:
    """
    Unnormalized joint log posterior; -inf whenever a hyperparameter is out of domain.

    Raises:
        ModelDomainError: If latent shapes disagree with the data dimensions or,
            for BDSL, unobserved cells lack imputed values.
    """
    model = ModelKind(model)
    latent.check_shapes(data.dims)
    prior_h = log_prior_hyper(hyper, priors, model)
    if not np.isfinite(prior_h):
        return -np.inf
    return log_likelihood(latent, hyper, data, model, missing_y) + log_prior_latent(latent, hyper, priors, model) + prior_h
