# src/coverage_model/core/sampler.py
"""
Blocked Gibbs sampler for the BDSL and IDML posteriors.

One sweep:
    1. static Gaussian block: intercepts, beta, alpha, psi and gamma, sampled
       jointly (or one sub-block at a time with blocking="single");
    2. phi, delta and omega rows, each a batch of tridiagonal Gaussian draws;
    3. every scale and autocorrelation by univariate slice sampling;
    4. BDSL only: unobserved cells redrawn from their predictive normal.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from ..models.configs import ChainConfig, PriorConfig
from ..models.reports import DiagnosticsReport
from .diagnostics import diagnose
from .errors import SamplerInitError
from .linalg import ar1_bands, sample_gaussian, sample_tridiagonal
from .model import (
    FLAT_SCALES,
    N_SOURCES,
    Hyperparams,
    LatentField,
    ModelDims,
    ModelKind,
    ObservationData,
    log_likelihood,
    log_prior_hyper,
    log_prior_latent,
)

logger = logging.getLogger(__name__)

_LOG_2_OVER_PI = math.log(2.0 / math.pi)
AR_BLOCKS = (("gamma", "rho_gamma", "sigma_gamma"), ("phi", "rho_phi", "sigma_phi"),
             ("delta", "rho_delta", "sigma_delta"), ("omega", "rho_omega", "sigma_omega"))
IID_SCALES = (("beta", "sigma_beta"), ("alpha", "sigma_alpha"), ("psi", "sigma_psi"))


def slice_sample(
    x0: float,
    log_density: Callable[[float], float],
    rng: np.random.Generator,
    width: float = 1.0,
    lower: float = -np.inf,
    upper: float = np.inf,
    max_steps: int = 64,
) -> float:
    """
    One univariate slice-sampling update with stepping out and shrinkage.

    Args:
        x0: Current state; log_density(x0) must be finite.
        log_density: Unnormalized log density, -inf outside the support.
        rng: Random generator.
        width: Initial bracket width; must not depend on x0.
        lower: Lower end of the support.
        upper: Upper end of the support.
        max_steps: Maximum stepping-out expansions in total.

    Returns:
        The new state.

    Raises:
        ValueError: If the current state has non-finite log density.
    """
    current = log_density(x0)
    if not np.isfinite(current):
        raise ValueError(f"slice sampler started at a point with log density {current}")
    level = current - rng.exponential()

    left = x0 - width * rng.uniform()
    right = left + width
    j = int(math.floor(max_steps * rng.uniform()))
    k = max_steps - 1 - j
    left, right = max(left, lower), min(right, upper)
    while j > 0 and left > lower and log_density(left) > level:
        left = max(left - width, lower)
        j -= 1
    while k > 0 and right < upper and log_density(right) > level:
        right = min(right + width, upper)
        k -= 1

    while True:
        proposal = rng.uniform(left, right)
        if log_density(proposal) > level:
            return float(proposal)
        if proposal < x0:
            left = proposal
        elif proposal > x0:
            right = proposal
        else:
            return float(x0)


def _log_halfcauchy(x: float, scale: float) -> float:
    return _LOG_2_OVER_PI - math.log(scale) - math.log1p((x / scale) ** 2)


@dataclass
class Draws:
    """
    Retained posterior draws.

    latent maps component names (see LatentField.components) to arrays of
    shape (n_chains, n_draws, *component_shape); hyper maps hyperparameter
    names to (n_chains, n_draws) arrays.
    """
    model: ModelKind
    dims: ModelDims
    latent: Dict[str, np.ndarray]
    hyper: Dict[str, np.ndarray]
    imputed: Optional[np.ndarray] = None

    @property
    def n_chains(self) -> int:
        return int(next(iter(self.hyper.values())).shape[0])

    @property
    def n_draws(self) -> int:
        return int(next(iter(self.hyper.values())).shape[1])

    @property
    def total(self) -> int:
        return self.n_chains * self.n_draws

    def pooled_latent(self, name: str) -> np.ndarray:
        arr = self.latent[name]
        return arr.reshape((self.total,) + arr.shape[2:])

    def pooled_hyper(self, name: str) -> np.ndarray:
        return self.hyper[name].reshape(self.total)

    def latent_at(self, chain: int, draw: int) -> LatentField:
        return LatentField.from_components({name: arr[chain, draw] for name, arr in self.latent.items()}, self.dims)

    def hyper_at(self, chain: int, draw: int) -> Hyperparams:
        return Hyperparams.from_dict({name: float(arr[chain, draw]) for name, arr in self.hyper.items()})

    def shared_mean(self) -> np.ndarray:
        """(L, C, V, T) shared mean for every pooled draw."""
        mu = (
            self.pooled_latent("beta")[:, :, None, None]
            + self.pooled_latent("alpha")[:, None, :, None]
            + self.pooled_latent("gamma")[:, None, None, :]
            + self.pooled_latent("phi")[:, :, None, :]
            + self.pooled_latent("delta")[:, None, :, :]
            + self.pooled_latent("psi")[:, :, :, None]
            + self.pooled_latent("omega")
        )
        if self.model == ModelKind.BDSL:
            mu = mu + self.pooled_latent("lambda")[:, None, None, None]
        return mu

    def traces(self) -> Dict[str, np.ndarray]:
        """Traces checked by the R-hat gate: hyperparameters, intercepts and every mu cell."""
        out: Dict[str, np.ndarray] = dict(self.hyper)
        if self.model == ModelKind.IDML:
            for k in range(N_SOURCES):
                out[f"lambda_src[{k + 1}]"] = self.latent["lambda_src"][:, :, k]
        else:
            out["lambda"] = self.latent["lambda"]
            for k in range(N_SOURCES):
                out[f"nu[{k + 1}]"] = self.latent["nu"][:, :, k]
        C, V, T = self.dims.C, self.dims.V, self.dims.T
        mu = self.shared_mean().reshape(self.n_chains, self.n_draws, C, V, T)
        for i in range(C):
            for j in range(V):
                for t in range(T):
                    out[f"mu[{i + 1},{j + 1},{t + 1}]"] = mu[:, :, i, j, t]
        return out


def chain_rng(seed: int, chain_id: int, stream: int) -> np.random.Generator:
    """Generator keyed by (seed, chain, stream); stream 0 initializes, stream 1 samples."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(chain_id, stream)))


def initialize(dims: ModelDims, model: ModelKind, priors: PriorConfig, config: ChainConfig,
               chain_id: int) -> Tuple[LatentField, Hyperparams]:
    """
    Starting state for one chain: latent effects and intercepts 0, scales 1
    (sigma3 at min(1, upper / 2)), autocorrelations 0, then a uniform jitter
    of size init_jitter that is deterministic in (seed, chain_id).
    """
    model = ModelKind(model)
    rng = chain_rng(config.seed, chain_id, 0)
    jitter = config.init_jitter
    latent = LatentField.zeros(dims)
    hyper = Hyperparams()
    if priors.sigma3_upper is not None:
        hyper.sigma_src[2] = min(1.0, 0.5 * priors.sigma3_upper)

    def noise(shape=None):
        return rng.uniform(-jitter, jitter, size=shape)

    latent.lam = float(noise())
    for name in ("lam_src", "nu", "beta", "alpha", "gamma", "phi", "delta", "psi", "omega"):
        current = getattr(latent, name)
        setattr(latent, name, current + noise(current.shape))

    for name in Hyperparams.names(ModelKind.IDML) + ["sigma", "sigma_nu"]:
        if name.startswith("rho"):
            hyper.set(name, float(np.clip(hyper.get(name) + noise(), -0.9, 0.9)))
        else:
            hyper.set(name, hyper.get(name) * float(np.exp(noise())))
    for name in FLAT_SCALES:
        hyper.set(name, min(hyper.get(name), priors.flat_scale_upper))
    if priors.sigma3_upper is not None:
        hyper.sigma_src[2] = min(hyper.sigma_src[2], 0.95 * priors.sigma3_upper)
    return latent, hyper


class GibbsSampler:
    """
    Runs chains for one model and dataset.

    Args:
        data: Logit observations.
        model: BDSL or IDML.
        priors: Prior settings.
        config: Chain settings.
        fixed_hyper: When given, hyperparameters stay at these values.
    """

    def __init__(self, data: ObservationData, model: ModelKind, priors: PriorConfig, config: ChainConfig,
                 fixed_hyper: Optional[Hyperparams] = None):
        self.data = data
        self.model = ModelKind(model)
        self.priors = priors
        self.config = config
        self.fixed_hyper = fixed_hyper.copy() if fixed_hyper is not None else None
        self.dims = data.dims
        C, V, T = self.dims.C, self.dims.V, self.dims.T

        if self.model == ModelKind.IDML:
            self.k, self.i, self.j, self.t = data.k, data.i, data.j, data.t
            self.y_init = data.y.copy()
            self.missing = np.zeros(len(data), dtype=bool)
        else:
            values, observed = data.to_grid()
            grid = np.indices((N_SOURCES, C, V, T)).reshape(4, -1)
            self.k, self.i, self.j, self.t = grid
            self.missing = ~observed.ravel()
            # unobserved cells start at their source's observed mean
            y = values.ravel().copy()
            for k in range(N_SOURCES):
                seen = (self.k == k) & ~self.missing
                y[(self.k == k) & self.missing] = float(y[seen].mean()) if seen.any() else 0.0
            self.y_init = y

        self.n_obs = self.k.shape[0]
        self.cell = (self.i * V + self.j) * T + self.t
        self.it = self.i * T + self.t
        self.jt = self.j * T + self.t
        self.ij = self.i * V + self.j
        self._build_design()

    def _build_design(self) -> None:
        C, V, T = self.dims.C, self.dims.V, self.dims.T
        n_int = N_SOURCES if self.model == ModelKind.IDML else 1 + N_SOURCES
        offsets = {"beta": n_int, "alpha": n_int + C, "psi": n_int + C + V, "gamma": n_int + C + V + C * V}
        self.n_static = offsets["gamma"] + T
        if self.model == ModelKind.IDML:
            self.static_blocks = {"lambda_src": np.arange(0, N_SOURCES)}
            intercept_cols = [self.k]
        else:
            self.static_blocks = {"lambda": np.arange(0, 1), "nu": np.arange(1, 1 + N_SOURCES)}
            intercept_cols = [np.zeros(self.n_obs, dtype=np.int64), 1 + self.k]
        self.static_blocks.update({
            "beta": np.arange(offsets["beta"], offsets["beta"] + C),
            "alpha": np.arange(offsets["alpha"], offsets["alpha"] + V),
            "psi": np.arange(offsets["psi"], offsets["psi"] + C * V),
            "gamma": np.arange(offsets["gamma"], offsets["gamma"] + T),
        })
        columns = intercept_cols + [offsets["beta"] + self.i, offsets["alpha"] + self.j,
                                    offsets["psi"] + self.ij, offsets["gamma"] + self.t]
        rows = np.tile(np.arange(self.n_obs), len(columns))
        cols = np.concatenate(columns)
        self.design = sparse.csr_matrix((np.ones(cols.shape[0]), (rows, cols)), shape=(self.n_obs, self.n_static))
        self.gram = []
        for k in range(N_SOURCES):
            part = self.design[self.k == k]
            self.gram.append((part.T @ part).toarray())

    # packing between the latent field and the static vector

    def _pack(self, latent: LatentField) -> np.ndarray:
        theta = np.zeros(self.n_static)
        for name, index in self.static_blocks.items():
            theta[index] = self._component(latent, name).ravel()
        return theta

    @staticmethod
    def _component(latent: LatentField, name: str) -> np.ndarray:
        if name == "lambda":
            return np.array([latent.lam])
        if name == "lambda_src":
            return latent.lam_src
        return getattr(latent, name)

    def _unpack(self, theta: np.ndarray, latent: LatentField) -> None:
        C, V = self.dims.C, self.dims.V
        for name, index in self.static_blocks.items():
            values = theta[index]
            if name == "lambda":
                latent.lam = float(values[0])
            elif name == "lambda_src":
                latent.lam_src = values.copy()
            elif name == "psi":
                latent.psi = values.reshape(C, V).copy()
            else:
                setattr(latent, name, values.copy())

    def _weights(self, hyper: Hyperparams) -> np.ndarray:
        if self.model == ModelKind.IDML:
            return 1.0 / hyper.sigma_src[self.k] ** 2
        return np.full(self.n_obs, 1.0 / hyper.sigma ** 2)

    def _static_precision(self, hyper: Hyperparams) -> np.ndarray:
        C, V, T = self.dims.C, self.dims.V, self.dims.T
        prior = np.zeros(self.n_static)
        if self.model == ModelKind.IDML:
            prior[self.static_blocks["lambda_src"]] = 1.0 / np.asarray(self.priors.lambda_src_var)
        else:
            prior[self.static_blocks["lambda"]] = 1.0 / self.priors.lambda_var
            prior[self.static_blocks["nu"]] = 1.0 / hyper.sigma_nu ** 2
        prior[self.static_blocks["beta"]] = 1.0 / hyper.sigma_beta ** 2
        prior[self.static_blocks["alpha"]] = 1.0 / hyper.sigma_alpha ** 2
        prior[self.static_blocks["psi"]] = 1.0 / hyper.sigma_psi ** 2
        precision = np.diag(prior)
        g = self.static_blocks["gamma"]
        diag, off = ar1_bands(T, hyper.rho_gamma)
        block = (np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)) / hyper.sigma_gamma ** 2
        precision[np.ix_(g, g)] = block
        if self.model == ModelKind.IDML:
            for k in range(N_SOURCES):
                precision += self.gram[k] / hyper.sigma_src[k] ** 2
        else:
            precision += sum(self.gram) / hyper.sigma ** 2
        return precision

    def _dynamic(self, latent: LatentField) -> np.ndarray:
        return latent.phi.ravel()[self.it] + latent.delta.ravel()[self.jt] + latent.omega.ravel()[self.cell]

    # Gibbs steps

    def _sample_static(self, latent: LatentField, hyper: Hyperparams, y: np.ndarray, w: np.ndarray,
                       rng: np.random.Generator) -> np.ndarray:
        precision = self._static_precision(hyper)
        linear = self.design.T @ (w * (y - self._dynamic(latent)))
        if self.config.blocking == "joint":
            theta = sample_gaussian(precision, linear, rng)
        else:
            theta = self._pack(latent)
            everything = np.arange(self.n_static)
            for index in self.static_blocks.values():
                rest = np.setdiff1d(everything, index)
                block_linear = linear[index] - precision[np.ix_(index, rest)] @ theta[rest]
                theta[index] = sample_gaussian(precision[np.ix_(index, index)], block_linear, rng)
        self._unpack(theta, latent)
        return self.design @ theta

    def _sample_rows(self, resid: np.ndarray, w: np.ndarray, index: np.ndarray, n_rows: int,
                     rho: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
        T = self.dims.T
        size = n_rows * T
        a = np.bincount(index, weights=w, minlength=size).reshape(n_rows, T)
        b = np.bincount(index, weights=w * resid, minlength=size).reshape(n_rows, T)
        diag, off = ar1_bands(T, rho)
        diag = diag[None, :] / sigma ** 2 + a
        off = np.broadcast_to(off / sigma ** 2, (n_rows, T - 1))
        return sample_tridiagonal(diag, np.ascontiguousarray(off), b, rng)

    def _sample_dynamic(self, latent: LatentField, hyper: Hyperparams, y: np.ndarray, w: np.ndarray,
                        static: np.ndarray, rng: np.random.Generator) -> None:
        C, V, T = self.dims.C, self.dims.V, self.dims.T
        delta = latent.delta.ravel()[self.jt]
        omega = latent.omega.ravel()[self.cell]
        latent.phi = self._sample_rows(y - static - delta - omega, w, self.it, C, hyper.rho_phi, hyper.sigma_phi, rng)
        phi = latent.phi.ravel()[self.it]
        latent.delta = self._sample_rows(y - static - phi - omega, w, self.jt, V, hyper.rho_delta, hyper.sigma_delta, rng)
        delta = latent.delta.ravel()[self.jt]
        rows = self._sample_rows(y - static - phi - delta, w, self.cell, C * V, hyper.rho_omega, hyper.sigma_omega, rng)
        latent.omega = rows.reshape(C, V, T)

    def _sample_scale(self, current: float, n: float, ss: float, rng: np.random.Generator,
                      cauchy_scale: Optional[float] = None, upper: Optional[float] = None) -> float:
        """Slice update of a scale with n Gaussian terms summing to ss squared deviations."""
        bound = upper if upper is not None else np.inf

        def log_density(s: float) -> float:
            if s <= 0.0 or s > bound:
                return -np.inf
            value = -n * math.log(s) - ss / (2.0 * s * s)
            if cauchy_scale is not None:
                value += _log_halfcauchy(s, cauchy_scale)
            return value

        return slice_sample(current, log_density, rng, width=0.5, lower=0.0, upper=bound)

    def _sample_ar(self, rows: np.ndarray, rho: float, sigma: float,
                   rng: np.random.Generator) -> Tuple[float, float]:
        n_rows, T = rows.shape
        total = float(np.sum(rows * rows))
        if T == 1:
            inner, cross = -total, 0.0
        else:
            inner = float(np.sum(rows[:, 1:-1] ** 2))
            cross = float(np.sum(rows[:, :-1] * rows[:, 1:]))
        upper = self.priors.flat_scale_upper

        def quad(r: float) -> float:
            return total + r * r * inner - 2.0 * r * cross

        def log_rho(r: float) -> float:
            if abs(r) >= 1.0:
                return -np.inf
            return 0.5 * n_rows * math.log1p(-r * r) - quad(r) / (2.0 * sigma * sigma)

        rho = slice_sample(rho, log_rho, rng, width=0.5, lower=-1.0, upper=1.0)
        sigma = self._sample_scale(sigma, n_rows * T, quad(rho), rng, upper=upper)
        return rho, sigma

    def _sample_hyper(self, latent: LatentField, hyper: Hyperparams, y: np.ndarray, fitted: np.ndarray,
                      rng: np.random.Generator) -> None:
        resid2 = (y - fitted) ** 2
        priors = self.priors
        if self.model == ModelKind.IDML:
            sse = np.bincount(self.k, weights=resid2, minlength=N_SOURCES)
            counts = np.bincount(self.k, minlength=N_SOURCES)
            sigma_src = np.array(hyper.sigma_src, dtype=float)
            for k in range(N_SOURCES):
                upper = priors.sigma3_upper if k == 2 else None
                sigma_src[k] = self._sample_scale(sigma_src[k], counts[k], sse[k], rng,
                                                  cauchy_scale=priors.sigma_src_scale[k], upper=upper)
            hyper.sigma_src = sigma_src
        else:
            hyper.sigma = self._sample_scale(hyper.sigma, self.n_obs, float(resid2.sum()), rng,
                                             cauchy_scale=priors.sigma_scale)
            hyper.sigma_nu = self._sample_scale(hyper.sigma_nu, N_SOURCES, float(np.sum(latent.nu ** 2)), rng,
                                                cauchy_scale=priors.sigma_nu_scale)
        for effect, scale in IID_SCALES:
            values = getattr(latent, effect)
            hyper.set(scale, self._sample_scale(hyper.get(scale), values.size, float(np.sum(values ** 2)), rng,
                                                upper=priors.flat_scale_upper))
        for effect, rho_name, sigma_name in AR_BLOCKS:
            rows = getattr(latent, effect).reshape(-1, self.dims.T)
            rho, sigma = self._sample_ar(rows, hyper.get(rho_name), hyper.get(sigma_name), rng)
            hyper.set(rho_name, rho)
            hyper.set(sigma_name, sigma)

    def _check_start(self, latent: LatentField, hyper: Hyperparams, y: np.ndarray, chain_id: int) -> None:
        if not np.isfinite(log_prior_hyper(hyper, self.priors, self.model)):
            raise SamplerInitError("hyperparameters", chain_id)
        if not np.isfinite(log_prior_latent(latent, hyper, self.priors, self.model)):
            raise SamplerInitError("latent field", chain_id)
        shape = (N_SOURCES, self.dims.C, self.dims.V, self.dims.T)
        missing_y = y.reshape(shape) if self.model == ModelKind.BDSL else None
        if not np.isfinite(log_likelihood(latent, hyper, self.data, self.model, missing_y)):
            raise SamplerInitError("likelihood", chain_id)

    def run_chain(self, chain_id: int, keep_imputed: bool = False) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], Optional[np.ndarray]]:
        """
        Runs one chain and returns its retained (latent, hyper, imputed) arrays.

        Raises:
            SamplerInitError: If the starting point has a non-finite log posterior.
        """
        config = self.config
        latent, hyper = initialize(self.dims, self.model, self.priors, config, chain_id)
        if self.fixed_hyper is not None:
            hyper = self.fixed_hyper.copy()
        y = self.y_init.copy()
        self._check_start(latent, hyper, y, chain_id)
        rng = chain_rng(config.seed, chain_id, 1)

        n_keep = config.draws_per_chain
        shapes = {name: np.shape(value) for name, value in latent.components(self.model).items()}
        kept_latent = {name: np.empty((n_keep,) + shape) for name, shape in shapes.items()}
        hyper_names = Hyperparams.names(self.model)
        kept_hyper = {name: np.empty(n_keep) for name in hyper_names}
        kept_imputed = np.empty((n_keep, int(self.missing.sum()))) if keep_imputed else None

        logger.info(f"Chain {chain_id}: {config.iterations} iterations ({config.warmup} warmup, thin {config.thin})")
        slot = 0
        for iteration in range(config.iterations):
            w = self._weights(hyper)
            static = self._sample_static(latent, hyper, y, w, rng)
            self._sample_dynamic(latent, hyper, y, w, static, rng)
            fitted = static + self._dynamic(latent)
            if self.fixed_hyper is None:
                self._sample_hyper(latent, hyper, y, fitted, rng)
            if self.model == ModelKind.BDSL and self.missing.any():
                n_missing = int(self.missing.sum())
                y[self.missing] = fitted[self.missing] + hyper.sigma * rng.standard_normal(n_missing)

            if iteration >= config.warmup and (iteration - config.warmup) % config.thin == 0:
                for name, value in latent.components(self.model).items():
                    kept_latent[name][slot] = value
                for name in hyper_names:
                    kept_hyper[name][slot] = hyper.get(name)
                if kept_imputed is not None:
                    kept_imputed[slot] = y[self.missing]
                slot += 1
            if (iteration + 1) % 500 == 0:
                logger.debug(f"Chain {chain_id}: iteration {iteration + 1}/{config.iterations}")

        logger.info(f"Chain {chain_id} finished with {slot} retained draws")
        return kept_latent, kept_hyper, kept_imputed


def run_chains(
    data: ObservationData,
    model: ModelKind,
    priors: PriorConfig,
    config: ChainConfig,
    fixed_hyper: Optional[Hyperparams] = None,
    keep_imputed: bool = False,
) -> Tuple[Draws, DiagnosticsReport]:
    """
    Runs config.n_chains chains (in a thread pool of config.n_workers) and
    computes diagnostics on the pooled result. Results do not depend on the
    number of workers.
    """
    model = ModelKind(model)
    sampler = GibbsSampler(data, model, priors, config, fixed_hyper=fixed_hyper)
    chain_ids = list(range(config.n_chains))
    if config.n_workers > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=config.n_workers, thread_name_prefix="chain") as pool:
            results = list(pool.map(lambda c: sampler.run_chain(c, keep_imputed), chain_ids))
    else:
        results = [sampler.run_chain(c, keep_imputed) for c in chain_ids]

    latent = {name: np.stack([r[0][name] for r in results]) for name in results[0][0]}
    hyper = {name: np.stack([r[1][name] for r in results]) for name in results[0][1]}
    imputed = np.stack([r[2] for r in results]) if keep_imputed else None
    draws = Draws(model=model, dims=data.dims, latent=latent, hyper=hyper, imputed=imputed)

    traces = draws.traces()
    if fixed_hyper is not None:
        for name in Hyperparams.names(model):
            traces.pop(name, None)
    report = diagnose(traces)
    logger.info(f"{model.value.upper()} fit: {draws.total} draws from {draws.n_chains} chains")
    return draws, report
