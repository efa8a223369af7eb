# src/coverage_model/core/posterior.py
"""Posterior summaries: coverage estimates, forecasts, regional aggregates, WAIC and validation metrics."""
import logging
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, logsumexp

from ..models.records import DenominatorTable
from ..models.reports import (
    EstimateRow,
    EstimateTable,
    RegionalRow,
    RegionalTable,
    ValidationMetrics,
    WaicReport,
)
from .errors import InsufficientDrawsError, MissingDenominatorError, ModelDomainError
from .model import ModelKind, ObservationData
from .sampler import Draws

logger = logging.getLogger(__name__)

QUANTILES = (0.025, 0.5, 0.975)
RatioMap = Mapping[str, Sequence[str]]


def coverage_from_mu(mu: np.ndarray, vaccines: Sequence[str],
                     ratio_map: Optional[RatioMap] = None) -> Tuple[np.ndarray, List[str]]:
    """
    Turns (L, C, V, T) logit means into coverage proportions per draw.

    Ratio pseudo-vaccines are converted back to their numerator vaccine by
    multiplying with the denominator vaccine draw by draw.

    Returns:
        (proportions, vaccine labels) with labels aligned to axis 2.
    """
    p = expit(mu)
    labels = list(vaccines)
    position = {v: n for n, v in enumerate(vaccines)}
    for pseudo, (denominator, numerator) in (ratio_map or {}).items():
        if pseudo not in position:
            continue
        if denominator not in position:
            logger.warning(f"Cannot convert {pseudo}: {denominator} is not among the fitted vaccines")
            continue
        p[:, :, position[pseudo], :] = p[:, :, position[denominator], :] * p[:, :, position[pseudo], :]
        labels[position[pseudo]] = numerator
    return p, labels


def coverage_draws(draws: Draws, vaccines: Sequence[str],
                   ratio_map: Optional[RatioMap] = None) -> Tuple[np.ndarray, List[str]]:
    """(L, C, V, T) coverage proportions for every pooled draw."""
    return coverage_from_mu(draws.shared_mean(), vaccines, ratio_map)


def summarize(p: np.ndarray, countries: Sequence[str], vaccines: Sequence[str], years: Sequence[int],
              is_prediction: bool = False) -> EstimateTable:
    """Posterior mean and equal-tailed quantiles (linear interpolation) in percent."""
    mean = 100.0 * p.mean(axis=0)
    q = 100.0 * np.quantile(p, QUANTILES, axis=0, method="linear")
    rows = []
    for a, country in enumerate(countries):
        for b, vaccine in enumerate(vaccines):
            for c, year in enumerate(years):
                rows.append(EstimateRow(
                    country=country, vaccine=vaccine, year=int(year),
                    mean_pct=float(mean[a, b, c]), q025_pct=float(q[0, a, b, c]),
                    q50_pct=float(q[1, a, b, c]), q975_pct=float(q[2, a, b, c]),
                    is_prediction=is_prediction,
                ))
    return EstimateTable(rows=rows)


def coverage_estimates(draws: Draws, countries: Sequence[str], vaccines: Sequence[str], years: Sequence[int],
                       ratio_map: Optional[RatioMap] = None) -> EstimateTable:
    """
    Smoothed, source-free coverage per (country, vaccine, year).

    Args:
        draws: Posterior draws.
        countries: Labels for the country axis.
        vaccines: Labels for the vaccine axis, ratio pseudo-vaccines included.
        years: Labels for the time axis.
        ratio_map: Pseudo-vaccine -> (denominator, numerator).

    Returns:
        EstimateTable in percent.
    """
    p, labels = coverage_draws(draws, vaccines, ratio_map)
    return summarize(p, countries, labels, years)


def forecast_mean(draws: Draws, steps: int, rng: np.random.Generator) -> np.ndarray:
    """
    Extends every AR(1) effect `steps` years past the last fitted year and
    returns the (L, C, V, steps) shared mean. Static effects are carried over.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    L = draws.total

    def advance(last: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        shape = (L,) + (1,) * (last.ndim - 1)
        path = np.empty((steps,) + last.shape)
        current = last
        for s in range(steps):
            current = rho.reshape(shape) * current + sigma.reshape(shape) * rng.standard_normal(last.shape)
            path[s] = current
        return np.moveaxis(path, 0, -1)

    gamma = advance(draws.pooled_latent("gamma")[:, -1], draws.pooled_hyper("rho_gamma"), draws.pooled_hyper("sigma_gamma"))
    phi = advance(draws.pooled_latent("phi")[:, :, -1], draws.pooled_hyper("rho_phi"), draws.pooled_hyper("sigma_phi"))
    delta = advance(draws.pooled_latent("delta")[:, :, -1], draws.pooled_hyper("rho_delta"), draws.pooled_hyper("sigma_delta"))
    omega = advance(draws.pooled_latent("omega")[:, :, :, -1], draws.pooled_hyper("rho_omega"), draws.pooled_hyper("sigma_omega"))

    mu = (
        draws.pooled_latent("beta")[:, :, None, None]
        + draws.pooled_latent("alpha")[:, None, :, None]
        + draws.pooled_latent("psi")[:, :, :, None]
        + gamma[:, None, None, :]
        + phi[:, :, None, :]
        + delta[:, None, :, :]
        + omega
    )
    if draws.model == ModelKind.BDSL:
        mu = mu + draws.pooled_latent("lambda")[:, None, None, None]
    return mu


def predict_forward(draws: Draws, countries: Sequence[str], vaccines: Sequence[str], years: Sequence[int],
                    steps: int, seed: int = 0, ratio_map: Optional[RatioMap] = None) -> EstimateTable:
    """Forecast rows (is_prediction=True) for the `steps` years after the last fitted year."""
    rng = np.random.default_rng(seed)
    p, labels = coverage_from_mu(forecast_mean(draws, steps, rng), vaccines, ratio_map)
    future = [int(years[-1]) + s for s in range(1, steps + 1)]
    logger.info(f"Predicted {steps} years ({future[0]}-{future[-1]}) from {draws.total} draws")
    return summarize(p, countries, labels, future, is_prediction=True)


def regional_aggregate(p: np.ndarray, countries: Sequence[str], vaccines: Sequence[str], years: Sequence[int],
                       regions: Mapping[str, str], denominators: DenominatorTable,
                       is_prediction: bool = False) -> RegionalTable:
    """
    Population-weighted regional coverage, draw by draw.

    Args:
        p: (L, C, V, T) coverage proportions (see coverage_draws).
        countries, vaccines, years: Axis labels of p.
        regions: Country -> region code.
        denominators: Target populations for every (country, vaccine, year).

    Raises:
        ModelDomainError: If a country has no region.
        MissingDenominatorError: Listing every (country, vaccine, year) without a population.
    """
    unmapped = [c for c in countries if c not in regions]
    if unmapped:
        raise ModelDomainError(f"no region for countries: {', '.join(unmapped)}")
    lookup = denominators.lookup()
    missing = [(c, v, int(y)) for c in countries for v in vaccines for y in years if (c, v, int(y)) not in lookup]
    if missing:
        raise MissingDenominatorError(missing)

    pop = np.array([[[lookup[(c, v, int(y))] for y in years] for v in vaccines] for c in countries])
    rows: List[RegionalRow] = []
    for region in sorted({regions[c] for c in countries}):
        members = np.array([regions[c] == region for c in countries])
        weights = pop[members] / pop[members].sum(axis=0, keepdims=True)
        regional = np.einsum("cvt,lcvt->lvt", weights, p[:, members])
        mean = 100.0 * regional.mean(axis=0)
        q = 100.0 * np.quantile(regional, QUANTILES, axis=0, method="linear")
        for b, vaccine in enumerate(vaccines):
            for c, year in enumerate(years):
                rows.append(RegionalRow(
                    region=region, vaccine=vaccine, year=int(year), mean_pct=float(mean[b, c]),
                    q025_pct=float(q[0, b, c]), q50_pct=float(q[1, b, c]), q975_pct=float(q[2, b, c]),
                    is_prediction=is_prediction,
                ))
    return RegionalTable(rows=rows)


def pointwise_log_likelihood(draws: Draws, data: ObservationData) -> np.ndarray:
    """(L, N) log density of every observation under every draw."""
    mu = draws.shared_mean().reshape(draws.total, -1)[:, data.cell]
    if draws.model == ModelKind.IDML:
        mean = draws.pooled_latent("lambda_src")[:, data.k] + mu
        scale = np.stack([draws.pooled_hyper(f"sigma{k + 1}") for k in range(3)], axis=1)[:, data.k]
    else:
        mean = draws.pooled_latent("nu")[:, data.k] + mu
        scale = draws.pooled_hyper("sigma")[:, None]
    return stats.norm.logpdf(data.y[None, :], loc=mean, scale=scale)


def waic_from_pointwise(log_lik: np.ndarray) -> WaicReport:
    """
    WAIC from an (L, N) pointwise log-likelihood matrix.

    Raises:
        InsufficientDrawsError: With fewer than two draws.
    """
    log_lik = np.asarray(log_lik, dtype=float)
    n_draws = log_lik.shape[0]
    if n_draws < 2:
        raise InsufficientDrawsError(f"WAIC needs at least 2 draws, got {n_draws}")
    lppd = float(np.sum(logsumexp(log_lik, axis=0) - np.log(n_draws)))
    penalty = float(np.sum(np.var(log_lik, axis=0, ddof=1)))
    return WaicReport.from_components(gof=-2.0 * lppd, penalty=penalty,
                                      n_observations=log_lik.shape[1], n_draws=n_draws)


def waic(draws: Draws, data: ObservationData) -> WaicReport:
    """WAIC over the observed data points of a fit."""
    report = waic_from_pointwise(pointwise_log_likelihood(draws, data))
    logger.info(f"WAIC {report.waic:.1f} (gof {report.gof:.1f}, penalty {report.penalty:.1f})")
    return report


def validation_metrics(predicted: EstimateTable, truth: Mapping[Tuple[str, str, int], float]) -> ValidationMetrics:
    """
    Compares estimates with true coverage (both in percent) on their common keys.

    Raises:
        InsufficientDrawsError: If no key is shared.
    """
    estimates = predicted.to_frame()
    reference = pd.DataFrame(
        [(c, v, int(y), float(value)) for (c, v, y), value in truth.items()],
        columns=["country", "vaccine", "year", "truth"],
    )
    merged = estimates.merge(reference, on=["country", "vaccine", "year"], how="inner")
    if merged.empty:
        raise InsufficientDrawsError("no (country, vaccine, year) keys shared by estimates and truth")
    error = merged["mean"] - merged["truth"]
    inside = (merged["2.5%"] <= merged["truth"]) & (merged["truth"] <= merged["97.5%"])
    return ValidationMetrics(
        av_bias=float(error.mean()),
        rmse=float(np.sqrt((error ** 2).mean())),
        mae=float(error.abs().mean()),
        coverage95=float(100.0 * inside.mean()),
        correlation=float(merged["mean"].corr(merged["truth"])),
        n=int(len(merged)),
    )
