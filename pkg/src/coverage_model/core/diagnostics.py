# src/coverage_model/core/diagnostics.py
"""Convergence diagnostics on (n_chains, n_draws) traces."""
import logging
from typing import Dict, Optional

import numpy as np
from scipy import fft, stats

from ..models.reports import DiagnosticsReport, ParameterDiagnostic

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05


def _as_traces(chains, min_chains: int, min_draws: int, what: str) -> np.ndarray:
    traces = np.asarray(chains, dtype=float)
    if traces.ndim != 2:
        raise ValueError(f"{what} expects a (n_chains, n_draws) array, got shape {traces.shape}")
    if traces.shape[0] < min_chains or traces.shape[1] < min_draws:
        raise ValueError(f"{what} needs at least {min_chains} chains of {min_draws} draws, got shape {traces.shape}")
    return traces


def split_chains(traces: np.ndarray) -> np.ndarray:
    """Splits each chain into two halves; the middle draw of an odd-length chain is dropped."""
    half = traces.shape[1] // 2
    return np.vstack((traces[:, :half], traces[:, -half:]))


def split_rhat(chains) -> Optional[float]:
    """
    Split R-hat without rank normalization.

    Args:
        chains: (n_chains, n_draws) array with at least 2 chains and 4 draws.

    Returns:
        sqrt(((n - 1) / n * W + B / n) / W) over the half-chains, or None when
        the within-chain variance is zero.

    Raises:
        ValueError: On too few chains or draws.
    """
    halves = split_chains(_as_traces(chains, 2, 4, "split_rhat"))
    n = halves.shape[1]
    within = float(np.mean(np.var(halves, axis=1, ddof=1)))
    if not np.isfinite(within) or within <= 0.0:
        return None
    between = n * float(np.var(np.mean(halves, axis=1), ddof=1))
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-D series at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    size = fft.next_fast_len(2 * n)
    centered = x - x.mean()
    spectrum = fft.rfft(centered, n=size)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    return acov / n


def effective_sample_size(chains) -> Optional[float]:
    """
    Multi-chain effective sample size with Geyer's initial positive sequence
    and initial monotone sequence truncation. None when the variance is zero.
    """
    traces = _as_traces(chains, 1, 2, "effective_sample_size")
    m, n = traces.shape
    acov = np.asarray([autocovariance(chain) for chain in traces])
    mean_var = float(np.mean(acov[:, 0])) * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += float(np.var(traces.mean(axis=1), ddof=1))
    if not np.isfinite(var_plus) or var_plus <= 0.0:
        return None

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even, rho_odd = 1.0, 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 2 and rho_even + rho_odd >= 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0.0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t

    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = (rho[t - 1] + rho[t]) / 2.0
        t += 2

    tau = -1.0 + 2.0 * float(np.sum(rho[:max_t])) + float(np.sum(rho[max_t + 1: max_t + 2]))
    if not np.isfinite(tau) or tau <= 0.0:
        return None
    return float(m * n / tau)


def rank_normalize(traces: np.ndarray) -> np.ndarray:
    ranks = stats.rankdata(traces, method="average").reshape(traces.shape)
    return stats.norm.ppf((ranks - 0.5) / traces.size)


def bulk_ess(chains) -> Optional[float]:
    """ESS of the rank-normalized split chains."""
    traces = _as_traces(chains, 1, 4, "bulk_ess")
    if np.ptp(traces) == 0.0:
        return None
    return effective_sample_size(rank_normalize(split_chains(traces)))


def mcse_mean(chains) -> Optional[float]:
    """Monte Carlo standard error of the pooled mean, sd / sqrt(ESS)."""
    traces = np.asarray(chains, dtype=float)
    ess = effective_sample_size(traces)
    if ess is None:
        return None
    return float(np.std(traces, ddof=1) / np.sqrt(ess))


def diagnose(traces: Dict[str, np.ndarray], threshold: float = RHAT_THRESHOLD) -> DiagnosticsReport:
    """
    Builds a DiagnosticsReport from named (n_chains, n_draws) traces.

    R-hat needs at least two chains of four draws; with fewer it is reported as None.
    """
    rows = []
    for name, trace in traces.items():
        trace = np.asarray(trace, dtype=float)
        enough = trace.shape[0] >= 2 and trace.shape[1] >= 4
        rows.append(ParameterDiagnostic(
            name=name,
            mean=float(np.mean(trace)),
            sd=float(np.std(trace, ddof=1)) if trace.size > 1 else 0.0,
            rhat=split_rhat(trace) if enough else None,
            ess_bulk=bulk_ess(trace) if trace.shape[1] >= 4 else None,
        ))
    report = DiagnosticsReport(parameters=rows, rhat_threshold=threshold)
    if report.passed:
        logger.info(f"R-hat gate passed (max {report.max_rhat}) over {len(rows)} parameters")
    else:
        logger.warning(f"R-hat gate failed: {len(report.failing())} parameters at or above {threshold}, "
                       f"max {report.max_rhat:.3f}")
    return report
