"""Convergence diagnostics and posterior summaries.

split_rhat halves every chain before comparing between- and within-half
variances, which flags within-chain drift that whole-chain R-hat misses.
ess uses the multi-chain autocorrelation estimator with Geyer's initial
positive/monotone truncation.  Summaries report equal-tailed 95% intervals
from linearly interpolated percentiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["SummaryRow", "split_rhat", "ess", "summarize"]


@dataclass
class SummaryRow:
    """Posterior summary of one named parameter."""

    name: str
    posterior_mean: float
    posterior_sd: float
    ci_lower: float
    ci_upper: float
    rhat: float
    ess: float


def _as_chains(draws) -> np.ndarray:
    """(chains, draws) float array from array-like input."""
    arr = np.asarray(draws, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("draws must be 1-d or (chains, draws)")
    return arr


def _split_halves(arr: np.ndarray) -> np.ndarray:
    """Stack first and last halves of each chain (odd middles dropped)."""
    half = arr.shape[1] // 2
    return np.vstack([arr[:, :half], arr[:, -half:]])


def split_rhat(draws) -> float:
    """Split potential scale reduction factor.

    Each chain is halved; with S the half length, W the mean within-half
    variance, and B the between-half variance scaled by S, returns
    sqrt(((S-1)/S * W + B/S) / W).  All-identical draws return 1 by
    convention; zero within-variance with spread across halves returns +inf.
    """
    arr = _split_halves(_as_chains(draws))
    m, s = arr.shape
    if m < 2 or s < 2:
        raise ValueError("need at least 2 half-chains with at least 2 draws each")
    within = float(np.mean(np.var(arr, axis=1, ddof=1)))
    between = s * float(np.var(np.mean(arr, axis=1), ddof=1))
    if within == 0.0:
        return 1.0 if between == 0.0 else math.inf
    var_plus = (s - 1.0) / s * within + between / s
    return math.sqrt(var_plus / within)


def _autocovariance(arr: np.ndarray) -> np.ndarray:
    """Per-chain autocovariance via FFT, biased normalization (1/S)."""
    m, s = arr.shape
    centered = arr - arr.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * s)))
    fft = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(fft * np.conj(fft), n=size, axis=1)[:, :s].real
    return acov / s


def ess(draws) -> float:
    """Effective sample size from multi-chain autocorrelations.

    Uses Geyer's initial positive sequence and initial monotone adjustment
    to truncate the autocorrelation sum.  A constant input returns the
    total draw count by convention.
    """
    arr = _as_chains(draws)
    m, s = arr.shape
    if s < 2:
        raise ValueError("need at least 2 draws per chain")
    total = m * s
    if np.max(arr) - np.min(arr) < np.finfo(np.float64).resolution:
        return float(total)
    if s < 4:
        return float(total)

    acov = _autocovariance(arr)
    chain_mean = arr.mean(axis=1)
    mean_var = float(np.mean(acov[:, 0])) * s / (s - 1.0)
    var_plus = mean_var * (s - 1.0) / s
    if m > 1:
        var_plus += float(np.var(chain_mean, ddof=1))

    rho = np.zeros(s)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, 1]))) / var_plus
    rho[1] = rho_odd
    # Geyer initial positive sequence
    t = 1
    while t < s - 3 and (rho_even + rho_odd) > 0.0:
        rho_even = 1.0 - (mean_var - float(np.mean(acov[:, t + 1]))) / var_plus
        rho_odd = 1.0 - (mean_var - float(np.mean(acov[:, t + 2]))) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even
    # Geyer initial monotone adjustment
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * float(np.sum(rho[: max_t + 1])) + float(rho[max_t + 1])
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def _percentile(sorted_draws: np.ndarray, prob: float) -> float:
    """Linear-interpolation percentile on pre-sorted draws."""
    return float(np.quantile(sorted_draws, prob, method="linear"))


def summarize(draws, names=None) -> list[SummaryRow]:
    """Posterior mean, sd, equal-tailed 95% interval, R-hat, and ESS per parameter.

    ``draws`` is a DrawsMatrix or an array (chains, draws, params).  With
    ``names`` given, only those parameters are summarized (in that order).
    """
    if hasattr(draws, "values") and hasattr(draws, "names"):
        values = draws.values
        all_names = list(draws.names)
    else:
        values = np.asarray(draws, dtype=np.float64)
        if values.ndim == 2:
            values = values[None, :, :]
        all_names = [f"param[{j + 1}]" for j in range(values.shape[2])]
    if names is None:
        wanted = list(enumerate(all_names))
    else:
        index = {name: j for j, name in enumerate(all_names)}
        wanted = [(index[name], name) for name in names]

    n_chains, n_draws = values.shape[0], values.shape[1]
    rows = []
    for j, name in wanted:
        chains = values[:, :, j]
        flat = chains.ravel()
        mean = float(np.mean(flat))
        sd = float(np.std(flat, ddof=1)) if flat.size > 1 else 0.0
        lo = _percentile(flat, 0.025)
        hi = _percentile(flat, 0.975)
        if n_draws >= 4:
            rhat = split_rhat(chains)
            ess_val = ess(chains)
        else:
            rhat = math.nan
            ess_val = float(flat.size)
        rows.append(
            SummaryRow(
                name=name,
                posterior_mean=mean,
                posterior_sd=sd,
                ci_lower=lo,
                ci_upper=hi,
                rhat=rhat,
                ess=ess_val,
            )
        )
    return rows
