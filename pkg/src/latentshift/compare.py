"""Information criteria over pointwise log likelihoods, and model comparison.

All criteria are reported on the deviance scale (lower is better).  The
pointwise matrix conditions on the subject-level effects, so WAIC, PSIS-LOO,
and DIC are mutually comparable.  PSIS-LOO smooths the importance-weight
tails with a generalized Pareto fit and reports the shape diagnostic k-hat
per observation; values above 0.7 flag unreliable observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import Dataset
from .posterior import PreparedData, pointwise_loglik_rows

__all__ = [
    "PointwiseLogLik",
    "CriterionResult",
    "ComparisonTable",
    "pointwise_loglik",
    "waic",
    "psis_loo",
    "dic",
    "compare",
    "fit_generalized_pareto",
    "smooth_log_weights",
    "KHAT_WARN_THRESHOLD",
]

KHAT_WARN_THRESHOLD = 0.7


@dataclass
class PointwiseLogLik:
    """Draws-by-observations matrix of conditional log likelihoods."""

    values: np.ndarray  # (S, N)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("pointwise log likelihood must be (draws, observations)")

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def n_obs(self) -> int:
        return self.values.shape[1]


@dataclass
class CriterionResult:
    """One information criterion on the deviance scale."""

    criterion: str
    value: float
    effective_params: float
    pointwise: np.ndarray  # per-observation contributions (elpd/deviance terms)
    n_obs: int
    pareto_k: np.ndarray | None = None  # PSIS only
    warnings: list = field(default_factory=list)

    @property
    def n_high_k(self) -> int:
        if self.pareto_k is None:
            return 0
        return int(np.sum(self.pareto_k > KHAT_WARN_THRESHOLD))


def pointwise_loglik(draws, dataset: Dataset) -> PointwiseLogLik:
    """Per-draw, per-observation Gaussian log densities.

    Row s sums to the joint log likelihood of draw s (conditional on that
    draw's subject-level effects).
    """
    prep = PreparedData(dataset)
    stacked = draws.stacked()
    layout = draws.layout
    out = np.empty((stacked.shape[0], prep.n_rows))
    for s in range(stacked.shape[0]):
        params = layout.unpack(stacked[s])
        out[s] = pointwise_loglik_rows(params, prep)
    return PointwiseLogLik(out)


# ---------------------------------------------------------------------------
# WAIC
# ---------------------------------------------------------------------------


def waic(ll: PointwiseLogLik) -> CriterionResult:
    """Widely applicable information criterion: -2 * sum(lppd_i - p_i)."""
    values = ll.values
    s = ll.n_draws
    lppd = logsumexp(values, axis=0) - math.log(s)
    p_waic = np.var(values, axis=0, ddof=1) if s > 1 else np.zeros(ll.n_obs)
    elpd_i = lppd - p_waic
    return CriterionResult(
        criterion="waic",
        value=float(-2.0 * np.sum(elpd_i)),
        effective_params=float(np.sum(p_waic)),
        pointwise=-2.0 * elpd_i,
        n_obs=ll.n_obs,
    )


# ---------------------------------------------------------------------------
# PSIS-LOO
# ---------------------------------------------------------------------------


def fit_generalized_pareto(tail: np.ndarray) -> tuple[float, float]:
    """Profile / empirical-Bayes fit of the generalized Pareto (k, sigma).

    ``tail`` holds exceedances above the cutoff (positive values).  Uses the
    quadrature profile posterior over the reparameterized scale with a weak
    prior pulling k toward 1/2 for stability at small tail sizes.
    """
    x = np.sort(np.asarray(tail, dtype=np.float64))
    n = len(x)
    if n < 2 or x[-1] <= 0:
        return math.inf, math.nan
    prior_scale = 3.0
    m_points = 30 + int(math.isqrt(n))
    i = np.arange(1, m_points + 1, dtype=np.float64)
    b = 1.0 - np.sqrt(m_points / (i - 0.5))
    b = b / (prior_scale * x[int(n / 4 + 0.5) - 1]) + 1.0 / x[-1]
    k_grid = np.log1p(-b[:, None] * x).mean(axis=1)
    log_lik = n * (np.log(-b / k_grid) - k_grid - 1.0)
    weights = 1.0 / np.exp(log_lik - log_lik[:, None]).sum(axis=1)
    keep = weights >= 10.0 * np.finfo(np.float64).eps
    weights = weights[keep] / weights[keep].sum()
    b_post = float(np.sum(b[keep] * weights))
    k_hat = float(np.log1p(-b_post * x).mean())
    sigma = -k_hat / b_post
    # weak prior: shrink k toward 1/2 with weight 10 pseudo-observations
    k_hat = (n * k_hat + 10.0 * 0.5) / (n + 10.0)
    return k_hat, float(sigma)


def _gpd_quantile(probs: np.ndarray, k: float, sigma: float) -> np.ndarray:
    if abs(k) < 1e-15:
        return sigma * (-np.log1p(-probs))
    return sigma * np.expm1(-k * np.log1p(-probs)) / k


def smooth_log_weights(log_ratios: np.ndarray) -> tuple[np.ndarray, float]:
    """Pareto-smooth one vector of log importance ratios.

    The M = min(ceil(0.2 S), ceil(3 sqrt(S))) largest log weights are
    replaced by expected order statistics of a generalized Pareto fit to
    the tail, then truncated at the raw maximum.  Returns normalized log
    weights (logsumexp = 0) and the tail shape k-hat; -inf signals a
    degenerate all-equal vector where smoothing was skipped.
    """
    lw = np.asarray(log_ratios, dtype=np.float64).copy()
    s = len(lw)
    lw -= np.max(lw)
    if np.all(lw == lw[0]):
        return lw - logsumexp(lw), -math.inf
    m = min(math.ceil(0.2 * s), math.ceil(3.0 * math.sqrt(s)))
    k_hat = -math.inf
    if s >= 5 and m >= 5:
        order = np.argsort(lw)
        cutoff = max(lw[order[-m - 1]], math.log(np.finfo(np.float64).tiny))
        tail_ids = order[lw[order] > cutoff]
        n_tail = len(tail_ids)
        if n_tail >= 5:
            tail_ids = tail_ids[np.argsort(lw[tail_ids])]
            exceedances = np.exp(lw[tail_ids]) - math.exp(cutoff)
            k_hat, sigma = fit_generalized_pareto(exceedances)
            if math.isfinite(k_hat) and sigma > 0:
                probs = (np.arange(n_tail) + 0.5) / n_tail
                smoothed = np.log(_gpd_quantile(probs, k_hat, sigma) + math.exp(cutoff))
                lw[tail_ids] = np.minimum(smoothed, 0.0)  # truncate at raw max
    return lw - logsumexp(lw), k_hat


def psis_loo(ll: PointwiseLogLik, rng=None) -> CriterionResult:
    """PSIS leave-one-out criterion (LOOIC).

    ``rng`` is accepted for interface compatibility; the estimator is
    deterministic.  Below 5 draws the raw importance-sampling estimate is
    used (no tail to fit).  Observations with k-hat above 0.7 are listed in
    the result warnings.
    """
    values = ll.values
    n = ll.n_obs
    elpd = np.empty(n)
    k_hats = np.empty(n)
    for i in range(n):
        col = values[:, i]
        log_w, k_hat = smooth_log_weights(-col)
        elpd[i] = logsumexp(log_w + col)
        k_hats[i] = k_hat
    result = CriterionResult(
        criterion="looic",
        value=float(-2.0 * np.sum(elpd)),
        effective_params=float(np.sum(logsumexp(values, axis=0) - math.log(ll.n_draws) - elpd)),
        pointwise=-2.0 * elpd,
        n_obs=n,
        pareto_k=k_hats,
    )
    high = result.n_high_k
    if high:
        result.warnings.append(
            f"{high} of {n} observations have Pareto k-hat > {KHAT_WARN_THRESHOLD}; "
            "their LOO contributions may be unreliable"
        )
    return result


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------


def dic(draws, dataset: Dataset) -> CriterionResult:
    """Deviance information criterion with the posterior-mean plug-in.

    D(theta) = -2 log lik; p_D = mean(D) - D(posterior mean); value =
    D(posterior mean) + 2 p_D.  The plug-in point is the constrained-space
    posterior mean, which is well-defined because the likelihood does not
    involve the correlation factor.
    """
    prep = PreparedData(dataset)
    stacked = draws.stacked()
    layout = draws.layout
    mean_params = layout.unpack(stacked.mean(axis=0))
    rows_hat = pointwise_loglik_rows(mean_params, prep)
    d_hat = -2.0 * rows_hat
    mean_dev_rows = np.zeros(prep.n_rows)
    for s in range(stacked.shape[0]):
        params = layout.unpack(stacked[s])
        mean_dev_rows += -2.0 * pointwise_loglik_rows(params, prep)
    mean_dev_rows /= stacked.shape[0]
    p_d = float(np.sum(mean_dev_rows - d_hat))
    return CriterionResult(
        criterion="dic",
        value=float(np.sum(d_hat) + 2.0 * p_d),
        effective_params=p_d,
        pointwise=d_hat + 2.0 * (mean_dev_rows - d_hat),
        n_obs=prep.n_rows,
    )


# ---------------------------------------------------------------------------
# Comparison across models / replicates
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    """Pairwise criterion differences and winner tallies across replicates."""

    criterion: str
    models: list
    n_replicates: int
    values: dict  # model -> array of criterion values over replicates
    winners: list  # winning model per replicate (ties -> earlier model)
    winner_fraction: dict  # model -> fraction of replicates won
    differences: dict  # (model_a, model_b) -> array of value_a - value_b
    quartiles: dict  # (model_a, model_b) -> (q1, q2, q3)


def compare(results_by_model: dict) -> ComparisonTable:
    """Compare criterion results across models, replicate by replicate.

    ``results_by_model`` maps model name to a CriterionResult or an equal
    length list of them (one per replicate).  All results must share the
    criterion and the observation count; mismatched N raises ValueError
    naming the models.
    """
    if len(results_by_model) < 2:
        raise ValueError("need at least two models to compare")
    normalized: dict[str, list[CriterionResult]] = {}
    for name, results in results_by_model.items():
        normalized[name] = list(results) if isinstance(results, (list, tuple)) else [results]
    models = list(normalized)
    lengths = {name: len(rs) for name, rs in normalized.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"replicate counts differ across models: {lengths}")
    n_rep = lengths[models[0]]
    criterion = normalized[models[0]][0].criterion
    first = models[0]
    for name in models[1:]:
        for m in range(n_rep):
            a, b = normalized[first][m], normalized[name][m]
            if a.n_obs != b.n_obs:
                raise ValueError(
                    f"models {first!r} and {name!r} have different observation "
                    f"counts in replicate {m}: {a.n_obs} vs {b.n_obs}"
                )
            if b.criterion != criterion:
                raise ValueError(f"model {name!r} uses criterion {b.criterion!r}, expected {criterion!r}")

    values = {name: np.array([r.value for r in normalized[name]]) for name in models}
    winners = []
    for m in range(n_rep):
        best = min(models, key=lambda name: (values[name][m], models.index(name)))
        winners.append(best)
    winner_fraction = {name: winners.count(name) / n_rep for name in models}
    differences = {}
    quartiles = {}
    for i, a in enumerate(models):
        for b in models[i + 1 :]:
            diff = values[a] - values[b]
            differences[(a, b)] = diff
            quartiles[(a, b)] = tuple(float(np.quantile(diff, q, method="linear")) for q in (0.25, 0.5, 0.75))
    return ComparisonTable(
        criterion=criterion,
        models=models,
        n_replicates=n_rep,
        values=values,
        winners=winners,
        winner_fraction=winner_fraction,
        differences=differences,
        quartiles=quartiles,
    )
