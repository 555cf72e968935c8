"""Joint log-posterior density and its analytic gradient.

Sampling happens in an unconstrained vector space.  Scales use the
exponential map (with log-Jacobian u per scale), the correlation Cholesky
factor is built from canonical partial correlations passed through tanh,
and all subject-level effects are non-centered: the coordinates are
standard-normal z values that are scaled by the hierarchical SDs (and, under
m2, rotated by the correlation factor) to produce the effects.

The pieces satisfy

    log_posterior(v) = log_likelihood + log_prior + log_jacobian

where log_prior includes the standard-normal densities of the non-centered
coordinates and log_jacobian covers only the transformed coordinates
(scales and correlation).  Gradients are exact analytic derivatives; no
autodiff framework is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import betaln

try:  # optional compiled kernel for the per-row likelihood pass
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally available
    numba = None
    HAVE_NUMBA = False

from .model import (
    M2_MULTIVARIATE,
    Dataset,
    ModelConfig,
    ParameterLayout,
    ParameterSet,
    layout as make_layout,
)

__all__ = [
    "DensityResult",
    "LogDensity",
    "from_unconstrained",
    "to_unconstrained",
    "log_likelihood",
    "log_prior",
    "log_posterior_gradient",
    "half_cauchy_logpdf",
    "lkj_logpdf",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DensityResult:
    """Log density and gradient at one unconstrained point."""

    log_density: float
    gradient: np.ndarray

    @property
    def finite(self) -> bool:
        """False signals a degenerate point the sampler must reject."""
        return bool(np.isfinite(self.log_density) and np.all(np.isfinite(self.gradient)))


# ---------------------------------------------------------------------------
# Elementary densities
# ---------------------------------------------------------------------------


def normal_logpdf(x, sd):
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * (x / sd) ** 2


def half_cauchy_logpdf(x, scale):
    """log density of |C(0, scale)| at x >= 0: 2 / (pi * s * (1 + (x/s)^2))."""
    x = np.asarray(x, dtype=np.float64)
    return math.log(2.0 / math.pi) - math.log(scale) - np.log1p((x / scale) ** 2)


def lkj_logpdf(corr_chol: np.ndarray, shape: float) -> float:
    """Normalized LKJ log density of the correlation matrix L L'.

    The density is with respect to Lebesgue measure on the strictly lower
    triangle of the correlation matrix, so for shape = 1 it is the same
    constant for every valid correlation matrix.
    """
    kk = corr_chol.shape[0]
    diag = np.diag(corr_chol)
    val = (shape - 1.0) * 2.0 * np.sum(np.log(diag))
    return float(val + _lkj_log_norm(shape, kk))


def _lkj_log_norm(shape: float, kk: int) -> float:
    """log normalizing constant of the LKJ density over correlation matrices."""
    out = 0.0
    for c in range(1, kk):  # 1-based column index of the Cholesky factor
        b = shape + 0.5 * (kk - 1 - c)
        out -= (kk - c) * ((2.0 * b - 1.0) * math.log(2.0) + betaln(b, b))
    return out


# ---------------------------------------------------------------------------
# Correlation Cholesky transform (canonical partial correlations via tanh)
# ---------------------------------------------------------------------------


def _chol_forward(y: np.ndarray, kk: int):
    """Build L from unconstrained coordinates, keeping intermediates.

    y holds the strictly-lower-triangular entries row-wise.  Returns
    (L, z, budget) where z = tanh(y) and budget[idx] is the remaining
    squared row norm before entry idx is placed.
    """
    z = np.tanh(y)
    el = np.zeros((kk, kk))
    el[0, 0] = 1.0
    budget = np.empty_like(y)
    idx = 0
    for r in range(1, kk):
        s = 1.0
        for c in range(r):
            budget[idx] = s
            el[r, c] = z[idx] * math.sqrt(s)
            s *= 1.0 - z[idx] * z[idx]
            idx += 1
        el[r, r] = math.sqrt(max(s, 0.0))
    return el, z, budget


def _chol_backward(gy: np.ndarray, g_el: np.ndarray, el, z, budget, kk: int) -> None:
    """Accumulate d(target)/dy into gy given d(target)/dL in g_el."""
    idx_end = len(z)
    for r in range(kk - 1, 0, -1):
        idx0 = idx_end - r
        diag = el[r, r]
        sbar = 0.5 * g_el[r, r] / diag if diag > 0.0 else 0.0
        for c in range(r - 1, -1, -1):
            i = idx0 + c
            zi = z[i]
            s = budget[i]
            sq = math.sqrt(s)
            zbar = g_el[r, c] * sq - 2.0 * sbar * s * zi
            sbar = sbar * (1.0 - zi * zi) + (0.5 * g_el[r, c] * zi / sq if sq > 0.0 else 0.0)
            gy[i] += zbar * (1.0 - zi * zi)
        idx_end = idx0


def _chol_to_canonical(el: np.ndarray, kk: int) -> np.ndarray:
    """Invert the Cholesky construction back to unconstrained coordinates."""
    y = np.empty(kk * (kk - 1) // 2)
    idx = 0
    for r in range(1, kk):
        s = 1.0
        for c in range(r):
            z = el[r, c] / math.sqrt(s)
            y[idx] = np.arctanh(z)
            s *= 1.0 - z * z
            idx += 1
    return y


def _corr_log_jacobian(el, z, budget, kk: int) -> float:
    """log |d Omega / d y|: tanh, z -> L, and L -> Omega contributions."""
    if len(z) == 0:
        return 0.0
    val = float(np.sum(np.log1p(-z * z)) + 0.5 * np.sum(np.log(budget)))
    diag = np.diag(el)
    for c in range(kk - 1):  # L[0, 0] = 1 contributes nothing
        val += (kk - 1 - c) * math.log(diag[c])
    return val


# ---------------------------------------------------------------------------
# Unconstrained <-> constrained maps
# ---------------------------------------------------------------------------


def from_unconstrained(
    point: np.ndarray, layout: ParameterLayout, config: ModelConfig
) -> tuple[ParameterSet, float]:
    """Map an unconstrained vector to a ParameterSet and its log-Jacobian.

    The map is total: any finite vector produces valid parameters (scales
    via exp, correlations via tanh-built Cholesky rows, intercepts completed
    to sum-to-zero).
    """
    point = np.asarray(point, dtype=np.float64)
    p, n = layout.p, layout.n
    beta = np.zeros((p, layout.d))
    beta.ravel()[list(layout.beta_index)] = point[layout.slice("beta")]

    u_gamma = point[layout.slice("gamma")]
    u_sigma = point[layout.slice("sigma")]
    u_sdelta = point[layout.slice("sigma_delta")]
    u_s0 = point[layout.slice("sigma_alpha0")]
    u_s1 = point[layout.slice("sigma_alpha1")]
    with np.errstate(over="ignore"):
        gamma = np.exp(u_gamma)
        sigma = np.exp(u_sigma)
        sigma_delta = float(np.exp(u_sdelta[0]))
        sigma_alpha0 = np.exp(u_s0)
        sigma_alpha1 = np.exp(u_s1)
    log_jac = float(u_gamma.sum() + u_sigma.sum() + u_sdelta.sum() + u_s0.sum() + u_s1.sum())

    z_delta = point[layout.slice("delta")]
    z0 = point[layout.slice("alpha0")].reshape(n, p - 1)
    z1 = point[layout.slice("alpha1")].reshape(n, p)

    delta = sigma_delta * z_delta
    corr_chol = None
    if layout.re_variant == M2_MULTIVARIATE:
        kk = 2 * p - 1
        el, z, budget = _chol_forward(point[layout.slice("corr_chol")], kk)
        corr_chol = el
        log_jac += _corr_log_jacobian(el, z, budget, kk)
        lam = np.concatenate([sigma_alpha0, sigma_alpha1])
        effects = (np.hstack([z0, z1]) @ el.T) * lam
        alpha0_free = effects[:, : p - 1]
        alpha1 = effects[:, p - 1 :]
    else:
        alpha0_free = z0 * sigma_alpha0
        alpha1 = z1 * sigma_alpha1

    params = ParameterSet(
        beta=beta,
        gamma=gamma,
        sigma=sigma,
        sigma_delta=sigma_delta,
        sigma_alpha0=sigma_alpha0,
        sigma_alpha1=sigma_alpha1,
        delta=delta,
        alpha0_free=alpha0_free,
        alpha1=alpha1,
        corr_chol=corr_chol,
    )
    return params, log_jac


def to_unconstrained(params: ParameterSet, layout: ParameterLayout, config: ModelConfig) -> np.ndarray:
    """Inverse of :func:`from_unconstrained` (exact up to float rounding)."""
    v = np.empty(layout.total_dim)
    v[layout.slice("beta")] = params.beta.ravel()[list(layout.beta_index)]
    v[layout.slice("gamma")] = np.log(params.gamma)
    v[layout.slice("sigma")] = np.log(params.sigma)
    v[layout.slice("sigma_delta")] = math.log(params.sigma_delta)
    v[layout.slice("sigma_alpha0")] = np.log(params.sigma_alpha0)
    v[layout.slice("sigma_alpha1")] = np.log(params.sigma_alpha1)
    v[layout.slice("delta")] = params.delta / params.sigma_delta
    if layout.re_variant == M2_MULTIVARIATE:
        kk = 2 * layout.p - 1
        v[layout.slice("corr_chol")] = _chol_to_canonical(params.corr_chol, kk)
        lam = np.concatenate([params.sigma_alpha0, params.sigma_alpha1])
        effects = np.hstack([params.alpha0_free, params.alpha1])
        z = solve_triangular(params.corr_chol, (effects / lam).T, lower=True).T
        v[layout.slice("alpha0")] = z[:, : layout.p - 1].ravel()
        v[layout.slice("alpha1")] = z[:, layout.p - 1 :].ravel()
    else:
        v[layout.slice("alpha0")] = (params.alpha0_free / params.sigma_alpha0).ravel()
        v[layout.slice("alpha1")] = (params.alpha1 / params.sigma_alpha1).ravel()
    return v


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


class PreparedData:
    """Dataset unpacked into the flat arrays the likelihood loops over."""

    def __init__(self, dataset: Dataset):
        self.n = dataset.n
        self.p = dataset.p
        self.d = dataset.d
        self.subj = dataset.subject_idx
        self.out = dataset.outcome_idx
        self.time = dataset.time
        self.x = dataset.covariates
        self.y = dataset.value
        self.n_rows = dataset.n_rows
        # combined (subject, outcome) cell index for bincount reductions
        self.cell = self.subj * self.p + self.out
        self.n_per_outcome = np.bincount(self.out, minlength=self.p).astype(np.float64)


def _likelihood_pass_numpy(subj, out, cell, t, x, y, n, p, d, beta, gamma, sigma2, delta, a0_flat, a1_flat):
    """One data pass: residual reductions and accumulated likelihood gradients."""
    xb = np.einsum("nj,nj->n", x, beta[out]) if d else 0.0
    shifted = t + delta[subj]
    eta = xb + gamma[out] * shifted + a0_flat[cell] + a1_flat[cell] * t
    res = y - eta
    w = res / sigma2[out]
    ssr = np.bincount(out, weights=res * res, minlength=p)
    g_cell = np.bincount(cell, weights=w, minlength=n * p)
    g1_cell = np.bincount(cell, weights=w * t, minlength=n * p)
    g_gamma = np.bincount(out, weights=w * shifted, minlength=p)
    g_delta = np.bincount(subj, weights=w * gamma[out], minlength=n)
    g_beta = np.empty((p, d))
    for j in range(d):
        g_beta[:, j] = np.bincount(out, weights=w * x[:, j], minlength=p)
    return ssr, g_cell, g1_cell, g_gamma, g_delta, g_beta


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _likelihood_pass_numba(subj, out, cell, t, x, y, n, p, d, beta, gamma, sigma2, delta, a0_flat, a1_flat):
        ssr = np.zeros(p)
        g_cell = np.zeros(n * p)
        g1_cell = np.zeros(n * p)
        g_gamma = np.zeros(p)
        g_delta = np.zeros(n)
        g_beta = np.zeros((p, d))
        for r in range(len(y)):
            k = out[r]
            i = subj[r]
            c = cell[r]
            tr = t[r]
            shifted = tr + delta[i]
            eta = gamma[k] * shifted + a0_flat[c] + a1_flat[c] * tr
            for j in range(d):
                eta += x[r, j] * beta[k, j]
            res = y[r] - eta
            ssr[k] += res * res
            w = res / sigma2[k]
            g_cell[c] += w
            g1_cell[c] += w * tr
            g_gamma[k] += w * shifted
            g_delta[i] += w * gamma[k]
            for j in range(d):
                g_beta[k, j] += w * x[r, j]
        return ssr, g_cell, g1_cell, g_gamma, g_delta, g_beta

    _likelihood_pass = _likelihood_pass_numba
else:  # pragma: no cover - exercised only without numba
    _likelihood_pass = _likelihood_pass_numpy

    def linear_predictor(self, params: ParameterSet) -> np.ndarray:
        xb = np.einsum("nj,nj->n", self.x, params.beta[self.out]) if self.d else 0.0
        a0 = params.alpha0_full().ravel()[self.cell]
        a1 = params.alpha1.ravel()[self.cell]
        return xb + params.gamma[self.out] * (self.time + params.delta[self.subj]) + a0 + a1 * self.time


def log_likelihood(params: ParameterSet, dataset: Dataset, prepared: PreparedData | None = None) -> float:
    """Gaussian identity-link log likelihood summed over all rows."""
    prep = prepared if prepared is not None else PreparedData(dataset)
    eta = prep.linear_predictor(params)
    res = prep.y - eta
    ssr = np.bincount(prep.out, weights=res * res, minlength=prep.p)
    return float(
        -np.sum(prep.n_per_outcome * (0.5 * _LOG_2PI + np.log(params.sigma)))
        - 0.5 * np.sum(ssr / (params.sigma**2))
    )


def pointwise_loglik_rows(params: ParameterSet, prep: PreparedData) -> np.ndarray:
    """Per-observation Gaussian log densities (conditional on all effects)."""
    eta = prep.linear_predictor(params)
    sd = params.sigma[prep.out]
    res = prep.y - eta
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * (res / sd) ** 2


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------


def _prior_terms(params: ParameterSet, config: ModelConfig, layout: ParameterLayout, include=None) -> float:
    """Sum of prior log densities over the requested blocks (None = all)."""

    def wanted(name):
        return include is None or name in include

    sd_fixed = math.sqrt(config.prior_scale_fixed)
    hc = config.prior_scale_half_cauchy
    val = 0.0
    if wanted("beta") and len(layout.beta_index):
        free_beta = params.beta.ravel()[list(layout.beta_index)]
        val += float(np.sum(normal_logpdf(free_beta, sd_fixed)))
    if wanted("gamma"):
        val += float(np.sum(math.log(2.0) + normal_logpdf(params.gamma, sd_fixed)))
    if wanted("sigma"):
        val += float(np.sum(half_cauchy_logpdf(params.sigma, hc)))
    if wanted("sigma_delta"):
        val += float(half_cauchy_logpdf(params.sigma_delta, hc))
    if wanted("sigma_alpha0"):
        val += float(np.sum(half_cauchy_logpdf(params.sigma_alpha0, hc)))
    if wanted("sigma_alpha1"):
        val += float(np.sum(half_cauchy_logpdf(params.sigma_alpha1, hc)))
    if wanted("corr_chol") and layout.re_variant == M2_MULTIVARIATE and layout.p > 1:
        val += lkj_logpdf(params.corr_chol, config.lkj_shape)
    return val


def _z_prior(z_delta, z0, z1) -> float:
    ss = float(np.dot(z_delta, z_delta) + np.sum(z0 * z0) + np.sum(z1 * z1))
    count = z_delta.size + z0.size + z1.size
    return -0.5 * (count * _LOG_2PI + ss)


def log_prior(params: ParameterSet, config: ModelConfig, layout: ParameterLayout | None = None) -> float:
    """Joint log prior at a ParameterSet.

    Includes the standard-normal densities of the non-centered subject
    coordinates, which are recovered from the stored effects.
    """
    if layout is None:
        n, pm1 = params.alpha0_free.shape
        layout = make_layout(config, n, pm1 + 1, params.beta.shape[1])
    val = _prior_terms(params, config, layout)
    z_delta = params.delta / params.sigma_delta
    if layout.re_variant == M2_MULTIVARIATE:
        lam = np.concatenate([params.sigma_alpha0, params.sigma_alpha1])
        effects = np.hstack([params.alpha0_free, params.alpha1])
        z = solve_triangular(params.corr_chol, (effects / lam).T, lower=True).T
        z0, z1 = z[:, : layout.p - 1], z[:, layout.p - 1 :]
    else:
        z0 = params.alpha0_free / params.sigma_alpha0
        z1 = params.alpha1 / params.sigma_alpha1
    return val + _z_prior(z_delta, z0, z1)


# ---------------------------------------------------------------------------
# Posterior density with analytic gradient
# ---------------------------------------------------------------------------


class LogDensity:
    """Callable log posterior with analytic gradient, with optional pinning.

    Blocks named in ``config.fixed`` are held at their given constrained
    values and removed from the sampled coordinates; their prior terms are
    constants and are dropped.  ``value_and_grad`` consumes and produces
    vectors of length ``free_dim``.
    """

    def __init__(self, dataset: Dataset, config: ModelConfig, layout: ParameterLayout | None = None):
        self.config = config
        self.layout = layout if layout is not None else make_layout(config, dataset.n, dataset.p, dataset.d)
        self.prep = PreparedData(dataset)
        if (self.prep.n, self.prep.p, self.prep.d) != (self.layout.n, self.layout.p, self.layout.d):
            raise ValueError("layout does not match dataset dimensions")

        fixed = dict(config.fixed or {})
        self._fixed_blocks = set(fixed)
        self._template = np.zeros(self.layout.total_dim)
        free_mask = np.ones(self.layout.total_dim, dtype=bool)
        for name, value in fixed.items():
            sl = self.layout.slice(name)
            arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
            if arr.size != sl.stop - sl.start:
                raise ValueError(f"pinned block {name!r} has size {arr.size}, expected {sl.stop - sl.start}")
            if name == "beta":
                self._template[sl] = arr
            else:
                if np.any(arr <= 0):
                    raise ValueError(f"pinned block {name!r} must be positive")
                self._template[sl] = np.log(arr)
            free_mask[sl] = False
        self.free_index = np.flatnonzero(free_mask)
        self.free_dim = int(len(self.free_index))
        self._sampled_blocks = tuple(
            name for name, _o, size in self.layout.blocks if size and name not in self._fixed_blocks
        )
        # free-coordinate block name lookup for sampler diagnostics
        self.free_block_names = [self.layout.block_of(int(i)) for i in self.free_index]

        lay = self.layout
        self._sl = {name: lay.slice(name) for name, _o, _s in lay.blocks}
        self._beta_index = np.asarray(lay.beta_index, dtype=np.intp)
        self._m2 = lay.re_variant == M2_MULTIVARIATE
        if self._m2:
            kk = 2 * lay.p - 1
            self._kk = kk
            # per-coordinate column index (0-based) of the canonical partial
            # correlations, row-wise lower triangle order
            cols = [c for r in range(1, kk) for c in range(r)]
            self._corr_col = np.asarray(cols, dtype=np.intp)
            eta = config.lkj_shape
            self._corr_beta = eta + 0.5 * (kk - 1 - (self._corr_col + 1))
            self._corr_log_norm = _lkj_log_norm(eta, kk)

    # -- embedding ----------------------------------------------------------

    def embed(self, vfree: np.ndarray) -> np.ndarray:
        full = self._template.copy()
        full[self.free_index] = vfree
        return full

    def params_at(self, vfree: np.ndarray) -> tuple[ParameterSet, float]:
        """ParameterSet and log-Jacobian of the free coordinates."""
        full = self.embed(vfree)
        params, _ = from_unconstrained(full, self.layout, self.config)
        log_jac = self._free_log_jacobian(full)
        return params, log_jac

    def _free_log_jacobian(self, full: np.ndarray) -> float:
        lay = self.layout
        val = 0.0
        for name in ("gamma", "sigma", "sigma_delta", "sigma_alpha0", "sigma_alpha1"):
            if name not in self._fixed_blocks:
                val += float(full[lay.slice(name)].sum())
        if self._m2:
            el, z, budget = _chol_forward(full[lay.slice("corr_chol")], self._kk)
            val += _corr_log_jacobian(el, z, budget, self._kk)
        return val

    # -- density ------------------------------------------------------------

    def value_and_grad(self, vfree: np.ndarray) -> DensityResult:
        """Log posterior and exact gradient at a free-coordinate vector."""
        lay, prep, config = self.layout, self.prep, self.config
        sl = self._sl
        p, n, d = lay.p, lay.n, lay.d
        full = self.embed(vfree)
        grad = np.zeros(lay.total_dim)

        beta = np.zeros((p, d))
        beta.ravel()[self._beta_index] = full[sl["beta"]]
        u_gamma = full[sl["gamma"]]
        u_sigma = full[sl["sigma"]]
        u_sdelta = float(full[sl["sigma_delta"]][0])
        u_s0 = full[sl["sigma_alpha0"]]
        u_s1 = full[sl["sigma_alpha1"]]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            gamma = np.exp(u_gamma)
            sigma = np.exp(u_sigma)
            sigma_delta = math.exp(u_sdelta) if u_sdelta < 700 else math.inf
            s_alpha0 = np.exp(u_s0)
            s_alpha1 = np.exp(u_s1)
            if not (
                np.all(np.isfinite(gamma))
                and np.all(np.isfinite(sigma))
                and math.isfinite(sigma_delta)
                and np.all(np.isfinite(s_alpha0))
                and np.all(np.isfinite(s_alpha1))
            ):
                return DensityResult(-math.inf, grad[self.free_index])

            z_delta = full[sl["delta"]]
            z0 = full[sl["alpha0"]].reshape(n, p - 1)
            z1 = full[sl["alpha1"]].reshape(n, p)
            delta = sigma_delta * z_delta

            lam = el = z_corr = budget = zmat = effects = None
            if self._m2:
                el, z_corr, budget = _chol_forward(full[sl["corr_chol"]], self._kk)
                lam = np.concatenate([s_alpha0, s_alpha1])
                zmat = np.hstack([z0, z1])
                effects = (zmat @ el.T) * lam
                alpha0_free = effects[:, : p - 1]
                alpha1 = effects[:, p - 1 :]
            else:
                alpha0_free = z0 * s_alpha0
                alpha1 = z1 * s_alpha1

            # --- likelihood: one pass over rows
            a0_full = np.empty((n, p))
            a0_full[:, : p - 1] = alpha0_free
            a0_full[:, p - 1] = -alpha0_free.sum(axis=1)
            sigma2 = sigma * sigma
            ssr, g_cell, g1_cell, g_gamma_c, g_delta, g_beta = _likelihood_pass(
                prep.subj, prep.out, prep.cell, prep.time, prep.x, prep.y,
                n, p, d, beta, gamma, sigma2, delta, a0_full.ravel(), alpha1.ravel(),
            )
            loglik = float(
                -np.dot(prep.n_per_outcome, 0.5 * _LOG_2PI + u_sigma) - 0.5 * np.sum(ssr / sigma2)
            )
            if not math.isfinite(loglik):
                return DensityResult(-math.inf, grad[self.free_index])

            g_cell = g_cell.reshape(n, p)
            g1 = g1_cell.reshape(n, p)
            g0 = g_cell[:, : p - 1] - g_cell[:, p - 1 :]
            if d:
                grad[sl["beta"]] = g_beta.ravel()[self._beta_index]

            # --- priors on population parameters, plus transform Jacobians
            sd_fixed = math.sqrt(config.prior_scale_fixed)
            hc = config.prior_scale_half_cauchy
            logp = loglik

            free_beta = beta.ravel()[self._beta_index]
            if "beta" not in self._fixed_blocks and len(self._beta_index):
                logp += float(np.sum(normal_logpdf(free_beta, sd_fixed)))
                grad[sl["beta"]] += -free_beta / config.prior_scale_fixed

            grad[sl["gamma"]] = gamma * g_gamma_c
            if "gamma" not in self._fixed_blocks:
                logp += float(np.sum(math.log(2.0) + normal_logpdf(gamma, sd_fixed))) + float(np.sum(u_gamma))
                grad[sl["gamma"]] += -(gamma * gamma) / config.prior_scale_fixed + 1.0

            grad[sl["sigma"]] = -prep.n_per_outcome + ssr / sigma2  # d loglik / d log sigma
            if "sigma" not in self._fixed_blocks:
                logp += float(np.sum(half_cauchy_logpdf(sigma, hc))) + float(np.sum(u_sigma))
                grad[sl["sigma"]] += -2.0 * sigma2 / (hc * hc + sigma2) + 1.0

            # hierarchical effects: gradients wrt scales, z coordinates, correlation
            grad[sl["sigma_delta"]] = float(np.dot(g_delta, delta))
            if "sigma_delta" not in self._fixed_blocks:
                logp += float(half_cauchy_logpdf(sigma_delta, hc)) + u_sdelta
                grad[sl["sigma_delta"]] += -2.0 * sigma_delta**2 / (hc * hc + sigma_delta**2) + 1.0
            grad[sl["delta"]] = sigma_delta * g_delta - z_delta

            if self._m2:
                gmat = np.hstack([g0, g1])  # d loglik / d effects, (n, 2p-1)
                lam_g = gmat * lam
                grad_z = lam_g @ el
                g_el = lam_g.T @ zmat  # d loglik / d L (lower incl. diagonal used)
                g_lam_u = np.einsum("na,na->a", gmat, effects)
                gy = np.zeros(len(z_corr))
                _chol_backward(gy, g_el, el, z_corr, budget, self._kk)
                # LKJ prior plus full correlation-block Jacobian, combined in
                # unconstrained coordinates: sum_c beta_c * log(1 - z^2) + const
                one_m_z2 = 1.0 - z_corr * z_corr
                if np.any(one_m_z2 <= 0.0):
                    return DensityResult(-math.inf, grad[self.free_index])
                logp += float(np.sum(self._corr_beta * np.log(one_m_z2))) + self._corr_log_norm
                gy += -2.0 * self._corr_beta * z_corr
                grad[sl["corr_chol"]] = gy
                grad[sl["sigma_alpha0"]] = g_lam_u[: p - 1]
                grad[sl["sigma_alpha1"]] = g_lam_u[p - 1 :]
                gz0 = grad_z[:, : p - 1]
                gz1 = grad_z[:, p - 1 :]
            else:
                grad[sl["sigma_alpha0"]] = np.einsum("nk,nk->k", g0, alpha0_free)
                grad[sl["sigma_alpha1"]] = np.einsum("nk,nk->k", g1, alpha1)
                gz0 = g0 * s_alpha0
                gz1 = g1 * s_alpha1
            if "sigma_alpha0" not in self._fixed_blocks and p > 1:
                logp += float(np.sum(half_cauchy_logpdf(s_alpha0, hc))) + float(np.sum(u_s0))
                grad[sl["sigma_alpha0"]] += -2.0 * s_alpha0**2 / (hc * hc + s_alpha0**2) + 1.0
            if "sigma_alpha1" not in self._fixed_blocks:
                logp += float(np.sum(half_cauchy_logpdf(s_alpha1, hc))) + float(np.sum(u_s1))
                grad[sl["sigma_alpha1"]] += -2.0 * s_alpha1**2 / (hc * hc + s_alpha1**2) + 1.0

            grad[sl["alpha0"]] = (gz0 - z0).ravel()
            grad[sl["alpha1"]] = (gz1 - z1).ravel()
            logp += _z_prior(z_delta, z0, z1)

        if not math.isfinite(logp):
            return DensityResult(-math.inf, grad[self.free_index])
        return DensityResult(logp, grad[self.free_index])

    def __call__(self, vfree: np.ndarray) -> DensityResult:
        return self.value_and_grad(vfree)


def log_posterior_gradient(
    point: np.ndarray, dataset: Dataset, layout: ParameterLayout, config: ModelConfig
) -> DensityResult:
    """Log posterior density and analytic gradient at a full unconstrained point.

    Convenience wrapper over :class:`LogDensity` for unpinned models; for
    repeated evaluation construct a LogDensity once and call it.
    """
    if config.fixed:
        raise ValueError("log_posterior_gradient expects an unpinned config")
    return LogDensity(dataset, config, layout).value_and_grad(np.asarray(point, dtype=np.float64))
