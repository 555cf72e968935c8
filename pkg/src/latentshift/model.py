"""Model and data schema for latent time-shift joint mixed-effects models.

The model couples p longitudinal outcomes through a shared per-subject time
shift delta_i.  For subject i, outcome k, visit time t the linear predictor is

    eta = x' beta_k + gamma_k * (t + delta_i) + a0[i,k] + a1[i,k] * t

with Gaussian residuals sd sigma_k.  Identifiability requires the random
intercepts a0 to sum to zero within each subject, the stacked design [x | t]
to have full column rank, and t to be linearly independent of the constant
column; those conditions are checked by :func:`validate_dataset`.

Two random-effect families are supported: independent Gaussian effects
("m1") and jointly Gaussian effects with a full correlation matrix over the
2p-1 free effects ("m2").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "M1_UNIVARIATE",
    "M2_MULTIVARIATE",
    "Observation",
    "Dataset",
    "ModelConfig",
    "ParameterSet",
    "ParameterLayout",
    "ValidationReport",
    "validate_dataset",
    "layout",
]

M1_UNIVARIATE = "m1"
M2_MULTIVARIATE = "m2"

# Relative tolerance for numerical rank decisions on the stacked design.
RANK_RTOL = 1e-10

# Blocks of ParameterSet that may be pinned to fixed values via
# ModelConfig.fixed (they are then excluded from sampling).
PINNABLE_BLOCKS = (
    "beta",
    "gamma",
    "sigma",
    "sigma_delta",
    "sigma_alpha0",
    "sigma_alpha1",
)


@dataclass(frozen=True)
class Observation:
    """One measurement row: subject, outcome, visit time, covariates, value.

    ``subject`` and ``outcome`` are arbitrary hashable labels; Dataset maps
    them to contiguous integer indices by first appearance.
    """

    subject: object
    outcome: object
    time: float
    covariates: Sequence[float]
    value: float


class Dataset:
    """Long-format longitudinal data in array form.

    Missing visits are simply absent rows; follow-up may be unbalanced
    across subjects and outcomes.  Arrays are set read-only after
    construction so datasets can be shared across threads.
    """

    def __init__(
        self,
        subject_idx,
        outcome_idx,
        time,
        covariates,
        value,
        subject_ids=None,
        outcome_names=None,
        covariate_names=None,
    ):
        self.subject_idx = np.ascontiguousarray(subject_idx, dtype=np.intp)
        self.outcome_idx = np.ascontiguousarray(outcome_idx, dtype=np.intp)
        self.time = np.ascontiguousarray(time, dtype=np.float64)
        self.covariates = np.ascontiguousarray(covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(len(self.time), -1)
        self.value = np.ascontiguousarray(value, dtype=np.float64)

        n_rows = len(self.value)
        for name in ("subject_idx", "outcome_idx", "time"):
            if len(getattr(self, name)) != n_rows:
                raise ValueError(f"{name} length does not match value length {n_rows}")
        if self.covariates.shape[0] != n_rows:
            raise ValueError("covariates row count does not match value length")

        self.n = int(self.subject_idx.max()) + 1 if n_rows else 0
        self.p = int(self.outcome_idx.max()) + 1 if n_rows else 0
        self.d = self.covariates.shape[1]

        self.subject_ids = list(subject_ids) if subject_ids is not None else list(range(self.n))
        self.outcome_names = (
            list(outcome_names) if outcome_names is not None else [f"y{k + 1}" for k in range(self.p)]
        )
        self.covariate_names = (
            list(covariate_names) if covariate_names is not None else [f"x{j + 1}" for j in range(self.d)]
        )
        if len(self.subject_ids) != self.n:
            raise ValueError("subject_ids length does not match subject count")
        if len(self.outcome_names) != self.p:
            raise ValueError("outcome_names length does not match outcome count")
        if len(self.covariate_names) != self.d:
            raise ValueError("covariate_names length does not match covariate count")

        for arr in (self.subject_idx, self.outcome_idx, self.time, self.covariates, self.value):
            arr.setflags(write=False)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], covariate_names=None):
        """Build a Dataset, assigning indices by first appearance of labels."""
        subj_map: dict = {}
        out_map: dict = {}
        si, oi, tt, xx, yy = [], [], [], [], []
        for obs in observations:
            si.append(subj_map.setdefault(obs.subject, len(subj_map)))
            oi.append(out_map.setdefault(obs.outcome, len(out_map)))
            tt.append(float(obs.time))
            xx.append(np.asarray(obs.covariates, dtype=np.float64))
            yy.append(float(obs.value))
        d = len(xx[0]) if xx else 0
        covs = np.asarray(xx, dtype=np.float64).reshape(len(yy), d)
        return cls(
            si,
            oi,
            tt,
            covs,
            yy,
            subject_ids=list(subj_map),
            outcome_names=list(out_map),
            covariate_names=covariate_names,
        )

    @property
    def n_rows(self) -> int:
        return len(self.value)

    def rows_sorted(self):
        """Canonical row order (subject, outcome, time, value): used for checksums."""
        order = np.lexsort((self.value, self.time, self.outcome_idx, self.subject_idx))
        return order


@dataclass(frozen=True)
class ModelConfig:
    """Model family, priors, and covariate inclusion.

    prior_scale_fixed is the *variance* of the Gaussian prior on regression
    coefficients; prior_scale_half_cauchy is the scale of the half-Cauchy
    priors on every standard deviation; lkj_shape is the correlation prior
    shape (1 = uniform over correlation matrices).
    """

    re_variant: str = M1_UNIVARIATE
    link: str = "identity"
    prior_scale_fixed: float = 100.0
    prior_scale_half_cauchy: float = 2.5
    lkj_shape: float = 1.0
    # Per-outcome covariate inclusion mask (p, d); None means all included.
    covariate_mask: tuple | None = None
    # Optional pinned blocks {block name: value}; pinned blocks are excluded
    # from sampling and held at the given constrained value.
    fixed: dict | None = None

    def __post_init__(self):
        if self.re_variant not in (M1_UNIVARIATE, M2_MULTIVARIATE):
            raise ValueError(f"unknown random-effect variant {self.re_variant!r}")
        if self.link != "identity":
            raise ValueError("only the identity link is supported")
        if self.prior_scale_fixed <= 0 or self.prior_scale_half_cauchy <= 0:
            raise ValueError("prior scales must be positive")
        if self.lkj_shape <= 0:
            raise ValueError("lkj_shape must be positive")
        if self.fixed:
            for name in self.fixed:
                if name not in PINNABLE_BLOCKS:
                    raise ValueError(f"block {name!r} cannot be pinned")

    def mask_array(self, p: int, d: int) -> np.ndarray:
        """Covariate inclusion mask as a (p, d) boolean array."""
        if self.covariate_mask is None:
            return np.ones((p, d), dtype=bool)
        mask = np.asarray(self.covariate_mask, dtype=bool)
        if mask.shape != (p, d):
            raise ValueError(f"covariate mask shape {mask.shape} != ({p}, {d})")
        return mask


@dataclass
class ParameterSet:
    """Constrained-space model parameters.

    beta rows are per-outcome coefficient vectors; masked-out entries are
    zero.  alpha0_free holds the p-1 free intercepts per subject; the p-th
    intercept is the negative row sum (sum-to-zero constraint).  corr_chol
    is the lower Cholesky factor of the correlation matrix over the 2p-1
    free effects (m2 only, None under m1).
    """

    beta: np.ndarray  # (p, d)
    gamma: np.ndarray  # (p,) > 0
    sigma: np.ndarray  # (p,) > 0 residual SDs
    sigma_delta: float  # > 0
    sigma_alpha0: np.ndarray  # (p-1,) > 0
    sigma_alpha1: np.ndarray  # (p,) > 0
    delta: np.ndarray  # (n,)
    alpha0_free: np.ndarray  # (n, p-1)
    alpha1: np.ndarray  # (n, p)
    corr_chol: np.ndarray | None = None  # (2p-1, 2p-1) lower triangular

    def alpha0_full(self) -> np.ndarray:
        """Completed intercepts (n, p) with exact zero row sums."""
        n = self.alpha0_free.shape[0]
        full = np.empty((n, self.alpha0_free.shape[1] + 1))
        full[:, :-1] = self.alpha0_free
        full[:, -1] = -self.alpha0_free.sum(axis=1)
        return full

    def correlation(self) -> np.ndarray | None:
        """Correlation matrix L L' of the free effects (m2 only)."""
        if self.corr_chol is None:
            return None
        return self.corr_chol @ self.corr_chol.T

    def check_invariants(self, atol: float = 1e-12) -> None:
        """Raise ValueError if positivity or constraint invariants fail."""
        if not (np.all(self.gamma > 0) and np.all(self.sigma > 0)):
            raise ValueError("gamma and sigma must be strictly positive")
        if not (self.sigma_delta > 0 and np.all(self.sigma_alpha0 > 0) and np.all(self.sigma_alpha1 > 0)):
            raise ValueError("random-effect SDs must be strictly positive")
        if self.corr_chol is not None:
            if np.any(np.diag(self.corr_chol) <= 0):
                raise ValueError("corr_chol diagonal must be positive")
            row_norms = np.sqrt((self.corr_chol**2).sum(axis=1))
            if not np.allclose(row_norms, 1.0, atol=1e-10):
                raise ValueError("corr_chol rows must have unit norm")
        sums = self.alpha0_full().sum(axis=1)
        if self.alpha0_free.size and np.max(np.abs(sums)) > atol:
            raise ValueError("completed intercepts must sum to zero per subject")


@dataclass(frozen=True)
class ParameterLayout:
    """Contiguous block offsets mapping ParameterSet fields into one flat vector.

    The same layout describes both the constrained flat vector (Cholesky
    factor entries for the correlation block) and the unconstrained sampling
    vector (log scales, atanh partial correlations, standard-normal subject
    coordinates); block sizes coincide.
    """

    n: int
    p: int
    d: int
    re_variant: str
    blocks: tuple  # ((name, offset, size), ...) in layout order
    total_dim: int
    beta_index: tuple  # flat indices into the (p, d) row-major grid

    def offset(self, name: str) -> tuple[int, int]:
        """(offset, size) of a named block."""
        for block, off, size in self.blocks:
            if block == name:
                return off, size
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        off, size = self.offset(name)
        return slice(off, off + size)

    def block_of(self, index: int) -> str:
        """Name of the block containing flat coordinate `index`."""
        for block, off, size in self.blocks:
            if off <= index < off + size:
                return block
        raise IndexError(index)

    def param_names(self) -> list[str]:
        """Unique 1-based names aligned with the flat vector."""
        names: list[str] = []
        p, d, n = self.p, self.d, self.n
        for block, _off, size in self.blocks:
            if block == "beta":
                for flat in self.beta_index:
                    k, j = divmod(int(flat), d)
                    names.append(f"beta[{k + 1},{j + 1}]")
            elif block == "gamma":
                names.extend(f"gamma[{k + 1}]" for k in range(p))
            elif block == "sigma":
                names.extend(f"sigma[{k + 1}]" for k in range(p))
            elif block == "sigma_delta":
                names.append("sigma_delta")
            elif block == "sigma_alpha0":
                names.extend(f"sigma_alpha0[{k + 1}]" for k in range(p - 1))
            elif block == "sigma_alpha1":
                names.extend(f"sigma_alpha1[{k + 1}]" for k in range(p))
            elif block == "corr_chol":
                kk = 2 * p - 1
                names.extend(f"corr_chol[{r + 1},{c + 1}]" for r in range(1, kk) for c in range(r))
            elif block == "delta":
                names.extend(f"delta[{i + 1}]" for i in range(n))
            elif block == "alpha0":
                names.extend(f"alpha0[{i + 1},{k + 1}]" for i in range(n) for k in range(p - 1))
            elif block == "alpha1":
                names.extend(f"alpha1[{i + 1},{k + 1}]" for i in range(n) for k in range(p))
            else:  # pragma: no cover - layout blocks are fixed above
                raise AssertionError(block)
        return names

    # -- packing between ParameterSet and the flat constrained vector -------

    def pack(self, params: ParameterSet) -> np.ndarray:
        """Flatten a ParameterSet into constrained layout order."""
        v = np.empty(self.total_dim)
        v[self.slice("beta")] = params.beta.ravel()[list(self.beta_index)]
        v[self.slice("gamma")] = params.gamma
        v[self.slice("sigma")] = params.sigma
        v[self.slice("sigma_delta")] = params.sigma_delta
        v[self.slice("sigma_alpha0")] = params.sigma_alpha0
        v[self.slice("sigma_alpha1")] = params.sigma_alpha1
        if self.re_variant == M2_MULTIVARIATE:
            kk = 2 * self.p - 1
            tril = np.tril_indices(kk, k=-1)
            v[self.slice("corr_chol")] = params.corr_chol[tril]
        v[self.slice("delta")] = params.delta
        v[self.slice("alpha0")] = params.alpha0_free.ravel()
        v[self.slice("alpha1")] = params.alpha1.ravel()
        return v

    def unpack(self, v: np.ndarray) -> ParameterSet:
        """Inverse of :meth:`pack`."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of length {self.total_dim}")
        p, d, n = self.p, self.d, self.n
        beta = np.zeros((p, d))
        beta.ravel()[list(self.beta_index)] = v[self.slice("beta")]
        corr_chol = None
        if self.re_variant == M2_MULTIVARIATE:
            kk = 2 * p - 1
            corr_chol = np.zeros((kk, kk))
            corr_chol[np.tril_indices(kk, k=-1)] = v[self.slice("corr_chol")]
            np.fill_diagonal(corr_chol, np.sqrt(np.maximum(1.0 - (corr_chol**2).sum(axis=1), 0.0)))
        return ParameterSet(
            beta=beta,
            gamma=v[self.slice("gamma")].copy(),
            sigma=v[self.slice("sigma")].copy(),
            sigma_delta=float(v[self.slice("sigma_delta")][0]),
            sigma_alpha0=v[self.slice("sigma_alpha0")].copy(),
            sigma_alpha1=v[self.slice("sigma_alpha1")].copy(),
            delta=v[self.slice("delta")].copy(),
            alpha0_free=v[self.slice("alpha0")].copy().reshape(n, p - 1),
            alpha1=v[self.slice("alpha1")].copy().reshape(n, p),
            corr_chol=corr_chol,
        )


def layout(config: ModelConfig, n: int, p: int, d: int) -> ParameterLayout:
    """Compute the flat parameter layout for a model of the given size.

    Block order: beta, gamma, sigma, sigma_delta, sigma_alpha0,
    sigma_alpha1, [corr_chol under m2], delta, alpha0, alpha1.
    """
    if p < 1 or n < 1:
        raise ValueError("need p >= 1 outcomes and n >= 1 subjects")
    if d < 0:
        raise ValueError("covariate count must be nonnegative")
    mask = config.mask_array(p, d)
    beta_index = tuple(int(i) for i in np.flatnonzero(mask.ravel()))
    sizes = [
        ("beta", len(beta_index)),
        ("gamma", p),
        ("sigma", p),
        ("sigma_delta", 1),
        ("sigma_alpha0", p - 1),
        ("sigma_alpha1", p),
    ]
    if config.re_variant == M2_MULTIVARIATE:
        kk = 2 * p - 1
        sizes.append(("corr_chol", kk * (kk - 1) // 2))
    sizes += [("delta", n), ("alpha0", n * (p - 1)), ("alpha1", n * p)]
    blocks = []
    off = 0
    for name, size in sizes:
        blocks.append((name, off, size))
        off += size
    return ParameterLayout(
        n=n,
        p=p,
        d=d,
        re_variant=config.re_variant,
        blocks=tuple(blocks),
        total_dim=off,
        beta_index=beta_index,
    )


# ---------------------------------------------------------------------------
# Dataset validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One identifiability or schema violation found in a dataset."""

    code: str
    message: str
    columns: tuple = ()


@dataclass
class ValidationReport:
    """Collection of violations; empty means the dataset is usable."""

    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set:
        return {v.code for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "dataset valid"
        return "\n".join(f"[{v.code}] {v.message}" for v in self.violations)


def numerical_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> tuple[int, np.ndarray]:
    """Numerical rank via pivoted QR; returns (rank, pivot order).

    A column is counted toward the rank while the corresponding |R| diagonal
    stays above rtol times the largest diagonal.
    """
    if a.size == 0:
        return 0, np.arange(a.shape[1], dtype=np.intp)
    _q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0, piv
    rank = int(np.sum(diag > rtol * diag[0]))
    return rank, piv


def validate_dataset(dataset: Dataset, rtol: float = RANK_RTOL) -> ValidationReport:
    """Check the identifiability preconditions on a dataset.

    Deterministic and row-order insensitive.  Violations are findings, not
    exceptions: structural problems (empty data, missing values), a time
    column collinear with the intercept, and rank deficiency of the stacked
    design [x | t] are all reported with the offending columns named.
    """
    report = ValidationReport()
    if dataset.n_rows == 0:
        report.violations.append(Violation("empty", "dataset has no observations"))
        return report

    finite_ok = (
        np.isfinite(dataset.time).all()
        and np.isfinite(dataset.value).all()
        and np.isfinite(dataset.covariates).all()
    )
    if not finite_ok:
        report.violations.append(Violation("non_finite", "time, value, and covariates must be finite"))
        return report

    counts = np.bincount(dataset.subject_idx, minlength=dataset.n)
    if np.any(counts == 0):
        missing = [str(dataset.subject_ids[i]) for i in np.flatnonzero(counts == 0)]
        report.violations.append(
            Violation("missing_subject", f"subjects without observations: {', '.join(missing)}")
        )

    t = dataset.time
    ones = np.ones_like(t)
    rank_t1, _ = numerical_rank(np.column_stack([ones, t]), rtol)
    if rank_t1 < 2:
        report.violations.append(
            Violation(
                "constant_time",
                "time column collinear with intercept (all observation times equal)",
                columns=("time",),
            )
        )

    design = np.column_stack([dataset.covariates, t])
    names = list(dataset.covariate_names) + ["time"]
    rank, piv = numerical_rank(design, rtol)
    if rank < design.shape[1]:
        dependent = sorted(names[int(j)] for j in piv[rank:])
        report.violations.append(
            Violation(
                "rank_deficient",
                "rank deficient design: stacked design [covariates | time] has rank "
                f"{rank} < {design.shape[1]}; dependent columns: {', '.join(dependent)}",
                columns=tuple(dependent),
            )
        )
    return report
