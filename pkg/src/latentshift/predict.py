"""Fitted trajectories on the shifted (long-term) time axis.

Subject trajectories evaluate the linear predictor at grid times using each
draw's own subject effects; the reported axis adds the subject's
posterior-mean time shift, aligning short-term follow-up onto the common
long-term timeline.  Population trajectories set subject effects to their
population mean (zero) and either let the time shift follow the grid or
force it to zero, isolating the aging component from progression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Dataset

__all__ = ["TrajectoryGrid", "subject_trajectory", "population_trajectory"]


@dataclass
class TrajectoryGrid:
    """Posterior summary of one outcome's trajectory along a grid."""

    outcome_id: int
    outcome_name: str
    axis: np.ndarray  # strictly increasing grid on the reporting axis
    mean: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    kind: str = "subject"  # "subject" or "population"
    meta: dict | None = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=np.float64)
        if np.any(np.diff(self.axis) <= 0):
            raise ValueError("trajectory axis must be strictly increasing")
        if not (len(self.axis) == len(self.mean) == len(self.ci_lower) == len(self.ci_upper)):
            raise ValueError("axis and summary lengths differ")


def _summaries(draw_values: np.ndarray):
    """(mean, lo, hi) over axis 0 with the equal-tailed 95% convention."""
    mean = draw_values.mean(axis=0)
    lo = np.quantile(draw_values, 0.025, axis=0, method="linear")
    hi = np.quantile(draw_values, 0.975, axis=0, method="linear")
    return mean, lo, hi


def _block(draws, name: str) -> np.ndarray:
    """(S, size) stacked draws of one layout block."""
    sl = draws.layout.slice(name)
    return draws.stacked()[:, sl]


def subject_trajectory(draws, dataset: Dataset, subject_id, grid, covariates=None) -> list[TrajectoryGrid]:
    """Per-outcome fitted trajectories for one subject.

    ``grid`` holds short-term times; the reported axis is grid +
    posterior-mean time shift of the subject.  ``covariates`` defaults to
    the subject's first observed covariate vector.
    """
    if subject_id in dataset.subject_ids:
        subj = dataset.subject_ids.index(subject_id)
    elif isinstance(subject_id, (int, np.integer)) and 0 <= int(subject_id) < dataset.n:
        subj = int(subject_id)
    else:
        raise KeyError(f"unknown subject id {subject_id!r}")
    grid = np.asarray(grid, dtype=np.float64)
    lay = draws.layout
    p, d, n = lay.p, lay.d, lay.n

    if covariates is None:
        rows = np.flatnonzero(dataset.subject_idx == subj)
        covariates = dataset.covariates[rows[0]] if d else np.zeros(0)
    x = np.asarray(covariates, dtype=np.float64)
    if x.shape != (d,):
        raise ValueError(f"covariates must have length {d}")

    stacked = draws.stacked()
    s_draws = stacked.shape[0]
    beta = np.zeros((s_draws, p, d))
    beta.reshape(s_draws, -1)[:, list(lay.beta_index)] = _block(draws, "beta")
    gamma = _block(draws, "gamma")
    delta_i = _block(draws, "delta")[:, subj]
    a0_free = _block(draws, "alpha0").reshape(s_draws, n, p - 1)[:, subj, :]
    a0 = np.column_stack([a0_free, -a0_free.sum(axis=1)])
    a1 = _block(draws, "alpha1").reshape(s_draws, n, p)[:, subj, :]

    axis = grid + float(delta_i.mean())
    out = []
    xb = beta @ x  # (S, p)
    for k in range(p):
        eta = (
            xb[:, k : k + 1]
            + gamma[:, k : k + 1] * (grid[None, :] + delta_i[:, None])
            + a0[:, k : k + 1]
            + a1[:, k : k + 1] * grid[None, :]
        )
        mean, lo, hi = _summaries(eta)
        out.append(
            TrajectoryGrid(
                outcome_id=k,
                outcome_name=dataset.outcome_names[k],
                axis=axis,
                mean=mean,
                ci_lower=lo,
                ci_upper=hi,
                kind="subject",
                meta={"subject": dataset.subject_ids[subj], "delta_mean": float(delta_i.mean())},
            )
        )
    return out


def population_trajectory(
    draws,
    profile,
    grid,
    include_latent: bool = True,
    sweep_column=None,
    outcome_names=None,
    axis_offset: float = 0.0,
) -> list[TrajectoryGrid]:
    """Population-mean trajectories along a latent-time grid.

    ``profile`` is the covariate vector at grid position 0.  If
    ``sweep_column`` names (or indexes) a covariate, that covariate advances
    with the grid, so the covariate's own time trend (e.g. aging) stays in
    the curve; with ``include_latent`` off the time-shift contribution is
    forced to zero and only that trend remains.  Subject effects are at
    their population mean (zero).  ``axis_offset`` shifts the reported axis
    for calibration against an external scale.
    """
    lay = draws.layout
    p, d = lay.p, lay.d
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape != (d,):
        raise ValueError(f"profile must have length {d}")
    grid = np.asarray(grid, dtype=np.float64)
    sweep_idx = None
    if sweep_column is not None:
        sweep_idx = int(sweep_column)

    stacked = draws.stacked()
    s_draws = stacked.shape[0]
    beta = np.zeros((s_draws, p, d))
    beta.reshape(s_draws, -1)[:, list(lay.beta_index)] = _block(draws, "beta")
    gamma = _block(draws, "gamma")

    xb0 = beta @ profile  # (S, p)
    sweep_coef = beta[:, :, sweep_idx] if sweep_idx is not None else np.zeros((s_draws, p))
    latent = grid[None, :] if include_latent else np.zeros((1, len(grid)))

    out = []
    names = outcome_names if outcome_names is not None else [f"y{k + 1}" for k in range(p)]
    for k in range(p):
        eta = (
            xb0[:, k : k + 1]
            + sweep_coef[:, k : k + 1] * grid[None, :]
            + gamma[:, k : k + 1] * latent
        )
        mean, lo, hi = _summaries(eta)
        out.append(
            TrajectoryGrid(
                outcome_id=k,
                outcome_name=names[k],
                axis=grid + axis_offset,
                mean=mean,
                ci_lower=lo,
                ci_upper=hi,
                kind="population",
                meta={"include_latent": include_latent},
            )
        )
    return out
