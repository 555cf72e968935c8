"""Figure rendering for the CLI report paths.

Figures are written next to the delimited output as PNG files; nothing here
is interactive.  The correlation structure is deliberately not rendered,
only persisted numerically.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["trajectory_figure", "latent_time_figure", "replicate_metrics_figure"]

plt.rcParams.update(
    {
        "figure.dpi": 120,
        "font.size": 9,
        "axes.titlesize": 10,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)

_COLORS = ("#c0392b", "#2471a3", "#1e8449", "#7d3c98")


def _grid_axes(n_panels):
    ncols = min(n_panels, 2)
    nrows = math.ceil(n_panels / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 2.9 * nrows), squeeze=False)
    return fig, axes.ravel()


def trajectory_figure(trajectory_sets: dict, path) -> None:
    """One panel per outcome; each named set drawn as mean line + 95% band."""
    outcomes = []
    for grids in trajectory_sets.values():
        for tg in grids:
            if tg.outcome_name not in outcomes:
                outcomes.append(tg.outcome_name)
    if not outcomes:
        return
    fig, axes = _grid_axes(len(outcomes))
    for ax, outcome in zip(axes, outcomes):
        for color, (label, grids) in zip(_COLORS, trajectory_sets.items()):
            for tg in grids:
                if tg.outcome_name != outcome:
                    continue
                ax.fill_between(tg.axis, tg.ci_lower, tg.ci_upper, alpha=0.18, color=color, lw=0)
                ax.plot(tg.axis, tg.mean, color=color, lw=1.4, label=label)
        ax.set_title(outcome)
        ax.set_xlabel("shifted time")
        ax.set_ylabel("linear predictor")
    handles, labels = axes[0].get_legend_handles_labels()
    if handles:
        axes[0].legend(loc="best", frameon=False)
    for ax in axes[len(outcomes):]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def latent_time_figure(delta_means, path, observed_span=None) -> None:
    """Distribution of posterior-mean subject time shifts."""
    delta_means = np.asarray(delta_means, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    ax.hist(delta_means, bins=min(30, max(8, len(delta_means) // 5)), color="#2471a3", alpha=0.8)
    ax.set_xlabel("posterior-mean time shift (years)")
    ax.set_ylabel("subjects")
    if observed_span is not None:
        ax.set_title(f"latent ordering spans {observed_span:.1f} years of follow-up")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def replicate_metrics_figure(metrics, path) -> None:
    """Bias bars and coverage points per parameter, one panel per fitted variant."""
    variants = list(metrics.parameters)
    if not variants:
        return
    fig, axes = plt.subplots(
        2, len(variants), figsize=(0.33 * max(len(row) for row in metrics.parameters.values()) * len(variants) + 2, 5.4),
        squeeze=False,
    )
    for col, variant in enumerate(variants):
        rows = metrics.parameters[variant]
        names = [r.name for r in rows]
        x = np.arange(len(rows))
        ax_bias = axes[0][col]
        ax_bias.bar(x, [r.bias for r in rows], color="#2471a3")
        ax_bias.axhline(0.0, color="k", lw=0.6)
        ax_bias.set_xticks(x, names, rotation=90)
        ax_bias.set_ylabel("bias")
        ax_bias.set_title(f"fit: {variant} (true: {metrics.variant_true}, M={metrics.n_replicates})")
        ax_cov = axes[1][col]
        ax_cov.plot(x, [r.c95 for r in rows], "o", color="#c0392b", ms=4)
        ax_cov.axhline(0.95, color="k", lw=0.6, ls="--")
        ax_cov.set_ylim(0.0, 1.05)
        ax_cov.set_xticks(x, names, rotation=90)
        ax_cov.set_ylabel("95% coverage")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
