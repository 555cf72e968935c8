"""Command-line interface.

Subcommands: fit, simulate, compare, predict, transform, check.  Exit codes:
0 success, 1 validation failure (bad data, identifiability, schema), 2
runtime failure.
"""

from __future__ import annotations

import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np

from . import __version__
from .compare import compare as compare_results
from .compare import CriterionResult, dic, pointwise_loglik, psis_loo, waic
from .diagnostics import summarize
from .identifiability import check_identifiability
from .io import (
    IngestError,
    IngestWarning,
    RunManifest,
    build_config,
    build_settings,
    dataset_checksum,
    group_balance_weights,
    load_config_file,
    load_fit,
    persist_results,
    read_criteria,
    read_long_csv,
    weighted_inverse_gaussian_transform,
    write_dataset,
)
from .model import M1_UNIVARIATE, M2_MULTIVARIATE, validate_dataset
from .plots import latent_time_figure, replicate_metrics_figure, trajectory_figure
from .predict import population_trajectory, subject_trajectory
from .sampler import DatasetInvalidError, SamplerError, run as run_sampler
from .simulate import (
    TrueParameters,
    default_simulation_truth,
    exchangeable_correlation,
    generate_dataset,
    run_replicates,
)

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VARIANTS = {"m1": M1_UNIVARIATE, "m2": M2_MULTIVARIATE}


class ValidationFailure(Exception):
    """User input failed validation; exits with code 1."""


def _fail_validation(message: str):
    raise ValidationFailure(message)


def _guarded(body):
    """Run a command body mapping exceptions to the documented exit codes."""
    try:
        body()
    except ValidationFailure as err:
        click.echo(f"validation failure: {err}", err=True)
        sys.exit(EXIT_VALIDATION)
    except (DatasetInvalidError, IngestError) as err:
        click.echo(f"validation failure: {err}", err=True)
        sys.exit(EXIT_VALIDATION)
    except (SamplerError, OSError, ValueError) as err:
        click.echo(f"runtime failure: {err}", err=True)
        sys.exit(EXIT_RUNTIME)


def _read_data(path) -> tuple:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", IngestWarning)
        dataset = read_long_csv(path)
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    return dataset


def _parse_variant(value: str) -> str:
    key = value.strip().lower()
    if key not in _VARIANTS:
        _fail_validation(f"unknown variant {value!r} (use m1 or m2)")
    return _VARIANTS[key]


@click.group()
@click.version_option(version=__version__, prog_name="latentshift")
def main():
    """Latent time-shift joint mixed-effects models."""


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@main.command("fit")
@click.option("--data", "data_path", required=True, type=click.Path(), help="Long-format CSV.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="INI config file.")
@click.option("--variant", default=None, help="Random-effect variant: m1 or m2.")
@click.option("--chains", type=int, default=None)
@click.option("--iter", "iterations", type=int, default=None, help="Total iterations per chain.")
@click.option("--warmup", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--target-accept", type=float, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--figures/--no-figures", default=True, help="Render report figures.")
def fit_cmd(data_path, config_path, variant, chains, iterations, warmup, thin, seed, target_accept, out_dir, figures):
    """Fit the model and persist draws, summaries, criteria, and a manifest."""

    def body():
        started = time.time()
        if not Path(data_path).exists():
            _fail_validation(f"data file not found: {data_path}")
        dataset = _read_data(data_path)
        report = validate_dataset(dataset)
        ident = check_identifiability(dataset)
        click.echo(str(ident))
        if not report.ok or not ident.ok:
            _fail_validation("dataset failed identifiability checks:\n" + str(report))

        file_options = load_config_file(config_path) if config_path else None
        config = build_config(file_options, re_variant=_parse_variant(variant) if variant else None)
        settings = build_settings(
            file_options,
            chains=chains,
            iterations=iterations,
            warmup=warmup,
            thin=thin,
            seed=seed,
            target_accept=target_accept,
        )
        click.echo(
            f"fitting {config.re_variant} to {dataset.n} subjects, {dataset.p} outcomes, "
            f"{dataset.n_rows} rows ({settings.chains} chains x {settings.iterations} iterations)"
        )
        draws = run_sampler(config, dataset, settings)
        summaries = summarize(draws)
        ll = pointwise_loglik(draws, dataset)
        criteria = {
            config.re_variant: {"waic": waic(ll), "looic": psis_loo(ll), "dic": dic(draws, dataset)}
        }
        manifest = RunManifest(
            command="fit",
            version=__version__,
            seed=settings.seed,
            data_path=str(data_path),
            data_sha256=dataset_checksum(dataset),
            n_subjects=dataset.n,
            n_outcomes=dataset.p,
            n_covariates=dataset.d,
            n_rows=dataset.n_rows,
            model={
                "re_variant": config.re_variant,
                "link": config.link,
                "prior_scale_fixed": config.prior_scale_fixed,
                "prior_scale_half_cauchy": config.prior_scale_half_cauchy,
                "lkj_shape": config.lkj_shape,
            },
            sampler={
                "chains": settings.chains,
                "iterations": settings.iterations,
                "warmup": settings.warmup,
                "thin": settings.thin,
                "seed": settings.seed,
                "max_tree_depth": settings.max_tree_depth,
                "target_accept": settings.target_accept,
            },
            runtime_seconds=0.0,
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(dataset, out / "dataset.csv")
        manifest.notes.append(f"divergence rate {draws.divergence_rate():.5f}")
        rhats = [s.rhat for s in summaries if np.isfinite(s.rhat)]
        if rhats:
            manifest.notes.append(f"max split R-hat {max(rhats):.4f}")
        manifest.runtime_seconds = time.time() - started
        files = persist_results(
            draws=draws, summaries=summaries, criteria=criteria, manifest=manifest, out_dir=out
        )
        files.insert(0, "dataset.csv")
        if figures:
            sl = draws.layout.slice("delta")
            delta_means = draws.stacked()[:, sl].mean(axis=0)
            latent_time_figure(delta_means, out / "latent_times.png",
                               observed_span=float(dataset.time.max() - dataset.time.min()))
            files.append("latent_times.png")
        click.echo(f"wrote {len(files)} files to {out}")

    _guarded(body)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _load_truth(path, p, d) -> TrueParameters:
    if path is None:
        truth = default_simulation_truth()
        if p not in (None, truth.p):
            _fail_validation(f"default truth has p={truth.p}; pass --truth for p={p}")
        return truth
    import configparser

    parser = configparser.ConfigParser()
    with open(path) as handle:
        parser.read_file(handle)
    section = parser["truth"]

    def floats(key):
        return np.array([float(v) for v in section[key].replace(";", ",").split(",") if v.strip()])

    beta = floats("beta")
    d_eff = d or 1
    kwargs = dict(
        beta=beta.reshape(-1, d_eff),
        gamma=floats("gamma"),
        sigma=floats("sigma"),
        sigma_delta=float(section["sigma_delta"]),
        sigma_alpha0=floats("sigma_alpha0"),
        sigma_alpha1=floats("sigma_alpha1"),
    )
    if "exchangeable_correlation" in section:
        rho = float(section["exchangeable_correlation"])
        kk = 2 * len(kwargs["gamma"]) - 1
        kwargs["correlation"] = exchangeable_correlation(kk, rho)
    return TrueParameters(**kwargs)


@main.command("simulate")
@click.option("--truth", "truth_path", type=click.Path(), default=None, help="INI truth file ([truth] section).")
@click.option("--n", type=int, default=100, help="Subjects.")
@click.option("--p", type=int, default=4, help="Outcomes.")
@click.option("--q", type=int, default=4, help="Visits per subject.")
@click.option("--variant", default="m1", help="Generating variant: m1 or m2.")
@click.option("--replicates", type=int, default=0, help="0: write one dataset; >0: run the replicate study.")
@click.option("--fit", "fit_variants", multiple=True, help="Variant(s) to fit in the study (default both).")
@click.option("--chains", type=int, default=2)
@click.option("--iter", "iterations", type=int, default=2000)
@click.option("--warmup", type=int, default=1000)
@click.option("--jobs", type=int, default=1, help="Parallel replicate workers.")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--figures/--no-figures", default=True)
def simulate_cmd(truth_path, n, p, q, variant, replicates, fit_variants, chains, iterations, warmup, jobs, seed, out_dir, figures):
    """Generate synthetic data, optionally running the replicated study."""

    def body():
        started = time.time()
        variant_true = _parse_variant(variant)
        truth = _load_truth(truth_path, p, None)
        if truth.p != p:
            _fail_validation(f"truth has p={truth.p} but --p={p}")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        if replicates == 0:
            dataset, record = generate_dataset(truth, n, p, q, variant=variant_true, seed=seed)
            write_dataset(dataset, out / "dataset.csv")
            _write_truth_files(truth, record, out)
            click.echo(f"wrote dataset.csv ({dataset.n_rows} rows) to {out}")
            return

        fits = [_parse_variant(v) for v in fit_variants] or [M1_UNIVARIATE, M2_MULTIVARIATE]
        from .sampler import SamplerSettings

        settings = SamplerSettings(chains=chains, iterations=iterations, warmup=warmup, seed=seed)
        click.echo(
            f"running {replicates} replicates (true {variant_true}, fitting {', '.join(fits)}, jobs={jobs})"
        )
        metrics = run_replicates(
            replicates, truth, n, p, q, variant_true, fits, settings, seed=seed, jobs=jobs
        )
        _write_replicate_files(metrics, out)
        for entry in metrics.audit:
            click.echo(f"audit: {entry}", err=True)
        if figures:
            replicate_metrics_figure(metrics, out / "replicate_metrics.png")
        click.echo(f"study complete in {time.time() - started:.0f}s; outputs in {out}")

    _guarded(body)


def _write_truth_files(truth, record, out: Path):
    import configparser
    import csv as _csv

    parser = configparser.ConfigParser()
    parser["truth"] = {
        "beta": ",".join(format(v, ".17g") for v in truth.beta.ravel()),
        "gamma": ",".join(format(v, ".17g") for v in truth.gamma),
        "sigma": ",".join(format(v, ".17g") for v in truth.sigma),
        "sigma_delta": format(truth.sigma_delta, ".17g"),
        "sigma_alpha0": ",".join(format(v, ".17g") for v in truth.sigma_alpha0),
        "sigma_alpha1": ",".join(format(v, ".17g") for v in truth.sigma_alpha1),
        "variant": record["variant"],
        "seed": str(record["seed"]),
    }
    if record["correlation"] is not None:
        parser["truth"]["correlation"] = ";".join(
            ",".join(format(v, ".17g") for v in row) for row in record["correlation"]
        )
    with open(out / "truth.ini", "w") as handle:
        parser.write(handle)
    with open(out / "truth_effects.csv", "w", newline="") as handle:
        writer = _csv.writer(handle)
        p = record["alpha1"].shape[1]
        header = ["subject", "delta"]
        header += [f"alpha0_{k + 1}" for k in range(p)]
        header += [f"alpha1_{k + 1}" for k in range(p)]
        writer.writerow(header)
        for i in range(len(record["delta"])):
            row = [i + 1, format(record["delta"][i], ".17g")]
            row += [format(v, ".17g") for v in record["alpha0"][i]]
            row += [format(v, ".17g") for v in record["alpha1"][i]]
            writer.writerow(row)


def _write_replicate_files(metrics, out: Path):
    import csv as _csv

    with open(out / "parameter_metrics.csv", "w", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["fit_variant", "parameter", "truth", "bias", "mspe", "c95", "replicates"])
        for variant, rows in metrics.parameters.items():
            for r in rows:
                writer.writerow(
                    [variant, r.name, format(r.truth, ".17g"), format(r.bias, ".17g"),
                     format(r.mspe, ".17g"), format(r.c95, ".17g"), r.n_replicates]
                )
    with open(out / "criteria_replicates.csv", "w", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["fit_variant", "replicate", "waic", "looic", "dic"])
        for variant, crits in metrics.criteria.items():
            n_rep = len(crits["waic"])
            for m in range(n_rep):
                writer.writerow(
                    [variant, m, format(crits["waic"][m], ".17g"),
                     format(crits["looic"][m], ".17g"), format(crits["dic"][m], ".17g")]
                )
    with open(out / "winners.csv", "w", newline="") as handle:
        writer = _csv.writer(handle)
        writer.writerow(["criterion", "replicate", "winner"])
        for crit, winners in metrics.winners.items():
            for m, winner in enumerate(winners):
                writer.writerow([crit, m, winner])


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


@main.command("compare")
@click.option("--fits", "fit_dirs", multiple=True, required=True, type=click.Path(), help="Two or more fit directories.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def compare_cmd(fit_dirs, out_dir):
    """Compare fitted models by WAIC, LOOIC, and DIC."""

    def body():
        if len(fit_dirs) < 2:
            _fail_validation("need at least two --fits directories")
        rows = {}
        for fit_dir in fit_dirs:
            path = Path(fit_dir) / "criteria.csv"
            if not path.exists():
                _fail_validation(f"{fit_dir}: criteria.csv not found (run fit first)")
            for model, crit in read_criteria(path).items():
                label = f"{Path(fit_dir).name}:{model}"
                rows[label] = crit
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        import csv as _csv

        tables = {}
        for criterion in ("waic", "looic", "dic"):
            results = {
                label: CriterionResult(
                    criterion=criterion,
                    value=crit[criterion],
                    effective_params=float("nan"),
                    pointwise=np.zeros(0),
                    n_obs=crit["n_obs"],
                )
                for label, crit in rows.items()
            }
            tables[criterion] = compare_results(results)
        with open(out / "comparison.csv", "w", newline="") as handle:
            writer = _csv.writer(handle)
            writer.writerow(["criterion", "model", "value", "winner"])
            for criterion, table in tables.items():
                for label in table.models:
                    writer.writerow(
                        [criterion, label, format(table.values[label][0], ".17g"),
                         str(table.winners[0] == label)]
                    )
        for criterion, table in tables.items():
            click.echo(f"{criterion}: best = {table.winners[0]}")
            for (a, b), diff in table.differences.items():
                click.echo(f"  {a} - {b} = {diff[0]:+.2f}")
        click.echo(f"wrote comparison.csv to {out}")

    _guarded(body)


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


@main.command("predict")
@click.option("--fit", "fit_dir", required=True, type=click.Path(), help="Fit output directory.")
@click.option("--subject", default=None, help="Subject id for a subject-level trajectory.")
@click.option("--profile", default=None, help="Comma-separated covariate profile for population curves.")
@click.option("--grid", default="0:20:41", help="Grid as start:stop:num.")
@click.option("--no-latent", is_flag=True, default=False, help="Force the time-shift contribution to zero.")
@click.option("--sweep-column", default=None, help="Covariate (name or index) advancing with the grid.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--figures/--no-figures", default=True)
def predict_cmd(fit_dir, subject, profile, grid, no_latent, sweep_column, out_dir, figures):
    """Subject-level or population-level trajectories from a stored fit."""

    def body():
        if (subject is None) == (profile is None):
            _fail_validation("pass exactly one of --subject or --profile")
        draws, dataset, _manifest = load_fit(fit_dir)
        try:
            start, stop, num = grid.split(":")
            grid_vals = np.linspace(float(start), float(stop), int(num))
        except ValueError:
            _fail_validation(f"bad --grid {grid!r}; expected start:stop:num")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        sets = {}
        if subject is not None:
            try:
                grids = subject_trajectory(draws, dataset, subject, grid_vals)
            except KeyError as err:
                _fail_validation(str(err))
            sets[f"subject_{subject}"] = grids
        else:
            prof = np.array([float(v) for v in profile.split(",") if v.strip()])
            sweep = None
            if sweep_column is not None:
                sweep = (
                    dataset.covariate_names.index(sweep_column)
                    if sweep_column in dataset.covariate_names
                    else int(sweep_column)
                )
            sets["population"] = population_trajectory(
                draws, prof, grid_vals, include_latent=not no_latent,
                sweep_column=sweep, outcome_names=dataset.outcome_names,
            )
            if not no_latent:
                sets["population_healthy_aging"] = population_trajectory(
                    draws, prof, grid_vals, include_latent=False,
                    sweep_column=sweep, outcome_names=dataset.outcome_names,
                )
        from .io import write_trajectories

        files = write_trajectories(sets, out)
        if figures and files:
            trajectory_figure(sets, out / "trajectories.png")
            files.append("trajectories.png")
        click.echo(f"wrote {', '.join(files)} to {out}")

    _guarded(body)


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------


@main.command("transform")
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--columns", default=None, help="Comma-separated outcome names to transform (default all).")
@click.option("--weights-column", default=None, help="Covariate column holding observation weights.")
@click.option("--group-column", default=None, help="Covariate column to balance via inverse frequencies.")
@click.option("--baseline-only", is_flag=True, default=False,
              help="Estimate the quantile map from each subject's first visit only.")
@click.option("--out", "out_path", required=True, type=click.Path())
def transform_cmd(data_path, columns, weights_column, group_column, baseline_only, out_path):
    """Weighted quantile + inverse-Gaussian transform of outcome values."""

    def body():
        if weights_column and group_column:
            _fail_validation("pass at most one of --weights-column / --group-column")
        dataset = _read_data(data_path)
        wanted = (
            [c.strip() for c in columns.split(",")] if columns else list(dataset.outcome_names)
        )
        for name in wanted:
            if name not in dataset.outcome_names:
                _fail_validation(f"unknown outcome {name!r}")

        def cov(name):
            if name not in dataset.covariate_names:
                _fail_validation(f"unknown covariate column {name!r}")
            return dataset.covariates[:, dataset.covariate_names.index(name)]

        weights = np.ones(dataset.n_rows)
        if weights_column:
            weights = cov(weights_column).copy()
        elif group_column:
            weights = group_balance_weights(cov(group_column))

        values = dataset.value.copy()
        for name in wanted:
            k = dataset.outcome_names.index(name)
            rows = np.flatnonzero(dataset.outcome_idx == k)
            if baseline_only:
                base = []
                for subj in np.unique(dataset.subject_idx[rows]):
                    subj_rows = rows[dataset.subject_idx[rows] == subj]
                    base.append(subj_rows[np.argmin(dataset.time[subj_rows])])
                base = np.asarray(base)
                values[rows] = weighted_inverse_gaussian_transform(
                    dataset.value[rows],
                    reference_values=dataset.value[base],
                    reference_weights=weights[base],
                )
            else:
                values[rows] = weighted_inverse_gaussian_transform(dataset.value[rows], weights[rows])
        from .model import Dataset

        transformed = Dataset(
            dataset.subject_idx, dataset.outcome_idx, dataset.time, dataset.covariates, values,
            subject_ids=dataset.subject_ids, outcome_names=dataset.outcome_names,
            covariate_names=dataset.covariate_names,
        )
        write_dataset(transformed, out_path)
        click.echo(f"wrote transformed data to {out_path}")

    _guarded(body)


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


@main.command("check")
@click.option("--data", "data_path", required=True, type=click.Path())
def check_cmd(data_path):
    """Validate a dataset and report the identifiability conditions."""

    def body():
        dataset = _read_data(data_path)
        report = validate_dataset(dataset)
        ident = check_identifiability(dataset)
        click.echo(str(report))
        click.echo(str(ident))
        if not report.ok or not ident.ok:
            _fail_validation("identifiability conditions not satisfied")

    _guarded(body)


if __name__ == "__main__":
    main()
