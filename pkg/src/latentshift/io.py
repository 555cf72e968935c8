"""Data ingestion, the outcome quantile transform, and result persistence.

Long-format CSVs need the columns subject_id, outcome, time, value; every
other column is a covariate.  Outcomes and subjects map to indices by first
appearance, so ingestion is deterministic.  All numeric output is written
with 17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io as _io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .model import Dataset, ModelConfig
from .sampler import SamplerSettings

__all__ = [
    "IngestError",
    "IngestWarning",
    "RunManifest",
    "read_long_csv",
    "write_dataset",
    "dataset_checksum",
    "weighted_inverse_gaussian_transform",
    "group_balance_weights",
    "persist_results",
    "write_manifest",
    "read_manifest",
    "load_config_file",
]

REQUIRED_COLUMNS = ("subject_id", "outcome", "time", "value")


class IngestError(ValueError):
    """The input file cannot be interpreted as a dataset."""


class IngestWarning(UserWarning):
    """Recoverable ingestion problem (skipped row, duplicate visit)."""


def _fmt(x) -> str:
    """17-significant-digit decimal serialization (bit-exact round trip)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Long-format CSV
# ---------------------------------------------------------------------------


def read_long_csv(path) -> Dataset:
    """Parse a long-format CSV into a Dataset.

    Rows with unparseable numerics are rejected and reported (with line
    numbers) as IngestWarning; duplicate (subject, outcome, time) rows are
    flagged the same way.  Missing required columns or an empty file raise
    IngestError.
    """
    dataset, problems = _read_long_csv(Path(path))
    for problem in problems:
        warnings.warn(problem, IngestWarning, stacklevel=2)
    return dataset


def _read_long_csv(path: Path):
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for column in REQUIRED_COLUMNS:
            if column not in header:
                raise IngestError(f"{path}: missing required column {column!r}")
        col = {name: header.index(name) for name in REQUIRED_COLUMNS}
        covariate_names = [h for h in header if h not in REQUIRED_COLUMNS]
        cov_idx = [header.index(h) for h in covariate_names]

        problems = []
        subj_map: dict = {}
        out_map: dict = {}
        si, oi, tt, xx, yy = [], [], [], [], []
        seen = set()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                problems.append(f"line {line_no}: expected {len(header)} fields, got {len(row)}; row rejected")
                continue
            try:
                t = float(row[col["time"]])
                y = float(row[col["value"]])
                covs = [float(row[j]) for j in cov_idx]
            except ValueError:
                problems.append(f"line {line_no}: unparseable numeric value; row rejected")
                continue
            subject = row[col["subject_id"]].strip()
            outcome = row[col["outcome"]].strip()
            key = (subject, outcome, t)
            if key in seen:
                problems.append(f"line {line_no}: duplicate (subject, outcome, time) = {key}")
            seen.add(key)
            si.append(subj_map.setdefault(subject, len(subj_map)))
            oi.append(out_map.setdefault(outcome, len(out_map)))
            tt.append(t)
            xx.append(covs)
            yy.append(y)
    if not yy:
        raise IngestError(f"{path}: no data rows")
    covs_arr = np.asarray(xx, dtype=np.float64).reshape(len(yy), len(covariate_names))
    dataset = Dataset(
        si, oi, tt, covs_arr, yy,
        subject_ids=list(subj_map),
        outcome_names=list(out_map),
        covariate_names=covariate_names,
    )
    return dataset, problems


def write_dataset(dataset: Dataset, path) -> None:
    """Write a Dataset as a long-format CSV (inverse of read_long_csv)."""
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(REQUIRED_COLUMNS) + list(dataset.covariate_names))
        for r in range(dataset.n_rows):
            writer.writerow(
                [
                    dataset.subject_ids[dataset.subject_idx[r]],
                    dataset.outcome_names[dataset.outcome_idx[r]],
                    _fmt(dataset.time[r]),
                    _fmt(dataset.value[r]),
                ]
                + [_fmt(v) for v in dataset.covariates[r]]
            )


def dataset_checksum(dataset: Dataset) -> str:
    """SHA-256 of the canonical (row-order independent) serialization."""
    order = dataset.rows_sorted()
    buf = _io.StringIO()
    buf.write(",".join(dataset.covariate_names) + "\n")
    for r in order:
        fields = [
            str(dataset.subject_ids[dataset.subject_idx[r]]),
            str(dataset.outcome_names[dataset.outcome_idx[r]]),
            _fmt(dataset.time[r]),
            _fmt(dataset.value[r]),
        ] + [_fmt(v) for v in dataset.covariates[r]]
        buf.write(",".join(fields) + "\n")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Weighted quantile / normal-scores transform
# ---------------------------------------------------------------------------


def weighted_ecdf(reference_values, reference_weights, query) -> np.ndarray:
    """Mid-rank weighted empirical CDF of the reference, evaluated at query.

    F(x) = (sum_{v<x} w + 0.5 * sum_{v=x} w) / W over the reference sample.
    """
    ref = np.asarray(reference_values, dtype=np.float64)
    w = np.asarray(reference_weights, dtype=np.float64)
    order = np.argsort(ref, kind="stable")
    ref_sorted = ref[order]
    cum = np.cumsum(w[order])
    total = cum[-1]
    query = np.asarray(query, dtype=np.float64)
    left = np.searchsorted(ref_sorted, query, side="left")
    right = np.searchsorted(ref_sorted, query, side="right")
    below = np.where(left > 0, cum[np.maximum(left - 1, 0)], 0.0)
    upto = np.where(right > 0, cum[np.maximum(right - 1, 0)], 0.0)
    return (below + 0.5 * (upto - below)) / total


def weighted_inverse_gaussian_transform(values, weights=None, reference_values=None, reference_weights=None) -> np.ndarray:
    """Map values through the weighted empirical CDF and the normal quantile.

    The CDF uses the mid-rank plotting position F(x) = (sum_{v<x} w +
    0.5 * sum_{v=x} w) / W, then F is clamped to
    [1/(2 W_eff), 1 - 1/(2 W_eff)] with W_eff the effective weight count
    (sum w)^2 / sum w^2, keeping outputs finite.  By default the CDF is
    estimated from ``values`` themselves; pass ``reference_values`` to
    estimate it from a different sample (e.g. baseline visits only).
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if reference_values is None:
        reference_values = values
        reference_weights = weights if weights is not None else np.ones_like(values)
    else:
        reference_values = np.asarray(reference_values, dtype=np.float64)
        if reference_weights is None:
            reference_weights = np.ones_like(reference_values)
    ref_w = np.asarray(reference_weights, dtype=np.float64)
    if ref_w.shape != np.shape(reference_values):
        raise ValueError("weights must match values in length")
    if np.any(ref_w < 0):
        raise ValueError("weights must be nonnegative")
    total = float(ref_w.sum())
    if total <= 0:
        raise ValueError("weights must not all be zero")

    f = weighted_ecdf(reference_values, ref_w, values)
    w_eff = total**2 / float(np.sum(ref_w**2))
    lo, hi = 1.0 / (2.0 * w_eff), 1.0 - 1.0 / (2.0 * w_eff)
    f = np.clip(f, min(lo, 0.5), max(hi, 0.5))
    return ndtri(f)


def group_balance_weights(groups) -> np.ndarray:
    """Inverse-group-frequency weights: quantiles then approximate a balanced sample."""
    groups = np.asarray(groups)
    labels, counts = np.unique(groups, return_counts=True)
    count_of = dict(zip(labels.tolist(), counts.tolist()))
    n = len(groups)
    g = len(labels)
    return np.array([n / (g * count_of[v]) for v in groups.tolist()])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Provenance for one output directory; sufficient to re-run the job."""

    command: str
    version: str
    seed: int
    data_path: str
    data_sha256: str
    n_subjects: int
    n_outcomes: int
    n_covariates: int
    n_rows: int
    model: dict
    sampler: dict
    runtime_seconds: float
    outputs: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def write_manifest(manifest: RunManifest, path) -> None:
    parser = configparser.ConfigParser()
    parser["run"] = {
        "command": manifest.command,
        "version": manifest.version,
        "seed": str(manifest.seed),
        "runtime_seconds": _fmt(manifest.runtime_seconds),
    }
    parser["data"] = {
        "path": manifest.data_path,
        "sha256": manifest.data_sha256,
        "subjects": str(manifest.n_subjects),
        "outcomes": str(manifest.n_outcomes),
        "covariates": str(manifest.n_covariates),
        "rows": str(manifest.n_rows),
    }
    parser["model"] = {k: str(v) for k, v in manifest.model.items()}
    parser["sampler"] = {k: str(v) for k, v in manifest.sampler.items()}
    parser["outputs"] = {f"file{i}": name for i, name in enumerate(manifest.outputs)}
    parser["notes"] = {f"note{i}": note for i, note in enumerate(manifest.notes)}
    with open(path, "w") as handle:
        parser.write(handle)


def read_manifest(path) -> RunManifest:
    parser = configparser.ConfigParser()
    with open(path) as handle:
        parser.read_file(handle)
    return RunManifest(
        command=parser["run"]["command"],
        version=parser["run"]["version"],
        seed=int(parser["run"]["seed"]),
        runtime_seconds=float(parser["run"]["runtime_seconds"]),
        data_path=parser["data"]["path"],
        data_sha256=parser["data"]["sha256"],
        n_subjects=int(parser["data"]["subjects"]),
        n_outcomes=int(parser["data"]["outcomes"]),
        n_covariates=int(parser["data"]["covariates"]),
        n_rows=int(parser["data"]["rows"]),
        model=dict(parser["model"]),
        sampler=dict(parser["sampler"]),
        outputs=[parser["outputs"][k] for k in sorted(parser["outputs"], key=lambda s: int(s[4:]))],
        notes=[parser["notes"][k] for k in sorted(parser["notes"], key=lambda s: int(s[4:]))],
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def write_draws(draws, out_dir: Path) -> list:
    """One CSV per chain: parameters in layout order plus sampler stats."""
    files = []
    stat_names = ["divergent", "tree_depth", "energy", "accept_stat"]
    for c in range(draws.n_chains):
        path = out_dir / f"draws_chain{c + 1}.csv"
        header = list(draws.names) + stat_names
        rows = []
        for s in range(draws.n_draws):
            row = [_fmt(v) for v in draws.values[c, s]]
            row.append(str(int(draws.stats["divergent"][c, s])))
            row.append(str(int(draws.stats["tree_depth"][c, s])))
            row.append(_fmt(draws.stats["energy"][c, s]))
            row.append(_fmt(draws.stats["accept_stat"][c, s]))
            rows.append(row)
        _write_csv(path, header, rows)
        files.append(path.name)
    return files


def read_draws_values(path) -> tuple[list, np.ndarray, dict]:
    """Read one chain CSV back: (names, values, stats arrays)."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        stat_names = ["divergent", "tree_depth", "energy", "accept_stat"]
        n_params = len(header) - len(stat_names)
        names = header[:n_params]
        values = []
        stats = {k: [] for k in stat_names}
        for row in reader:
            values.append([float(v) for v in row[:n_params]])
            stats["divergent"].append(bool(int(row[n_params])))
            stats["tree_depth"].append(int(row[n_params + 1]))
            stats["energy"].append(float(row[n_params + 2]))
            stats["accept_stat"].append(float(row[n_params + 3]))
    return names, np.asarray(values, dtype=np.float64), {
        "divergent": np.asarray(stats["divergent"], dtype=bool),
        "tree_depth": np.asarray(stats["tree_depth"], dtype=np.int64),
        "energy": np.asarray(stats["energy"], dtype=np.float64),
        "accept_stat": np.asarray(stats["accept_stat"], dtype=np.float64),
    }


def write_summary(summary_rows, path: Path) -> None:
    _write_csv(
        path,
        ["name", "posterior_mean", "posterior_sd", "ci_2.5", "ci_97.5", "rhat", "ess"],
        [
            [
                r.name,
                _fmt(r.posterior_mean),
                _fmt(r.posterior_sd),
                _fmt(r.ci_lower),
                _fmt(r.ci_upper),
                _fmt(r.rhat),
                _fmt(r.ess),
            ]
            for r in summary_rows
        ],
    )


def write_criteria(criteria_by_model: dict, path: Path) -> None:
    """Rows mirror the model-comparison table: one model, WAIC/LOOIC/DIC."""
    header = [
        "model", "waic", "looic", "dic",
        "p_waic", "p_loo", "p_dic", "n_obs", "max_pareto_k", "n_high_k",
    ]
    rows = []
    for model, results in criteria_by_model.items():
        waic_r, loo_r, dic_r = results["waic"], results["looic"], results["dic"]
        max_k = float(np.max(loo_r.pareto_k)) if loo_r.pareto_k is not None and len(loo_r.pareto_k) else float("nan")
        rows.append(
            [
                model,
                _fmt(waic_r.value), _fmt(loo_r.value), _fmt(dic_r.value),
                _fmt(waic_r.effective_params), _fmt(loo_r.effective_params), _fmt(dic_r.effective_params),
                str(waic_r.n_obs), _fmt(max_k), str(loo_r.n_high_k),
            ]
        )
    _write_csv(path, header, rows)


def read_criteria(path) -> dict:
    """Inverse of write_criteria: {model: {column: value}}."""
    out = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            out[row["model"]] = {
                "waic": float(row["waic"]),
                "looic": float(row["looic"]),
                "dic": float(row["dic"]),
                "n_obs": int(row["n_obs"]),
            }
    return out


def write_trajectories(trajectories: dict, out_dir: Path) -> list:
    """One CSV per named trajectory set; plot-ready long format."""
    files = []
    for name, grids in trajectories.items():
        if not grids:
            continue
        path = out_dir / f"trajectories_{name}.csv"
        rows = []
        for tg in grids:
            for j in range(len(tg.axis)):
                rows.append(
                    [
                        tg.kind,
                        tg.outcome_name,
                        _fmt(tg.axis[j]),
                        _fmt(tg.mean[j]),
                        _fmt(tg.ci_lower[j]),
                        _fmt(tg.ci_upper[j]),
                    ]
                )
        _write_csv(path, ["kind", "outcome", "axis", "mean", "ci_2.5", "ci_97.5"], rows)
        files.append(path.name)
    return files


def persist_results(
    draws=None,
    summaries=None,
    criteria=None,
    trajectories=None,
    manifest: RunManifest | None = None,
    out_dir=".",
) -> list:
    """Write every provided artifact into out_dir; returns written file names.

    Column order is deterministic and numbers carry 17 significant digits.
    Empty trajectory sets produce no file and are noted in the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    try:
        if draws is not None:
            files += write_draws(draws, out_dir)
        if summaries is not None:
            write_summary(summaries, out_dir / "summary.csv")
            files.append("summary.csv")
        if criteria is not None:
            write_criteria(criteria, out_dir / "criteria.csv")
            files.append("criteria.csv")
        if trajectories is not None:
            written = write_trajectories(trajectories, out_dir)
            files += written
            if manifest is not None:
                for name, grids in trajectories.items():
                    if not grids:
                        manifest.notes.append(f"trajectory set {name!r} was empty; no file written")
    except OSError as err:
        raise OSError(f"failed writing results under {out_dir}: {err}") from err
    if manifest is not None:
        manifest.outputs = files + ["manifest.ini"]
        write_manifest(manifest, out_dir / "manifest.ini")
        files.append("manifest.ini")
    return files


def load_fit(fit_dir):
    """Rebuild (DrawsMatrix, Dataset, RunManifest) from a fit output directory."""
    from .model import layout as make_layout
    from .sampler import DrawsMatrix

    fit_dir = Path(fit_dir)
    manifest = read_manifest(fit_dir / "manifest.ini")
    dataset, _problems = _read_long_csv(fit_dir / "dataset.csv")
    config = ModelConfig(
        re_variant=manifest.model["re_variant"],
        link=manifest.model.get("link", "identity"),
        prior_scale_fixed=float(manifest.model.get("prior_scale_fixed", 100.0)),
        prior_scale_half_cauchy=float(manifest.model.get("prior_scale_half_cauchy", 2.5)),
        lkj_shape=float(manifest.model.get("lkj_shape", 1.0)),
    )
    settings = SamplerSettings(
        chains=int(manifest.sampler.get("chains", 2)),
        iterations=int(manifest.sampler.get("iterations", 2000)),
        warmup=int(manifest.sampler.get("warmup", 1000)),
        thin=int(manifest.sampler.get("thin", 1)),
        seed=int(manifest.sampler.get("seed", manifest.seed)),
        max_tree_depth=int(manifest.sampler.get("max_tree_depth", 10)),
        target_accept=float(manifest.sampler.get("target_accept", 0.8)),
    )
    lay = make_layout(config, dataset.n, dataset.p, dataset.d)
    chain_files = sorted(fit_dir.glob("draws_chain*.csv"), key=lambda p: int(p.stem.replace("draws_chain", "")))
    if not chain_files:
        raise IngestError(f"{fit_dir}: no draws_chain*.csv files")
    names = None
    values = []
    stats_list = []
    for path in chain_files:
        chain_names, chain_values, chain_stats = read_draws_values(path)
        if names is None:
            names = chain_names
        values.append(chain_values)
        stats_list.append(chain_stats)
    if names != lay.param_names():
        raise IngestError(f"{fit_dir}: draw columns do not match the model layout")
    draws = DrawsMatrix(
        names=names,
        values=np.stack(values),
        stats={k: np.stack([s[k] for s in stats_list]) for k in stats_list[0]},
        layout=lay,
        config=config,
        settings=settings,
        meta={"loaded_from": str(fit_dir)},
    )
    return draws, dataset, manifest


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def load_config_file(path) -> dict:
    """Flat sectioned config: [model] and [sampler] keys matching the dataclasses.

    Returns {"model": {...}, "sampler": {...}} with parsed values; omitted
    keys fall back to dataclass defaults.
    """
    parser = configparser.ConfigParser()
    with open(path) as handle:
        parser.read_file(handle)
    out = {"model": {}, "sampler": {}}
    if parser.has_section("model"):
        section = parser["model"]
        for key in ("re_variant", "link"):
            if key in section:
                out["model"][key] = section[key].strip().lower()
        for key in ("prior_scale_fixed", "prior_scale_half_cauchy", "lkj_shape"):
            if key in section:
                out["model"][key] = float(section[key])
    if parser.has_section("sampler"):
        section = parser["sampler"]
        for key in ("chains", "iterations", "warmup", "thin", "seed", "max_tree_depth"):
            if key in section:
                out["sampler"][key] = int(section[key])
        if "target_accept" in section:
            out["sampler"]["target_accept"] = float(section["target_accept"])
    return out


def build_config(file_options: dict | None = None, **overrides) -> ModelConfig:
    options = dict((file_options or {}).get("model", {}))
    options.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**options)


def build_settings(file_options: dict | None = None, **overrides) -> SamplerSettings:
    options = dict((file_options or {}).get("sampler", {}))
    options.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerSettings(**options)
