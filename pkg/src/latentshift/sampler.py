"""Dynamic Hamiltonian Monte Carlo (no-U-turn) sampler with warmup adaptation.

The transition doubles a leapfrog trajectory until the no-U-turn criterion
fires or the tree-depth cap is hit, selecting the next state by multinomial
sampling over trajectory points.  Warmup combines dual-averaging step-size
adaptation with windowed estimation of a diagonal metric (per-coordinate
posterior variances).

``gradient_fn`` is any callable ``q -> (log_density, gradient)``; the
sampler treats non-finite values as divergences.  Chains draw from
independent substreams of the seeded generator, so results are a pure
function of (seed, settings, model, data) regardless of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, ModelConfig, ParameterLayout, validate_dataset
from .posterior import LogDensity

__all__ = [
    "SamplerSettings",
    "SamplerError",
    "DatasetInvalidError",
    "TransitionStats",
    "DrawsMatrix",
    "leapfrog",
    "nuts_transition",
    "warmup_adapt",
    "run",
]

# Energy-loss threshold beyond which a trajectory point is declared divergent
# (matches the Stan default).
DIVERGENCE_THRESHOLD = 1000.0

# Consecutive divergent warmup transitions tolerated before aborting.
MAX_CONSECUTIVE_DIVERGENCES = 100


class SamplerError(RuntimeError):
    """Sampling could not proceed (bad initialization, persistent divergence)."""


class DatasetInvalidError(ValueError):
    """The dataset failed identifiability validation."""


@dataclass(frozen=True)
class SamplerSettings:
    """Chain count, iteration schedule, and tuning targets.

    ``metric`` selects the adaptation target: "diag" for per-coordinate
    variances, "dense" for the full covariance, or "auto" (dense up to
    DENSE_METRIC_LIMIT coordinates, diagonal beyond).  Latent-time models
    carry a soft scale ridge between the outcome slopes, the time-shift SD,
    and the shift spread that a diagonal metric cannot remove, so dense is
    the default where affordable.
    """

    chains: int = 2
    iterations: int = 2000  # total per chain, including warmup
    warmup: int = 1000
    thin: int = 1
    seed: int = 0
    max_tree_depth: int = 10
    target_accept: float = 0.8
    metric: str = "auto"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.metric not in ("auto", "diag", "dense"):
            raise ValueError("metric must be auto, diag, or dense")

    @property
    def kept_draws(self) -> int:
        return (self.iterations - self.warmup) // self.thin


# Above this dimension "auto" falls back to the diagonal metric.
DENSE_METRIC_LIMIT = 2000


@dataclass
class TransitionStats:
    """Per-transition sampler statistics.

    logp and grad cache the density at the returned position so callers can
    chain transitions without re-evaluating.
    """

    depth: int
    divergent: bool
    accept_stat: float  # averaged acceptance statistic in [0, 1]
    energy: float
    n_leapfrog: int
    logp: float = math.nan
    grad: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Metrics (inverse mass: posterior covariance estimates)
# ---------------------------------------------------------------------------


class DiagonalMetric:
    """Per-coordinate variance estimates as the inverse mass."""

    def __init__(self, variances):
        self.variances = np.asarray(variances, dtype=np.float64)
        self._momentum_sd = 1.0 / np.sqrt(self.variances)

    def velocity(self, r):
        """Inverse mass times momentum (also the 'sharp' U-turn vector)."""
        return self.variances * r

    def sample_momentum(self, rng):
        return rng.standard_normal(len(self.variances)) * self._momentum_sd

    def diagonal(self):
        return self.variances


class DenseMetric:
    """Full covariance estimate as the inverse mass."""

    def __init__(self, covariance):
        self.covariance = np.asarray(covariance, dtype=np.float64)
        self._chol = np.linalg.cholesky(self.covariance)

    def velocity(self, r):
        return self._chol @ (self._chol.T @ r)

    def sample_momentum(self, rng):
        # r ~ N(0, Sigma^{-1}): solve L' r = xi with Sigma = L L'
        xi = rng.standard_normal(self.covariance.shape[0])
        return np.linalg.solve(self._chol.T, xi)

    def diagonal(self):
        return np.diag(self.covariance)


def _as_metric(metric, dim):
    if metric is None:
        return DiagonalMetric(np.ones(dim))
    if isinstance(metric, (DiagonalMetric, DenseMetric)):
        return metric
    arr = np.asarray(metric, dtype=np.float64)
    return DenseMetric(arr) if arr.ndim == 2 else DiagonalMetric(arr)


def _kinetic_v(r, velocity):
    return 0.5 * float(np.dot(r, velocity))


# ---------------------------------------------------------------------------
# Leapfrog integrator
# ---------------------------------------------------------------------------


def leapfrog(position, momentum, step_size, gradient_fn, inv_metric=None):
    """One velocity-Verlet step under a diagonal metric.

    ``inv_metric`` holds per-coordinate posterior-variance estimates (the
    inverse mass); None means the identity.  Returns (position', momentum').
    """
    q = np.asarray(position, dtype=np.float64)
    r = np.asarray(momentum, dtype=np.float64)
    metric = _as_metric(inv_metric, len(q))
    _logp, grad = gradient_fn(q)
    q_new, r_new, _logp_new, _grad_new, _v_new = _leapfrog_cached(q, r, grad, step_size, metric, gradient_fn)
    return q_new, r_new


def _leapfrog_cached(q, r, grad, step_size, metric, gradient_fn):
    """Leapfrog reusing the cached gradient; returns (q, r, logp, grad, velocity)."""
    with np.errstate(invalid="ignore", over="ignore"):
        r_half = r + 0.5 * step_size * grad
        q_new = q + step_size * metric.velocity(r_half)
        logp_new, grad_new = gradient_fn(q_new)
        r_new = r_half + 0.5 * step_size * grad_new
        v_new = metric.velocity(r_new)
    return q_new, r_new, logp_new, grad_new, v_new


# ---------------------------------------------------------------------------
# No-U-turn transition
# ---------------------------------------------------------------------------


class _Subtree:
    """Trajectory segment with oriented endpoints and a sampled proposal.

    v_left / v_right cache the metric-sharpened endpoint momenta used by the
    no-U-turn checks.
    """

    __slots__ = (
        "q_left", "r_left", "grad_left", "logp_left", "v_left",
        "q_right", "r_right", "grad_right", "logp_right", "v_right",
        "q_prop", "logp_prop", "grad_prop", "energy_prop",
        "log_sum_w", "r_sum", "alpha_sum", "n_alpha", "divergent", "turning",
    )

    @classmethod
    def leaf(cls, q, r, logp, grad, v, log_w, energy):
        node = cls()
        node.q_left = node.q_right = node.q_prop = q
        node.r_left = node.r_right = r
        node.v_left = node.v_right = v
        node.grad_left = node.grad_right = node.grad_prop = grad
        node.logp_left = node.logp_right = node.logp_prop = logp
        node.energy_prop = energy
        node.log_sum_w = log_w
        node.r_sum = r.copy()
        node.alpha_sum = 0.0
        node.n_alpha = 0
        node.divergent = False
        node.turning = False
        return node

    def tip(self, direction):
        if direction > 0:
            return self.q_right, self.r_right, self.logp_right, self.grad_right
        return self.q_left, self.r_left, self.logp_left, self.grad_left

    def absorb(self, left, right):
        """Adopt merged endpoints and momentum sum from oriented halves."""
        self.q_left, self.r_left, self.v_left = left.q_left, left.r_left, left.v_left
        self.grad_left, self.logp_left = left.grad_left, left.logp_left
        self.q_right, self.r_right, self.v_right = right.q_right, right.r_right, right.v_right
        self.grad_right, self.logp_right = right.grad_right, right.logp_right
        self.r_sum = left.r_sum + right.r_sum


def _criterion(v_left, v_right, r_sum) -> bool:
    return np.dot(r_sum, v_left) > 0.0 and np.dot(r_sum, v_right) > 0.0


def _merged_no_uturn(left: _Subtree, right: _Subtree) -> bool:
    """No-U-turn checks across the merged segment and both joins."""
    ok = _criterion(left.v_left, right.v_right, left.r_sum + right.r_sum)
    ok = ok and _criterion(left.v_left, right.v_left, left.r_sum + right.r_left)
    ok = ok and _criterion(left.v_right, right.v_right, right.r_sum + left.r_right)
    return ok


def _build_tree(depth, q, r, logp, grad, direction, h0, step_size, metric, gradient_fn, rng):
    """Build a subtree of 2**depth leapfrog points beyond the given state."""
    if depth == 0:
        q1, r1, logp1, grad1, v1 = _leapfrog_cached(q, r, grad, direction * step_size, metric, gradient_fn)
        if math.isfinite(logp1) and np.all(np.isfinite(grad1)) and np.all(np.isfinite(v1)):
            h1 = logp1 - _kinetic_v(r1, v1)
        else:
            h1 = -math.inf
        log_w = h1 - h0
        node = _Subtree.leaf(q1, r1, logp1, grad1, v1, log_w, -h1)
        node.divergent = not (log_w > -DIVERGENCE_THRESHOLD)
        node.alpha_sum = math.exp(min(0.0, log_w)) if math.isfinite(log_w) else 0.0
        node.n_alpha = 1
        return node

    first = _build_tree(depth - 1, q, r, logp, grad, direction, h0, step_size, metric, gradient_fn, rng)
    if first.divergent or first.turning:
        return first
    second = _build_tree(depth - 1, *first.tip(direction), direction, h0, step_size, metric, gradient_fn, rng)

    first.alpha_sum += second.alpha_sum
    first.n_alpha += second.n_alpha
    first.divergent |= second.divergent
    if first.divergent or second.turning:
        first.turning |= second.turning
        return first

    log_sum = np.logaddexp(first.log_sum_w, second.log_sum_w)
    if math.log(rng.random()) < second.log_sum_w - log_sum:
        first.q_prop = second.q_prop
        first.logp_prop = second.logp_prop
        first.grad_prop = second.grad_prop
        first.energy_prop = second.energy_prop
    first.log_sum_w = log_sum

    left, right = (first, second) if direction > 0 else (second, first)
    turning = not _merged_no_uturn(left, right)
    first.absorb(left, right)
    first.turning = turning
    return first


def nuts_transition(
    current,
    rng,
    step_size,
    metric,
    gradient_fn,
    max_tree_depth=10,
    logp=None,
    grad=None,
):
    """One no-U-turn transition from ``current``.

    ``metric`` is the diagonal of per-coordinate variance estimates (inverse
    mass); momentum is drawn with variance 1/metric.  Returns
    (next_position, TransitionStats).  A non-finite density at the current
    point yields next = current with the divergence flag set.
    """
    q0 = np.asarray(current, dtype=np.float64)
    metric = _as_metric(metric, len(q0))
    if logp is None or grad is None:
        logp, grad = gradient_fn(q0)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        return q0, TransitionStats(
            depth=0, divergent=True, accept_stat=0.0, energy=math.inf, n_leapfrog=0, logp=logp, grad=grad
        )

    r0 = metric.sample_momentum(rng)
    v0 = metric.velocity(r0)
    h0 = logp - _kinetic_v(r0, v0)

    tree = _Subtree.leaf(q0, r0, logp, grad, v0, 0.0, -h0)
    alpha_sum = 0.0
    n_alpha = 0
    divergent = False
    depth = 0
    for depth_iter in range(max_tree_depth):
        direction = 1 if rng.random() < 0.5 else -1
        sub = _build_tree(
            depth_iter, *tree.tip(direction), direction, h0, step_size, metric, gradient_fn, rng
        )
        alpha_sum += sub.alpha_sum
        n_alpha += sub.n_alpha
        if sub.divergent:
            divergent = True
            break
        if sub.turning:
            break
        # biased progressive sampling at the top level
        if math.log(rng.random()) < sub.log_sum_w - tree.log_sum_w:
            tree.q_prop = sub.q_prop
            tree.logp_prop = sub.logp_prop
            tree.grad_prop = sub.grad_prop
            tree.energy_prop = sub.energy_prop
        tree.log_sum_w = np.logaddexp(tree.log_sum_w, sub.log_sum_w)
        left, right = (tree, sub) if direction > 0 else (sub, tree)
        still_ok = _merged_no_uturn(left, right)
        tree.absorb(left, right)
        depth = depth_iter + 1
        if not still_ok:
            break

    accept = alpha_sum / n_alpha if n_alpha else 0.0
    stats = TransitionStats(
        depth=depth,
        divergent=divergent,
        accept_stat=float(min(1.0, accept)),
        energy=float(tree.energy_prop),
        n_leapfrog=n_alpha,
        logp=float(tree.logp_prop),
        grad=tree.grad_prop,
    )
    return tree.q_prop, stats


# ---------------------------------------------------------------------------
# Warmup adaptation
# ---------------------------------------------------------------------------


class _DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.log_eps = math.log(step_size)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat):
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        w = self.count ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self):
        return math.exp(self.log_eps_bar)


class _Welford:
    """Online mean/variance accumulator for the metric windows."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, q):
        self.count += 1
        diff = q - self.mean
        self.mean += diff / self.count
        self.m2 += diff * (q - self.mean)

    def regularized(self) -> DiagonalMetric:
        # shrink toward a small diagonal, as in Stan's windowed adaptation
        var = self.m2 / max(self.count - 1, 1)
        n = self.count
        return DiagonalMetric((n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0)))


class _WelfordDense:
    """Online mean/covariance accumulator for dense-metric windows."""

    def __init__(self, dim):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, q):
        self.count += 1
        diff = q - self.mean
        self.mean += diff / self.count
        self.m2 += np.outer(diff, q - self.mean)

    def regularized(self) -> DenseMetric:
        n = self.count
        cov = self.m2 / max(n - 1, 1)
        shrink = n / (n + 5.0)
        cov = shrink * cov + 1e-3 * (5.0 / (n + 5.0)) * np.eye(cov.shape[0])
        try:
            return DenseMetric(cov)
        except np.linalg.LinAlgError:
            return DenseMetric(np.diag(np.maximum(np.diag(cov), 1e-10)))


def _warmup_windows(warmup: int):
    """Metric-window schedule: (init_buffer, set of window-end iterations).

    Follows the usual fast/slow/fast split: an initial buffer with no metric
    accumulation, doubling slow windows with a metric rebuild at each end,
    and a terminal buffer that only tunes the step size.
    """
    if warmup < 20:
        return 0, set()
    init_buffer, term_buffer, base_window = 75, 150, 25
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.10 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, set(ends)


def find_initial_step_size(q, logp, grad, metric, gradient_fn, rng):
    """Double/halve the step size until one-step acceptance crosses 1/2."""
    step_size = 1.0
    metric = _as_metric(metric, len(q))
    r = metric.sample_momentum(rng)
    h = logp - _kinetic_v(r, metric.velocity(r))

    def h_after(eps):
        q1, r1, logp1, _g, v1 = _leapfrog_cached(q, r, grad, eps, metric, gradient_fn)
        if math.isfinite(logp1) and np.all(np.isfinite(r1)) and np.all(np.isfinite(v1)):
            return logp1 - _kinetic_v(r1, v1)
        return -math.inf

    ratio = h_after(step_size) - h
    direction = 1 if ratio > math.log(0.5) else -1
    while True:
        if direction == 1 and not ratio > math.log(0.5):
            break
        if direction == -1 and not ratio < math.log(0.5):
            break
        step_size *= 2.0**direction
        if step_size > 1e7 or step_size < 1e-10:
            raise SamplerError("initial step-size search failed to bracket acceptance 1/2")
        ratio = h_after(step_size) - h
    return step_size


def warmup_adapt(gradient_fn, init, settings: SamplerSettings, rng, block_names=None, metric_shape="diag"):
    """Run warmup; returns (position, step_size, metric).

    For the default diagonal shape the returned metric is the vector of
    regularized per-coordinate sample variances; "dense" returns a
    DenseMetric over the full covariance.  ``warmup = 0`` performs no
    adaptation: the metric stays the identity and the step size is the
    heuristic initial value.  Persistent divergence aborts with a diagnostic
    naming the dominant coordinate block.
    """
    q = np.asarray(init, dtype=np.float64).copy()
    dim = len(q)
    metric = DiagonalMetric(np.ones(dim))
    logp, grad = gradient_fn(q)
    if not math.isfinite(logp):
        raise SamplerError("initial point has non-finite density")
    step_size = find_initial_step_size(q, logp, grad, metric, gradient_fn, rng)
    if settings.warmup == 0:
        return q, step_size, metric.diagonal()

    averager = _DualAveraging(step_size, settings.target_accept)
    init_buffer, metric_updates = _warmup_windows(settings.warmup)
    welford_cls = _WelfordDense if metric_shape == "dense" else _Welford
    welford = welford_cls(dim) if metric_updates else None
    consecutive_divergent = 0
    worst_coord = np.zeros(dim, dtype=np.intp)

    for it in range(1, settings.warmup + 1):
        q, stats = nuts_transition(
            q, rng, step_size, metric, gradient_fn,
            max_tree_depth=settings.max_tree_depth, logp=logp, grad=grad,
        )
        logp, grad = stats.logp, stats.grad
        if stats.divergent:
            consecutive_divergent += 1
            worst = int(np.argmax(np.abs(grad))) if np.all(np.isfinite(grad)) else int(np.argmax(~np.isfinite(grad)))
            worst_coord[worst] += 1
            if consecutive_divergent >= MAX_CONSECUTIVE_DIVERGENCES:
                coord = int(np.argmax(worst_coord))
                name = block_names[coord] if block_names is not None else f"coordinate {coord}"
                raise SamplerError(
                    f"persistent divergence during warmup (block: {name}); "
                    "the posterior may be degenerate at this scale"
                )
        else:
            consecutive_divergent = 0
        step_size = averager.update(stats.accept_stat)
        if welford is not None and it > init_buffer:
            welford.update(q)
        if it in metric_updates:
            metric = welford.regularized()
            welford = welford_cls(dim)
            step_size = find_initial_step_size(q, logp, grad, metric, gradient_fn, rng)
            averager.restart(step_size)

    final = metric.diagonal() if isinstance(metric, DiagonalMetric) else metric
    return q, averager.adapted(), final


# ---------------------------------------------------------------------------
# Multi-chain driver
# ---------------------------------------------------------------------------


@dataclass
class DrawsMatrix:
    """Constrained-space posterior draws with per-draw sampler statistics.

    ``values`` has shape (chains, draws, total_dim) in layout order; the
    ``stats`` arrays have shape (chains, draws).
    """

    names: list
    values: np.ndarray
    stats: dict
    layout: ParameterLayout
    config: ModelConfig
    settings: SamplerSettings
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_draws(self) -> int:
        return self.values.shape[1]

    def stacked(self) -> np.ndarray:
        """(chains * draws, total_dim), chain-major order."""
        return self.values.reshape(-1, self.values.shape[2])

    def parameter(self, name: str) -> np.ndarray:
        """Per-chain draws (chains, draws) of one named parameter."""
        try:
            idx = self.names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self.values[:, :, idx]

    def divergence_rate(self) -> float:
        return float(np.mean(self.stats["divergent"]))


def _init_point(target: LogDensity, rng, max_tries=100):
    for _ in range(max_tries):
        q = rng.uniform(-2.0, 2.0, target.free_dim)
        res = target.value_and_grad(q)
        if res.finite:
            return q
    raise SamplerError("could not find a finite starting point in [-2, 2]^d")


def _run_chain(target: LogDensity, settings: SamplerSettings, seed_seq):
    rng = np.random.default_rng(seed_seq)
    block_names = target.free_block_names

    def gradient_fn(q):
        res = target.value_and_grad(q)
        return res.log_density, res.gradient

    q = _init_point(target, rng)
    q, step_size, inv_metric = warmup_adapt(gradient_fn, q, settings, rng, block_names=block_names)

    kept = settings.kept_draws
    values = np.empty((kept, target.layout.total_dim))
    divergent = np.zeros(kept, dtype=bool)
    depth = np.zeros(kept, dtype=np.int64)
    energy = np.zeros(kept)
    accept = np.zeros(kept)

    logp, grad = gradient_fn(q)
    out = 0
    for it in range(1, settings.iterations - settings.warmup + 1):
        q, stats = nuts_transition(
            q, rng, step_size, inv_metric, gradient_fn,
            max_tree_depth=settings.max_tree_depth, logp=logp, grad=grad,
        )
        logp, grad = stats.logp, stats.grad
        if it % settings.thin == 0:
            params, _ = target.params_at(q)
            values[out] = target.layout.pack(params)
            divergent[out] = stats.divergent
            depth[out] = stats.depth
            energy[out] = stats.energy
            accept[out] = stats.accept_stat
            out += 1
    stats_arrays = {"divergent": divergent, "tree_depth": depth, "energy": energy, "accept_stat": accept}
    return values[:out], stats_arrays, step_size, inv_metric


def run(config: ModelConfig, dataset: Dataset, settings: SamplerSettings) -> DrawsMatrix:
    """Fit the model: validate, adapt, and sample all chains.

    Chains are initialized from dispersed points (uniform in [-2, 2] on the
    unconstrained scale) using per-chain substreams of the seeded generator;
    output is deterministic for fixed inputs.
    """
    report = validate_dataset(dataset)
    if not report.ok:
        raise DatasetInvalidError(str(report))
    target = LogDensity(dataset, config)
    seed_children = np.random.SeedSequence(settings.seed).spawn(settings.chains)

    all_values = []
    all_stats = []
    chain_meta = []
    for chain, child in enumerate(seed_children):
        try:
            values, stats_arrays, step_size, inv_metric = _run_chain(target, settings, child)
        except SamplerError as err:
            raise SamplerError(f"chain {chain}: {err}") from err
        all_values.append(values)
        all_stats.append(stats_arrays)
        chain_meta.append({"step_size": step_size, "metric": inv_metric})

    values = np.stack(all_values)
    stats = {
        key: np.stack([s[key] for s in all_stats]) for key in all_stats[0]
    }
    return DrawsMatrix(
        names=target.layout.param_names(),
        values=values,
        stats=stats,
        layout=target.layout,
        config=config,
        settings=settings,
        meta={"chains": chain_meta, "seed": settings.seed},
    )
