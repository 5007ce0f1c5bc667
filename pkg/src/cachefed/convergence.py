"""Convergence laboratory for local SGD with periodic averaging.

Synthetic federated objectives F(c) = sum_k p_k F_k(c) with per-client
quadratics F_k(c) = 1/2 (c - a_k)^T H_k (c - a_k) + b_k (H_k diagonal,
positive) are smooth and strongly convex by construction, and every
analysis quantity has a closed form:

    c*   = (sum p_k H_k)^{-1} sum p_k H_k a_k
    F_k* = b_k
    Gamma = F* - sum_k p_k F_k*        (heterogeneity gap, >= 0)

The update rule alternates one stochastic gradient step per client with
an averaging step every E steps; under partial participation the server
averages K of N client iterates scaled by p_k N / K, which is unbiased
for the full weighted average. The certified rate bound at step t is

    (2L / ((t + gamma) mu)) * ((B + C) / mu + 2L ||c_1 - c*||^2)

with B = sum p_k^2 sigma_k^2 + 6 L Gamma + 8 (E-1)^2 G^2 and
C = (N-K)/(N-1) * 4/K * E^2 G^2. A global gradient-norm bound G does not
exist for unconstrained quadratics, so bounds are evaluated with the
empirical maximum stochastic-gradient norm seen along the run plus a 10%
margin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .rng import derive_rng, derive_seed

DIVERGENCE_LIMIT = 1e12
G_EMP_MARGIN = 1.1


@dataclass(frozen=True, eq=False)
class ConvexProblem:
    """Weighted sum of per-client quadratics with known optimum."""

    anchors: np.ndarray  # a_k: (N, dim)
    hessians: np.ndarray  # diagonal of H_k: (N, dim), all entries > 0
    offsets: np.ndarray  # b_k: (N,)
    weights: np.ndarray  # p_k: (N,), positive, sums to 1
    noise: np.ndarray  # sigma_k: (N,), >= 0

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.float64)
        hessians = np.asarray(self.hessians, dtype=np.float64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        noise = np.asarray(self.noise, dtype=np.float64)
        n, dim = anchors.shape
        if hessians.shape != (n, dim) or offsets.shape != (n,) or weights.shape != (n,):
            raise ValueError("inconsistent problem shapes")
        if noise.shape != (n,):
            raise ValueError("noise must hold one scale per client")
        if (hessians <= 0).any():
            raise ValueError("Hessian eigenvalues must be positive")
        if (weights <= 0).any() or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if (noise < 0).any():
            raise ValueError("noise scales must be >= 0")
        for name, arr in (
            ("anchors", anchors),
            ("hessians", hessians),
            ("offsets", offsets),
            ("weights", weights),
            ("noise", noise),
        ):
            object.__setattr__(self, name, arr)
        if self.gamma_gap < -1e-12:
            raise ValueError(f"heterogeneity gap must be >= 0, got {self.gamma_gap}")

    @property
    def num_clients(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def smoothness(self) -> float:
        """L: largest Hessian eigenvalue over all clients."""
        return float(self.hessians.max())

    @property
    def strong_convexity(self) -> float:
        """mu: smallest Hessian eigenvalue over all clients."""
        return float(self.hessians.min())

    @property
    def optimum(self) -> np.ndarray:
        """c*: minimizer of the weighted objective (closed form)."""
        weighted_h = (self.weights[:, None] * self.hessians).sum(axis=0)
        weighted_ha = (self.weights[:, None] * self.hessians * self.anchors).sum(axis=0)
        return weighted_ha / weighted_h

    @property
    def optimal_value(self) -> float:
        return self.objective(self.optimum)

    @property
    def client_optima(self) -> np.ndarray:
        """F_k*: per-client minima (the offsets, by construction)."""
        return self.offsets

    @property
    def gamma_gap(self) -> float:
        """Gamma = F* - sum_k p_k F_k*."""
        return self.optimal_value - float(self.weights @ self.offsets)

    def client_values(self, c: np.ndarray) -> np.ndarray:
        diff = c[None, :] - self.anchors
        return 0.5 * (self.hessians * diff * diff).sum(axis=1) + self.offsets

    def objective(self, c: np.ndarray) -> float:
        return float(self.weights @ self.client_values(c))

    def gradients(self, c_per_client: np.ndarray) -> np.ndarray:
        """Exact per-client gradients at per-client iterates (N, dim)."""
        return self.hessians * (c_per_client - self.anchors)


def make_problem(
    num_clients: int,
    dim: int,
    heterogeneity: float,
    noise: float,
    seed: int,
    mu: float = 1.0,
    smoothness: float = 4.0,
) -> ConvexProblem:
    """Draw a problem with exact strong-convexity/smoothness constants.

    Anchors are Gaussian with expected squared norm ``heterogeneity**2``;
    each client's Hessian diagonal has its extreme entries pinned to mu
    and L so the derived constants are exact. heterogeneity = 0 makes all
    clients share a minimizer (Gamma = 0).
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if mu <= 0 or smoothness < mu:
        raise ValueError("need 0 < mu <= smoothness")
    rng = derive_rng(seed, "problem")
    anchors = heterogeneity * rng.standard_normal((num_clients, dim)) / math.sqrt(dim)
    if dim == 1:
        if smoothness != mu:
            raise ValueError("dim=1 requires mu == smoothness")
        hessians = np.full((num_clients, 1), mu)
    else:
        hessians = rng.uniform(mu, smoothness, size=(num_clients, dim))
        hessians[:, 0] = mu
        hessians[:, -1] = smoothness
    weights = np.full(num_clients, 1.0 / num_clients)
    return ConvexProblem(
        anchors=anchors,
        hessians=hessians,
        offsets=np.zeros(num_clients),
        weights=weights,
        noise=np.full(num_clients, float(noise)),
    )


def reference_problem(seed: int = 7) -> ConvexProblem:
    """The default certification problem: 10 clients, dim 20, mu=1, L=4, sigma=0.1."""
    return make_problem(
        num_clients=10, dim=20, heterogeneity=1.0, noise=0.1, seed=seed, mu=1.0, smoothness=4.0
    )


def two_client_scalar_problem() -> ConvexProblem:
    """N=2, H_k = I, anchors 0 and 2, uniform weights: c*=1, F*=0.5, Gamma=0.5."""
    return ConvexProblem(
        anchors=np.array([[0.0], [2.0]]),
        hessians=np.ones((2, 1)),
        offsets=np.zeros(2),
        weights=np.array([0.5, 0.5]),
        noise=np.zeros(2),
    )


@dataclass(frozen=True)
class RateConfig:
    """Step budget and the decaying learning-rate rule eta_t = beta_lr / (t + gamma)."""

    total_steps: int  # T, counted in local SGD steps
    local_steps: int  # E, steps between averaging
    clients_per_round: int  # K
    gamma: float
    beta_lr: float

    def __post_init__(self):
        if self.total_steps < 1 or self.local_steps < 1 or self.clients_per_round < 1:
            raise ValueError("total_steps, local_steps, clients_per_round must be >= 1")
        if self.beta_lr < 0:
            raise ValueError("beta_lr must be >= 0 (0 freezes the trajectory)")
        # eta_t <= 2 eta_{t+E} for all t >= 1 requires gamma >= E - 1.
        if self.gamma < self.local_steps - 1:
            raise ValueError(
                f"gamma={self.gamma} too small: need gamma >= E-1 = {self.local_steps - 1} "
                "so that eta_t <= 2 eta_(t+E)"
            )

    def eta(self, t) -> np.ndarray | float:
        return self.beta_lr / (np.asarray(t, dtype=np.float64) + self.gamma)


def theorem_gamma(problem: ConvexProblem, local_steps: int) -> float:
    """gamma = max(8 L / mu - 1, E), so eta_1 <= 1/(4L) and eta_t <= 2 eta_{t+E}."""
    return max(8.0 * problem.smoothness / problem.strong_convexity - 1.0, float(local_steps))


def theorem_rate_config(
    problem: ConvexProblem, local_steps: int, clients_per_round: int, total_steps: int
) -> RateConfig:
    """The learning-rate rule used by the rate theorem: eta_t = 2 / (mu (t + gamma))."""
    cfg = RateConfig(
        total_steps=total_steps,
        local_steps=local_steps,
        clients_per_round=clients_per_round,
        gamma=theorem_gamma(problem, local_steps),
        beta_lr=2.0 / problem.strong_convexity,
    )
    validate_rate(problem, cfg)
    return cfg


def validate_rate(problem: ConvexProblem, cfg: RateConfig) -> None:
    mu, smooth = problem.strong_convexity, problem.smoothness
    eta1 = cfg.eta(1)
    limit = min(1.0 / mu, 1.0 / (4.0 * smooth))
    if eta1 > limit + 1e-12:
        raise ValueError(f"eta_1 = {eta1} exceeds min(1/mu, 1/(4L)) = {limit}")
    if not 1 <= cfg.clients_per_round <= problem.num_clients:
        raise ValueError(
            f"clients_per_round must lie in [1, {problem.num_clients}], "
            f"got {cfg.clients_per_round}"
        )


@dataclass(frozen=True)
class SyncSnapshot:
    """Pre-aggregation client iterates at one synchronization step."""

    step: int  # the step t whose update produced these v_{t+1}
    eta: float
    iterates: np.ndarray  # v_{t+1}^k: (N, dim)
    g_max: float  # max stochastic-gradient norm seen up to this step


@dataclass(frozen=True, eq=False)
class Trajectory:
    gaps: np.ndarray  # gap_t = F(cbar_t) - F*, t = 1..T
    etas: np.ndarray  # eta_t
    divergences: np.ndarray  # sum_k p_k ||cbar_t - c_t^k||^2
    g_max: float  # max stochastic-gradient norm over the run
    initial_sq_dist: float  # ||cbar_1 - c*||^2
    sync_snapshot: SyncSnapshot | None = None


def run_local_sgd_avg(
    problem: ConvexProblem,
    cfg: RateConfig,
    seed: int,
    capture_sync_index: int | None = None,
) -> Trajectory:
    """Simulate the update rule for T steps from the origin.

    Every client takes a stochastic gradient step each step; every E
    steps the server samples K clients without replacement and replaces
    all iterates by sum_{k in S} p_k (N/K) v_k. ``capture_sync_index``
    (1-based) additionally captures the pre-aggregation iterates at that
    synchronization for the sampling-variance checks.
    """
    validate_rate(problem, cfg)
    n, dim = problem.num_clients, problem.dim
    rng = derive_rng(seed, "local-sgd")
    c = np.zeros((n, dim))
    c_star = problem.optimum
    f_star = problem.optimal_value
    sqrt_dim = math.sqrt(dim)

    gaps = np.empty(cfg.total_steps)
    etas = np.empty(cfg.total_steps)
    divergences = np.empty(cfg.total_steps)
    g_max = 0.0
    snapshot = None
    syncs_seen = 0

    cbar = problem.weights @ c
    gaps[0] = problem.objective(cbar) - f_star
    etas[0] = cfg.eta(1)
    divergences[0] = float(
        problem.weights @ ((c - cbar[None, :]) ** 2).sum(axis=1)
    )
    for t in range(1, cfg.total_steps + 1):
        eta_t = float(cfg.eta(t))
        grad = problem.gradients(c)
        if problem.noise.any():
            grad = grad + (problem.noise[:, None] / sqrt_dim) * rng.standard_normal((n, dim))
        g_max = max(g_max, float(np.sqrt((grad * grad).sum(axis=1).max())))
        v = c - eta_t * grad

        if (t + 1) % cfg.local_steps == 0:
            syncs_seen += 1
            if capture_sync_index is not None and syncs_seen == capture_sync_index:
                snapshot = SyncSnapshot(step=t, eta=eta_t, iterates=v.copy(), g_max=g_max)
            if cfg.clients_per_round < n:
                chosen = rng.choice(n, size=cfg.clients_per_round, replace=False)
                agg = (n / cfg.clients_per_round) * (
                    problem.weights[chosen] @ v[chosen]
                )
            else:
                agg = problem.weights @ v
            c = np.broadcast_to(agg, (n, dim)).copy()
        else:
            c = v

        if t < cfg.total_steps:
            cbar = problem.weights @ c
            gap = problem.objective(cbar) - f_star
            if gap > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"gap {gap:.3e} exceeded {DIVERGENCE_LIMIT:.0e} at step {t + 1}; "
                    "check eta_1 <= min(1/mu, 1/(4L)) and gamma >= E-1"
                )
            gaps[t] = gap
            etas[t] = cfg.eta(t + 1)
            divergences[t] = float(
                problem.weights @ ((c - cbar[None, :]) ** 2).sum(axis=1)
            )

    return Trajectory(
        gaps=gaps,
        etas=etas,
        divergences=divergences,
        g_max=g_max,
        initial_sq_dist=float(c_star @ c_star),  # trajectories start at the origin
        sync_snapshot=snapshot,
    )


@dataclass(frozen=True)
class BoundConstants:
    """The two aggregate constants of the rate bound, plus the G used."""

    variance_term: float  # sum p_k^2 sigma_k^2
    hetero_term: float  # 6 L Gamma
    drift_term: float  # 8 (E-1)^2 G^2
    participation: float  # C = (N-K)/(N-1) * 4/K * E^2 G^2
    g_bound: float

    @property
    def b_total(self) -> float:
        return self.variance_term + self.hetero_term + self.drift_term

    @property
    def c_total(self) -> float:
        return self.participation


def bound_constants(problem: ConvexProblem, cfg: RateConfig, g_bound: float) -> BoundConstants:
    n, k, e = problem.num_clients, cfg.clients_per_round, cfg.local_steps
    variance = float((problem.weights**2 * problem.noise**2).sum())
    hetero = 6.0 * problem.smoothness * problem.gamma_gap
    drift = 8.0 * (e - 1) ** 2 * g_bound**2
    if k >= n or n == 1:
        participation = 0.0
    else:
        participation = ((n - k) / (n - 1)) * (4.0 / k) * e**2 * g_bound**2
    return BoundConstants(
        variance_term=variance,
        hetero_term=hetero,
        drift_term=drift,
        participation=participation,
        g_bound=g_bound,
    )


def theorem_bound(
    problem: ConvexProblem,
    cfg: RateConfig,
    constants: BoundConstants,
    initial_sq_dist: float,
    t,
) -> np.ndarray | float:
    """Evaluate the certified rate bound at step(s) t."""
    mu, smooth = problem.strong_convexity, problem.smoothness
    t = np.asarray(t, dtype=np.float64)
    inner = (constants.b_total + constants.c_total) / mu + 2.0 * smooth * initial_sq_dist
    return (2.0 * smooth / ((t + cfg.gamma) * mu)) * inner


@dataclass(frozen=True, eq=False)
class CertificationReport:
    mean_gaps: np.ndarray
    std_gaps: np.ndarray
    bounds: np.ndarray
    constants: BoundConstants
    gamma: float
    runs: int
    violations: int
    slope: float
    high_variance: bool
    initial_sq_dist: float

    def to_csv(self) -> str:
        lines = ["# columns: t,mean_gap,bound,violation_flag"]
        for i in range(self.mean_gaps.shape[0]):
            violated = int(self.mean_gaps[i] > self.bounds[i])
            lines.append(f"{i + 1},{self.mean_gaps[i]!r},{self.bounds[i]!r},{violated}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "runs": self.runs,
            "violations": self.violations,
            "slope": self.slope if math.isfinite(self.slope) else None,
            "high_variance": self.high_variance,
            "gamma": self.gamma,
            "g_emp": self.constants.g_bound,
            "B": self.constants.b_total,
            "C": self.constants.c_total,
            "B_variance_term": self.constants.variance_term,
            "B_hetero_term": self.constants.hetero_term,
            "B_drift_term": self.constants.drift_term,
            "initial_sq_dist": self.initial_sq_dist,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def fit_loglog_slope(gaps: np.ndarray, gamma: float, start: int | None = None) -> float:
    """Least-squares slope of log(gap) vs log(t + gamma) over the tail.

    NaN when the tail holds fewer than two positive gaps (e.g. a
    trajectory that starts at the optimum).
    """
    t = np.arange(1, gaps.shape[0] + 1, dtype=np.float64)
    if start is None:
        start = max(1, gaps.shape[0] // 10)
    mask = (t >= start) & (gaps > 0)
    if mask.sum() < 2:
        return float("nan")
    x = np.log(t[mask] + gamma)
    y = np.log(gaps[mask])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def certify_rate(
    problem: ConvexProblem, cfg: RateConfig, runs: int, base_seed: int = 0
) -> CertificationReport:
    """Average gap trajectories over seeded runs and compare to the bound.

    The bound is evaluated with the empirical gradient-norm surrogate
    (max over all runs, plus margin). When the Monte Carlo error in the
    tail is large relative to the mean gap, the report flags high
    variance instead of treating bound crossings as meaningful.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    all_gaps = np.empty((runs, cfg.total_steps))
    g_emp = 0.0
    initial_sq_dist = 0.0
    for r in range(runs):
        traj = run_local_sgd_avg(problem, cfg, derive_seed(base_seed, "cert", r))
        all_gaps[r] = traj.gaps
        g_emp = max(g_emp, traj.g_max)
        initial_sq_dist = traj.initial_sq_dist
    g_emp *= G_EMP_MARGIN

    mean_gaps = all_gaps.mean(axis=0)
    std_gaps = all_gaps.std(axis=0, ddof=1) if runs > 1 else np.zeros_like(mean_gaps)
    constants = bound_constants(problem, cfg, g_emp)
    t = np.arange(1, cfg.total_steps + 1)
    bounds = theorem_bound(problem, cfg, constants, initial_sq_dist, t)
    violations = int((mean_gaps > bounds).sum())

    tail = slice(max(1, cfg.total_steps // 10) - 1, cfg.total_steps)
    tail_mean, tail_std = mean_gaps[tail], std_gaps[tail]
    if tail_std.max() == 0.0:
        rel_se = 0.0  # fully deterministic tail
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel_se = float(
                np.nanmean(
                    np.where(tail_mean > 0, tail_std / math.sqrt(runs) / tail_mean, np.nan)
                )
            )
    high_variance = bool(np.isnan(rel_se) or rel_se > 0.2)

    return CertificationReport(
        mean_gaps=mean_gaps,
        std_gaps=std_gaps,
        bounds=bounds,
        constants=constants,
        gamma=cfg.gamma,
        runs=runs,
        violations=violations,
        slope=fit_loglog_slope(mean_gaps, cfg.gamma),
        high_variance=high_variance,
        initial_sq_dist=initial_sq_dist,
    )


# ---------------------------------------------------------------------------
# Lemma-level empirical checks


def divergence_bound_ratios(traj: Trajectory, cfg: RateConfig, g_bound: float) -> np.ndarray:
    """Measured client divergence over its bound 4 eta_t^2 (E-1)^2 G^2 per step.

    With E = 1 the divergence is identically zero and the bound is zero;
    ratios are reported as zero there.
    """
    bound = 4.0 * traj.etas**2 * (cfg.local_steps - 1) ** 2 * g_bound**2
    # averaging identical rows leaves ~1e-30 dust; treat it as exactly zero
    div = np.where(traj.divergences <= 1e-24, 0.0, traj.divergences)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(bound > 0, div / bound, np.where(div > 0, np.inf, 0.0))
    return ratios


@dataclass(frozen=True)
class SamplingCheck:
    """Monte Carlo verdicts for the unbiasedness and variance of aggregation."""

    unbiased_sq_error: float
    unbiased_tolerance: float
    variance_estimate: float
    variance_se: float
    variance_bound: float

    @property
    def unbiased_ok(self) -> bool:
        return self.unbiased_sq_error <= self.unbiased_tolerance

    @property
    def variance_ok(self) -> bool:
        return self.variance_estimate <= self.variance_bound + 3.0 * self.variance_se


def sampling_checks(
    problem: ConvexProblem,
    cfg: RateConfig,
    snapshot: SyncSnapshot,
    resamples: int,
    seed: int,
    g_bound: float,
) -> SamplingCheck:
    """Resample the client subset at a frozen sync point.

    Checks that the mean of the scaled aggregate matches the full
    weighted average (unbiasedness) and that the aggregate's variance
    around it stays within (N-K)/(N-1) * 4/K * eta_t^2 E^2 G^2.
    """
    n, k = problem.num_clients, cfg.clients_per_round
    rng = derive_rng(seed, "resample")
    v = snapshot.iterates
    vbar = problem.weights @ v
    aggs = np.empty((resamples, problem.dim))
    for r in range(resamples):
        chosen = rng.choice(n, size=k, replace=False)
        aggs[r] = (n / k) * (problem.weights[chosen] @ v[chosen])

    mean_agg = aggs.mean(axis=0)
    sq_error = float(((mean_agg - vbar) ** 2).sum())
    # E||mean - mu||^2 = tr(Cov)/R; 9x that is the 3-sigma-equivalent gate.
    cov_trace = float(aggs.var(axis=0, ddof=1).sum())
    tolerance = 9.0 * cov_trace / resamples

    sq_dev = ((aggs - vbar[None, :]) ** 2).sum(axis=1)
    estimate = float(sq_dev.mean())
    se = float(sq_dev.std(ddof=1) / math.sqrt(resamples))
    if k >= n or n == 1:
        bound = 0.0
    else:
        bound = ((n - k) / (n - 1)) * (4.0 / k) * snapshot.eta**2 * cfg.local_steps**2 * g_bound**2
    return SamplingCheck(
        unbiased_sq_error=sq_error,
        unbiased_tolerance=tolerance,
        variance_estimate=estimate,
        variance_se=se,
        variance_bound=bound,
    )
