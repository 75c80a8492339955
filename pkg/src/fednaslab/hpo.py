"""Privacy-constrained Bayesian hyperparameter search.

Searches {learning rate, batch size, clip threshold, noise multiplier} with a
Gaussian-process surrogate (Matérn-5/2, per-dimension lengthscales) and the
Expected Improvement acquisition, pruning every candidate whose planned
privacy cost would exceed the client's budget before any training happens.
The four dimensions are normalized to the unit cube (log scale for learning
rate, sampling rate, and clip norm) so one set of lengthscales is meaningful
across decades.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special
from scipy.stats import qmc

from .errors import ConfigError, InfeasibleError, NonFiniteError
from .nn.model import evaluate_accuracy
from .privacy import (
    DPConfig,
    privacy_cost,
    privacy_cost_integer_orders,
    train_dp_sgd,
)
from .space import Genome, SpaceConfig, materialize

logger = logging.getLogger(__name__)

XI_DEFAULT = 0.01
CANDIDATE_POOL = 1024
JITTER_START = 1e-6
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class HyperConfig:
    """One candidate training configuration."""

    eta: float
    batch_size: int
    clip: float
    sigma: float

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be > 0, got {self.clip}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class TrialPlan:
    """How long a single HPO trial trains; step counts follow the sampling
    rate so each epoch visits the shard roughly once."""

    epochs: int = 5

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")

    def steps_for(self, batch_size: int, dataset_size: int) -> int:
        return self.epochs * max(1, round(dataset_size / batch_size))


# Shortened plan for small-machine runs: sized so that a full-batch client
# (sampling rate 1) with sigma near 2 still clears an eps = 5 budget.
DESK_TRIAL_PLAN = TrialPlan(epochs=3)


@dataclass(frozen=True)
class SearchDomain:
    """Box bounds for the four dimensions plus the shard size that converts
    sampling rates into batch sizes."""

    dataset_size: int
    eta_range: tuple[float, float] = (1e-4, 1e-1)
    q_range: tuple[float, float] = (0.02, 1.0)
    clip_range: tuple[float, float] = (0.1, 4.0)
    sigma_range: tuple[float, float] = (0.5, 4.0)

    def __post_init__(self):
        if self.dataset_size < 1:
            raise ConfigError(f"dataset_size must be >= 1, got {self.dataset_size}")
        for name in ("eta_range", "q_range", "clip_range", "sigma_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi):
                raise ConfigError(f"{name} must satisfy 0 < lo < hi, got {(lo, hi)}")
        if self.q_range[1] > 1.0:
            raise ConfigError(f"q upper bound must be <= 1, got {self.q_range[1]}")
        if self.sigma_range[0] <= 0:
            raise ConfigError("sigma lower bound must be > 0 for DP search")

    def _log_unit(self, value, lo, hi):
        return math.log(value / lo) / math.log(hi / lo)

    def to_unit(self, config: HyperConfig) -> np.ndarray:
        q = min(max(config.batch_size / self.dataset_size, self.q_range[0]),
                self.q_range[1])
        eta = min(max(config.eta, self.eta_range[0]), self.eta_range[1])
        clip = min(max(config.clip, self.clip_range[0]), self.clip_range[1])
        sig_lo, sig_hi = self.sigma_range
        sigma = min(max(config.sigma, sig_lo), sig_hi)
        return np.array([
            self._log_unit(eta, *self.eta_range),
            self._log_unit(q, *self.q_range),
            self._log_unit(clip, *self.clip_range),
            (sigma - sig_lo) / (sig_hi - sig_lo),
        ])

    def from_unit(self, u) -> HyperConfig:
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)

        def log_interp(t, lo, hi):
            return lo * (hi / lo) ** t

        q = log_interp(u[1], *self.q_range)
        batch = int(min(max(round(q * self.dataset_size), 1), self.dataset_size))
        sig_lo, sig_hi = self.sigma_range
        return HyperConfig(
            eta=float(log_interp(u[0], *self.eta_range)),
            batch_size=batch,
            clip=float(log_interp(u[2], *self.clip_range)),
            sigma=float(sig_lo + u[3] * (sig_hi - sig_lo)),
        )

    def sampling_rate(self, config: HyperConfig) -> float:
        return min(config.batch_size / self.dataset_size, 1.0)


def init_candidates(k: int, domain: SearchDomain,
                    rng: np.random.Generator) -> list[HyperConfig]:
    """k configs drawn log-uniform (eta, q, clip) / uniform (sigma)."""
    if k < 2:
        raise ConfigError(f"need at least 2 initial candidates, got {k}")
    return [domain.from_unit(rng.random(4)) for _ in range(k)]


def _matern52(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray,
              signal_var: float) -> np.ndarray:
    """Matérn-5/2 kernel matrix with per-dimension lengthscales."""
    d = a[:, None, :] / lengthscales - b[None, :, :] / lengthscales
    r = np.sqrt(np.maximum((d * d).sum(axis=2), 0.0))
    s5r = math.sqrt(5.0) * r
    return signal_var * (1.0 + s5r + 5.0 * r * r / 3.0) * np.exp(-s5r)


@dataclass
class Surrogate:
    """GP posterior state over unit-cube points.

    The prior mean is the observation mean; `signal_var` is the kernel's
    amplitude. `alpha` and the Cholesky factor are cached at construction.
    """

    x: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    jitter: float = JITTER_START
    chol: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    y_mean: float = field(init=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        self.lengthscales = np.asarray(self.lengthscales, dtype=np.float64)
        self.y_mean = float(self.y.mean())
        kernel = _matern52(self.x, self.x, self.lengthscales, self.signal_var)
        jitter = self.jitter
        while True:
            try:
                self.chol = linalg.cholesky(
                    kernel + jitter * np.eye(len(self.y)), lower=True
                )
                break
            except linalg.LinAlgError:
                jitter *= 10.0
                if jitter > JITTER_MAX:
                    raise InfeasibleError(
                        f"kernel stayed singular up to jitter {JITTER_MAX}"
                    ) from None
        self.jitter = jitter
        resid = self.y - self.y_mean
        self.alpha = linalg.cho_solve((self.chol, True), resid)

    def posterior(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance at each query point (vectorized)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k_star = _matern52(pts, self.x, self.lengthscales, self.signal_var)
        mean = self.y_mean + k_star @ self.alpha
        v = linalg.solve_triangular(self.chol, k_star.T, lower=True)
        var = self.signal_var - (v * v).sum(axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        resid = self.y - self.y_mean
        return float(
            -0.5 * resid @ self.alpha
            - np.log(np.diag(self.chol)).sum()
            - 0.5 * len(self.y) * math.log(2.0 * math.pi)
        )


_LS_STARTS = (0.1, 0.25, 0.5, 1.0, 2.0)
_STEP_FACTORS = (0.5, 0.8, 1.25, 2.0)
_LS_BOUNDS = (0.02, 10.0)
_VAR_BOUNDS = (1e-6, 10.0)


def gp_fit(x, y) -> Surrogate:
    """Maximize log marginal likelihood by deterministic coordinate descent
    from five fixed starts; no randomness, so refits are reproducible."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise ConfigError(f"GP fit needs >= 2 observations, got {len(y)}")
    dims = x.shape[1]
    var0 = max(float(np.var(y)), 1e-4)

    best: Surrogate | None = None
    best_lml = -np.inf
    for ls0 in _LS_STARTS:
        params = np.array([ls0] * dims + [var0])
        current = Surrogate(x, y, params[:dims], params[dims])
        lml = current.log_marginal_likelihood()
        for _ in range(3):  # descent passes
            improved = False
            for pi in range(dims + 1):
                for factor in _STEP_FACTORS:
                    trial = params.copy()
                    trial[pi] *= factor
                    lo, hi = _LS_BOUNDS if pi < dims else _VAR_BOUNDS
                    trial[pi] = min(max(trial[pi], lo), hi)
                    if trial[pi] == params[pi]:
                        continue
                    cand = Surrogate(x, y, trial[:dims], trial[dims])
                    cand_lml = cand.log_marginal_likelihood()
                    if cand_lml > lml + 1e-10:
                        params, current, lml = trial, cand, cand_lml
                        improved = True
            if not improved:
                break
        if lml > best_lml:
            best, best_lml = current, lml
    return best


def gp_posterior(surrogate: Surrogate, point) -> tuple[float, float]:
    mean, var = surrogate.posterior(np.atleast_2d(point))
    return float(mean[0]), float(var[0])


def expected_improvement_values(mu, sigma_p, incumbent: float,
                                xi: float = XI_DEFAULT) -> np.ndarray:
    """EI = (mu - y* - xi) Phi(u) + sigma_p phi(u); the degenerate
    sigma_p = 0 case collapses to the positive-part improvement."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma_p = np.asarray(sigma_p, dtype=np.float64)
    gap = mu - incumbent - xi
    out = np.maximum(gap, 0.0)
    pos = sigma_p > 0
    if np.any(pos):
        u = gap[pos] / sigma_p[pos]
        out = out.copy()
        out[pos] = gap[pos] * special.ndtr(u) + sigma_p[pos] * np.exp(
            -0.5 * u * u
        ) / math.sqrt(2.0 * math.pi)
    return np.maximum(out, 0.0)


def expected_improvement(surrogate: Surrogate, point, incumbent: float,
                         xi: float = XI_DEFAULT) -> float:
    mean, var = surrogate.posterior(np.atleast_2d(point))
    return float(
        expected_improvement_values(mean, np.sqrt(var), incumbent, xi)[0]
    )


def _planned_costs(configs: list[HyperConfig], domain: SearchDomain,
                   plan: TrialPlan, delta: float) -> np.ndarray:
    qs = np.array([domain.sampling_rate(c) for c in configs])
    sigmas = np.array([c.sigma for c in configs])
    steps = np.array(
        [plan.steps_for(c.batch_size, domain.dataset_size) for c in configs]
    )
    return privacy_cost_integer_orders(qs, sigmas, steps, delta)


def planned_cost(config: HyperConfig, domain: SearchDomain, plan: TrialPlan,
                 delta: float) -> float:
    """Exact planned privacy cost of one trial (full order grid)."""
    dp = DPConfig(config.clip, config.sigma, domain.sampling_rate(config), delta)
    return privacy_cost(dp, plan.steps_for(config.batch_size, domain.dataset_size))


def propose_next(surrogate: Surrogate, domain: SearchDomain, eps_budget: float,
                 plan: TrialPlan, delta: float, rng: np.random.Generator,
                 incumbent: float, xi: float = XI_DEFAULT) -> HyperConfig:
    """Argmax-EI over a scrambled Sobol pool, feasible candidates only.

    Feasibility uses the integer-order cost bound, which can only
    over-estimate: nothing infeasible ever gets through.
    """
    sobol = qmc.Sobol(d=4, scramble=True, seed=int(rng.integers(2**31 - 1)))
    unit = sobol.random_base2(m=int(math.log2(CANDIDATE_POOL)))
    configs = [domain.from_unit(u) for u in unit]
    if math.isinf(eps_budget):
        feasible = np.ones(len(configs), dtype=bool)
    else:
        feasible = _planned_costs(configs, domain, plan, delta) <= eps_budget
    if not feasible.any():
        raise InfeasibleError(
            f"no candidate of {len(configs)} fits eps={eps_budget}; widen the "
            "sigma range or raise the budget"
        )
    idx = np.flatnonzero(feasible)
    mean, var = surrogate.posterior(unit[idx])
    ei = expected_improvement_values(mean, np.sqrt(var), incumbent, xi)
    return configs[int(idx[int(np.argmax(ei))])]


@dataclass(frozen=True)
class BORecord:
    trial: int
    config: HyperConfig
    eps_planned: float
    val_acc: float | None  # None = discarded without training
    feasible: bool


@dataclass
class BOResult:
    best: HyperConfig
    best_predicted: float
    best_observed: float
    trace: list[BORecord] = field(default_factory=list)


def write_bo_trace(path, trace: list[BORecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["iter", "eta", "B", "C", "sigma", "eps_planned", "val_acc", "feasible"]
        )
        for rec in trace:
            writer.writerow([
                rec.trial,
                f"{rec.config.eta:.8g}",
                rec.config.batch_size,
                f"{rec.config.clip:.8g}",
                f"{rec.config.sigma:.8g}",
                f"{rec.eps_planned:.6f}",
                "" if rec.val_acc is None else f"{rec.val_acc:.6f}",
                int(rec.feasible),
            ])


class DPTrialEvaluator:
    """Trains a genome's network under a candidate config and scores it.

    Each call materializes fresh weights from a per-trial seed (deterministic
    in call order), runs the trial plan's worth of DP-SGD, and returns
    validation accuracy. A diverged (non-finite) trial scores 0.
    """

    def __init__(self, genome: Genome, space: SpaceConfig, x_train, y_train,
                 x_val, y_val, plan: TrialPlan, seed: int = 0,
                 delta: float = 1e-5):
        self.genome = genome
        self.space = space
        self.x_train, self.y_train = x_train, y_train
        self.x_val, self.y_val = x_val, y_val
        self.plan = plan
        self.delta = delta
        self.seed = int(seed)
        self.calls = 0

    def __call__(self, config: HyperConfig) -> float:
        self.calls += 1
        rng = np.random.default_rng((self.seed, self.calls))
        model = materialize(self.genome, self.space, rng)
        n = len(self.x_train)
        dp = DPConfig(config.clip, config.sigma,
                      min(config.batch_size / n, 1.0), self.delta)
        steps = self.plan.steps_for(config.batch_size, n)
        try:
            train_dp_sgd(model.parts, self.x_train, self.y_train, dp,
                         eta=config.eta, batch_size=config.batch_size,
                         total_steps=steps, rng=rng)
            return float(evaluate_accuracy(model, self.x_val, self.y_val))
        except NonFiniteError:
            logger.warning("trial diverged (eta=%.3g): scored 0", config.eta)
            return 0.0


def run_bo(evaluate, domain: SearchDomain, eps_budget: float, *,
           plan: TrialPlan | None = None, delta: float = 1e-5, k_init: int = 5,
           n_iter: int = 30, rng: np.random.Generator | None = None,
           csv_path=None, xi: float = XI_DEFAULT) -> BOResult:
    """Full constrained-BO loop.

    Phase one draws random configs until k_init feasible ones have been
    trial-trained (infeasible draws are logged and discarded untouched);
    phase two runs n_iter propose/train/refit rounds. The answer is the
    evaluated config the surrogate scores highest, ties broken by observed
    accuracy.
    """
    plan = plan or TrialPlan()
    rng = rng if rng is not None else np.random.default_rng()
    if k_init < 2:
        raise ConfigError(f"k_init must be >= 2, got {k_init}")
    if n_iter < 0:
        raise ConfigError(f"n_iter must be >= 0, got {n_iter}")
    trace: list[BORecord] = []
    xs: list[np.ndarray] = []
    configs: list[HyperConfig] = []
    ys: list[float] = []
    trial = 0

    def observe(config: HyperConfig, eps_planned: float) -> None:
        nonlocal trial
        acc = float(evaluate(config))
        trace.append(BORecord(trial, config, eps_planned, acc, True))
        xs.append(domain.to_unit(config))
        configs.append(config)
        ys.append(acc)
        trial += 1

    attempts = 0
    max_attempts = max(200, 100 * k_init)
    while len(ys) < k_init:
        if attempts >= max_attempts:
            raise InfeasibleError(
                f"only {len(ys)} of {k_init} random draws were feasible after "
                f"{attempts} attempts; widen the sigma range or the budget"
            )
        attempts += 1
        cand = domain.from_unit(rng.random(4))
        cost = planned_cost(cand, domain, plan, delta)
        if cost <= eps_budget:
            observe(cand, cost)
        else:
            logger.info("draw %d over budget (%.3f > %.3f): discarded untrained",
                        trial, cost, eps_budget)
            trace.append(BORecord(trial, cand, cost, None, False))
            trial += 1

    for _ in range(n_iter):
        surrogate = gp_fit(np.array(xs), np.array(ys))
        incumbent = max(ys)
        cand = propose_next(surrogate, domain, eps_budget, plan, delta, rng,
                            incumbent, xi)
        observe(cand, planned_cost(cand, domain, plan, delta))

    surrogate = gp_fit(np.array(xs), np.array(ys))
    mean, _ = surrogate.posterior(np.array(xs))
    order = sorted(
        range(len(ys)), key=lambda i: (mean[i], ys[i]), reverse=True
    )
    best_i = order[0]
    result = BOResult(configs[best_i], float(mean[best_i]), max(ys), trace)
    if csv_path is not None:
        write_bo_trace(csv_path, trace)
    logger.info("BO done: best predicted %.4f (observed max %.4f)",
                result.best_predicted, result.best_observed)
    return result
