"""Constrained hyperparameter search tests.

The GP posterior is checked against a dense linear-algebra oracle written
independently here (scalar kernel loops + explicit matrix inverse), the
acquisition function against textbook normal-CDF closed forms, and the
privacy filter against full-accountant recomputation of every logged trial.
"""

import math
import os

import numpy as np
import pytest
from scipy.stats import norm

from fednaslab.errors import ConfigError, InfeasibleError
from fednaslab.hpo import (
    CANDIDATE_POOL,
    DESK_TRIAL_PLAN,
    JITTER_MAX,
    BORecord,
    DPTrialEvaluator,
    HyperConfig,
    SearchDomain,
    Surrogate,
    TrialPlan,
    expected_improvement,
    expected_improvement_values,
    gp_fit,
    gp_posterior,
    init_candidates,
    planned_cost,
    propose_next,
    run_bo,
    write_bo_trace,
)
from fednaslab.privacy import DPConfig, privacy_cost, privacy_cost_integer_orders
from fednaslab.space import SpaceConfig, sample_random_genome


def _matern_ref(a, b, lengthscales, signal_var):
    """Scalar-loop Matérn-5/2 matrix; independent of the package's
    broadcast implementation."""
    out = np.empty((len(a), len(b)))
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            r = math.sqrt(float(np.sum(((p - q) / lengthscales) ** 2)))
            out[i, j] = (
                signal_var
                * (1.0 + math.sqrt(5.0) * r + 5.0 * r * r / 3.0)
                * math.exp(-math.sqrt(5.0) * r)
            )
    return out


def _gp_ref_posterior(x, y, xq, lengthscales, signal_var, jitter):
    """Plain GP equations via explicit matrix inverse."""
    kernel = _matern_ref(x, x, lengthscales, signal_var) + jitter * np.eye(len(x))
    k_star = _matern_ref(xq, x, lengthscales, signal_var)
    inv = np.linalg.inv(kernel)
    mean = y.mean() + k_star @ inv @ (y - y.mean())
    var = signal_var - np.einsum("ij,jk,ik->i", k_star, inv, k_star)
    return mean, var


def _analytic_eps_full_batch(sigma, steps, delta):
    """q=1 Gaussian-mechanism cost, alpha optimized in closed form."""
    return steps / (2 * sigma**2) + math.sqrt(2 * math.log(1 / delta) * steps) / sigma


def _blob_data(rng, n, shape=(3, 8, 8)):
    """Two classes separated along per-channel DC components."""
    x = (rng.normal(size=(n,) + shape) * 0.1).astype(np.float32)
    y = rng.integers(0, 2, size=n)
    x[y == 1, 0] += 0.8
    x[y == 0, 1] += 0.8
    return x, y


def _centroid_oracle_accuracy(x_train, y_train, x_val, y_val):
    """Closed-form nearest-centroid classifier on flattened inputs."""
    flat_tr = x_train.reshape(len(x_train), -1).astype(np.float64)
    flat_va = x_val.reshape(len(x_val), -1).astype(np.float64)
    mu0 = flat_tr[y_train == 0].mean(axis=0)
    mu1 = flat_tr[y_train == 1].mean(axis=0)
    d0 = ((flat_va - mu0) ** 2).sum(axis=1)
    d1 = ((flat_va - mu1) ** 2).sum(axis=1)
    return ((d1 < d0).astype(int) == y_val).mean()


class TestHyperConfigAndDomain:
    def test_invalid_config_fields_rejected(self):
        with pytest.raises(ConfigError):
            HyperConfig(eta=0.0, batch_size=8, clip=1.0, sigma=1.0)
        with pytest.raises(ConfigError):
            HyperConfig(eta=0.01, batch_size=0, clip=1.0, sigma=1.0)
        with pytest.raises(ConfigError):
            HyperConfig(eta=0.01, batch_size=8, clip=0.0, sigma=1.0)
        with pytest.raises(ConfigError):
            HyperConfig(eta=0.01, batch_size=8, clip=1.0, sigma=-0.1)

    def test_invalid_domain_rejected(self):
        with pytest.raises(ConfigError):
            SearchDomain(dataset_size=0)
        with pytest.raises(ConfigError):
            SearchDomain(dataset_size=100, eta_range=(0.1, 0.01))
        with pytest.raises(ConfigError):
            SearchDomain(dataset_size=100, q_range=(0.1, 1.5))

    def test_unit_roundtrip(self):
        dom = SearchDomain(dataset_size=500)
        cfg = HyperConfig(eta=0.001, batch_size=500, clip=0.5, sigma=1.92)
        back = dom.from_unit(dom.to_unit(cfg))
        assert abs(back.eta - cfg.eta) / cfg.eta < 1e-9
        assert back.batch_size == cfg.batch_size
        assert abs(back.clip - cfg.clip) / cfg.clip < 1e-9
        assert abs(back.sigma - cfg.sigma) < 1e-9

    def test_batch_size_always_valid(self):
        dom = SearchDomain(dataset_size=37)
        rng = np.random.default_rng(0)
        for _ in range(300):
            cfg = dom.from_unit(rng.random(4))
            assert 1 <= cfg.batch_size <= 37
        assert dom.from_unit([0.0, 0.0, 0.0, 0.0]).batch_size >= 1
        assert dom.from_unit([1.0, 1.0, 1.0, 1.0]).batch_size == 37

    def test_eta_draws_are_log_uniform(self):
        dom = SearchDomain(dataset_size=500, eta_range=(1e-4, 1e-1))
        rng = np.random.default_rng(42)
        etas = np.array([c.eta for c in init_candidates(10_000, dom, rng)])
        geo_mean = math.sqrt(1e-4 * 1e-1)
        assert abs(np.median(etas) - geo_mean) / geo_mean < 0.10
        assert etas.min() >= 1e-4 and etas.max() <= 1e-1

    def test_init_candidates_reproducible(self):
        dom = SearchDomain(dataset_size=200)
        a = init_candidates(5, dom, np.random.default_rng(9))
        b = init_candidates(5, dom, np.random.default_rng(9))
        assert a == b
        with pytest.raises(ConfigError):
            init_candidates(1, dom, np.random.default_rng(0))

    def test_trial_plan_steps(self):
        plan = TrialPlan(epochs=3)
        assert plan.steps_for(batch_size=500, dataset_size=500) == 3
        assert plan.steps_for(batch_size=50, dataset_size=500) == 30
        assert plan.steps_for(batch_size=900, dataset_size=500) == 3  # >= 1/epoch
        with pytest.raises(ConfigError):
            TrialPlan(epochs=0)


class TestSurrogatePosterior:
    def test_three_point_dense_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.random((3, 4))
        y = np.array([0.2, 0.8, 0.5])
        ls = np.array([0.4, 0.7, 1.0, 1.3])
        sur = Surrogate(x, y, ls, signal_var=1.3)
        xq = rng.random((6, 4))
        mu_ref, var_ref = _gp_ref_posterior(x, y, xq, ls, 1.3, sur.jitter)
        mu, var = sur.posterior(xq)
        assert np.abs(mu - mu_ref).max() < 1e-8
        assert np.abs(var - var_ref).max() < 1e-8

    def test_two_point_hand_formula(self):
        # lengthscale 1, variance 1: K and its inverse written out by hand.
        x = np.array([[0.2, 0.0, 0.0, 0.0], [0.8, 0.0, 0.0, 0.0]])
        y = np.array([0.3, 0.9])
        sur = Surrogate(x, y, np.ones(4), signal_var=1.0)
        xq = np.array([[0.5, 0.0, 0.0, 0.0]])

        def k(r):
            return (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)

        j = sur.jitter
        k12 = k(0.6)
        det = (1 + j) ** 2 - k12**2
        inv = np.array([[1 + j, -k12], [-k12, 1 + j]]) / det
        ks = np.array([k(0.3), k(0.3)])
        mu_hand = y.mean() + ks @ inv @ (y - y.mean())
        var_hand = 1.0 - ks @ inv @ ks
        mu, var = sur.posterior(xq)
        assert abs(mu[0] - mu_hand) < 1e-8
        assert abs(var[0] - var_hand) < 1e-8

    def test_interpolates_observations(self):
        rng = np.random.default_rng(2)
        x = rng.random((7, 4))
        y = rng.random(7)
        sur = Surrogate(x, y, np.full(4, 0.5), signal_var=1.0)
        mu, var = sur.posterior(x)
        assert np.abs(mu - y).max() <= 1e-3
        assert var.max() <= 1e-3

    def test_far_query_reverts_to_prior(self):
        rng = np.random.default_rng(3)
        x = rng.random((5, 4))
        y = rng.random(5)
        sur = Surrogate(x, y, np.ones(4), signal_var=0.7)
        mu, var = sur.posterior(np.full((1, 4), 30.0))  # dozens of lengthscales out
        assert abs(mu[0] - y.mean()) <= 1e-3
        assert abs(var[0] - 0.7) <= 1e-3

    def test_duplicate_points_absorbed_by_jitter(self):
        x = np.vstack([np.full((4, 4), 0.5), np.full((4, 4), 0.25)])
        y = np.array([0.4, 0.4, 0.4, 0.4, 0.7, 0.7, 0.7, 0.7])
        sur = Surrogate(x, y, np.ones(4), signal_var=1.0)
        assert sur.jitter <= JITTER_MAX
        mu, var = sur.posterior(np.array([[0.5, 0.5, 0.5, 0.5]]))
        assert abs(mu[0] - 0.4) < 1e-2
        assert np.all(var >= 0.0)

    def test_variance_never_negative(self):
        rng = np.random.default_rng(4)
        x = rng.random((20, 4))
        y = rng.random(20)
        sur = Surrogate(x, y, np.full(4, 0.2), signal_var=2.0)
        _, var = sur.posterior(rng.random((200, 4)))
        assert np.all(var >= 0.0)


class TestGPFit:
    def test_fit_is_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.random((10, 4))
        y = np.sin(4 * x[:, 0]) * 0.4 + 0.5
        a = gp_fit(x, y)
        b = gp_fit(x, y)
        assert np.array_equal(a.lengthscales, b.lengthscales)
        assert a.signal_var == b.signal_var
        assert a.log_marginal_likelihood() == b.log_marginal_likelihood()

    def test_fit_not_worse_than_fixed_start(self):
        rng = np.random.default_rng(6)
        x = rng.random((12, 4))
        y = x[:, 0] ** 2 + 0.1 * x[:, 1]
        fitted = gp_fit(x, y)
        naive = Surrogate(x, y, np.ones(4), signal_var=max(float(np.var(y)), 1e-4))
        assert fitted.log_marginal_likelihood() >= naive.log_marginal_likelihood()

    def test_needs_two_observations(self):
        with pytest.raises(ConfigError):
            gp_fit(np.array([[0.5, 0.5, 0.5, 0.5]]), np.array([0.5]))

    def test_fitted_surrogate_interpolates(self):
        rng = np.random.default_rng(7)
        x = rng.random((9, 4))
        y = 0.3 + 0.4 * x[:, 2]
        sur = gp_fit(x, y)
        mean, var = gp_posterior(sur, x[4])
        assert abs(mean - y[4]) <= 1e-3
        assert var <= 1e-3


class TestExpectedImprovement:
    def test_value_at_incumbent_with_unit_sigma(self):
        # mu = y*, sigma = 1, xi = 0: EI collapses to the standard normal
        # density at zero.
        val = expected_improvement_values(
            np.array([0.5]), np.array([1.0]), 0.5, xi=0.0
        )[0]
        assert abs(val - 0.39894) < 1e-4
        assert abs(val - norm.pdf(0.0)) < 1e-12

    def test_degenerate_sigma_positive_part(self):
        vals = expected_improvement_values(
            np.array([0.8, 0.2]), np.array([0.0, 0.0]), 0.5, xi=0.0
        )
        assert vals[0] == pytest.approx(0.3, abs=1e-15)
        assert vals[1] == 0.0

    def test_hand_value_against_normal_oracle(self):
        # mu=1, sigma=2, y*=0, xi=0 -> u=0.5 -> EI = Phi(.5) + 2 phi(.5)
        val = expected_improvement_values(
            np.array([1.0]), np.array([2.0]), 0.0, xi=0.0
        )[0]
        assert abs(val - (norm.cdf(0.5) + 2 * norm.pdf(0.5))) < 1e-12

    def test_xi_shifts_the_threshold(self):
        lo = expected_improvement_values(np.array([0.5]), np.array([1.0]), 0.5, xi=0.5)[0]
        hi = expected_improvement_values(np.array([0.5]), np.array([1.0]), 0.5, xi=0.0)[0]
        assert lo < hi

    def test_near_zero_at_noiseless_incumbent(self):
        rng = np.random.default_rng(8)
        x = rng.random((6, 4))
        y = rng.random(6)
        sur = gp_fit(x, y)
        best = int(np.argmax(y))
        ei = expected_improvement(sur, x[best], float(y[best]))
        assert 0.0 <= ei <= 1e-6

    def test_monotone_in_mu(self):
        mus = np.linspace(-1.0, 2.0, 50)
        ei = expected_improvement_values(mus, np.full(50, 0.7), 0.3, xi=0.01)
        assert np.all(np.diff(ei) >= -1e-12)

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(9)
        ei = expected_improvement_values(
            rng.normal(size=500), np.abs(rng.normal(size=500)), 0.2
        )
        assert np.all(ei >= 0.0)


class TestPlannedCostFilter:
    def test_integer_grid_upper_bounds_full_accountant(self):
        rng = np.random.default_rng(10)
        qs = rng.uniform(0.02, 1.0, 25)
        sigmas = rng.uniform(0.5, 4.0, 25)
        steps = rng.integers(1, 150, 25)
        fast = privacy_cost_integer_orders(qs, sigmas, steps, 1e-5)
        for i in range(25):
            exact = privacy_cost(DPConfig(1.0, sigmas[i], qs[i], 1e-5), int(steps[i]))
            assert fast[i] >= exact - 1e-9

    def test_full_batch_closed_form(self):
        sig, steps, delta = 1.92, 3, 1e-5
        got = privacy_cost_integer_orders(
            np.array([1.0]), np.array([sig]), np.array([steps]), delta
        )[0]
        alphas = np.arange(2, 65, dtype=np.float64)
        want = np.min(steps * alphas / (2 * sig**2) + np.log(1 / delta) / (alphas - 1))
        assert abs(got - want) < 1e-12

    def test_edge_cases(self):
        zero = privacy_cost_integer_orders(
            np.array([0.5]), np.array([1.0]), np.array([0]), 1e-5
        )
        assert zero[0] == 0.0
        noiseless = privacy_cost_integer_orders(
            np.array([0.5]), np.array([0.0]), np.array([10]), 1e-5
        )
        assert math.isinf(noiseless[0])

    def test_reference_full_batch_config_fits_eps_5(self):
        # eta 0.0010, sigma 1.92, clip 0.50, sampling rate 1.00 must clear an
        # eps = 5 budget at delta = 1e-5 under the desk trial plan.
        dom = SearchDomain(dataset_size=500)
        cfg = HyperConfig(eta=0.0010, batch_size=500, clip=0.50, sigma=1.92)
        cost = planned_cost(cfg, dom, DESK_TRIAL_PLAN, 1e-5)
        analytic = _analytic_eps_full_batch(1.92, 3, 1e-5)
        assert cost <= 5.0
        # accountant sits at the closed-form optimum (never below it)
        assert analytic * (1 - 1e-12) <= cost <= analytic * 1.01
        qs = np.array([1.0])
        fast = privacy_cost_integer_orders(qs, np.array([1.92]), np.array([3]), 1e-5)
        assert fast[0] <= 5.0  # the pre-training filter admits it too


class TestProposeNext:
    def _fitted(self, dom, rng):
        xs = np.array([dom.to_unit(dom.from_unit(rng.random(4))) for _ in range(6)])
        ys = rng.random(6)
        return gp_fit(xs, ys), float(ys.max())

    def test_infinite_budget_returns_in_domain_config(self):
        dom = SearchDomain(dataset_size=300)
        rng = np.random.default_rng(11)
        sur, inc = self._fitted(dom, rng)
        cfg = propose_next(sur, dom, math.inf, TrialPlan(3), 1e-5, rng, inc)
        assert dom.eta_range[0] <= cfg.eta <= dom.eta_range[1]
        assert 1 <= cfg.batch_size <= 300
        assert dom.sigma_range[0] <= cfg.sigma <= dom.sigma_range[1]

    def test_forced_infeasibility_raises_with_advice(self):
        dom = SearchDomain(dataset_size=300, sigma_range=(0.5, 0.6))
        rng = np.random.default_rng(12)
        sur, inc = self._fitted(dom, rng)
        with pytest.raises(InfeasibleError, match="sigma range|budget"):
            propose_next(sur, dom, 1e-3, TrialPlan(3), 1e-5, rng, inc)

    def test_admitted_configs_reverified_by_full_accountant(self):
        dom = SearchDomain(dataset_size=500)
        budget = 2.0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            sur, inc = self._fitted(dom, rng)
            cfg = propose_next(sur, dom, budget, DESK_TRIAL_PLAN, 1e-5, rng, inc)
            assert planned_cost(cfg, dom, DESK_TRIAL_PLAN, 1e-5) <= budget


class TestRunBO:
    def test_quadratic_bowl_finds_optimum(self):
        # Known-optimum objective on the unit cube; 18 of 20 seeds must land
        # within 5% of the peak value.
        dom = SearchDomain(dataset_size=500)
        target = np.array([0.3, 0.7, 0.5, 0.2])

        def bowl(cfg):
            u = dom.to_unit(cfg)
            return float(1.0 - np.sum((u - target) ** 2))

        wins = 0
        for seed in range(20):
            res = run_bo(bowl, dom, math.inf, plan=TrialPlan(3), k_init=5,
                         n_iter=30, rng=np.random.default_rng(seed))
            wins += bowl(res.best) >= 0.95
        assert wins >= 18

    def test_best_observed_never_decreases(self):
        dom = SearchDomain(dataset_size=500)

        def objective(cfg):
            return 1.0 / (1.0 + abs(math.log10(cfg.eta) + 2.5))

        res = run_bo(objective, dom, math.inf, plan=TrialPlan(3), k_init=4,
                     n_iter=8, rng=np.random.default_rng(21))
        accs = [r.val_acc for r in res.trace if r.val_acc is not None]
        running = np.maximum.accumulate(accs)
        assert np.array_equal(running, np.maximum.accumulate(running))
        assert res.best_observed == max(accs)

    def test_zero_iterations_uses_init_phase_only(self):
        dom = SearchDomain(dataset_size=500)
        res = run_bo(lambda c: c.eta, dom, math.inf, plan=TrialPlan(3),
                     k_init=3, n_iter=0, rng=np.random.default_rng(13))
        assert len(res.trace) == 3
        assert res.best in [r.config for r in res.trace]

    def test_invalid_loop_parameters(self):
        dom = SearchDomain(dataset_size=100)
        with pytest.raises(ConfigError):
            run_bo(lambda c: 0.5, dom, math.inf, k_init=1,
                   rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            run_bo(lambda c: 0.5, dom, math.inf, n_iter=-1,
                   rng=np.random.default_rng(0))

    def test_budget_audit_every_trained_trial_fits(self):
        # Recompute every logged cost from the raw hyperparameters: trained
        # rows must fit the budget, discarded rows must exceed it.
        dom = SearchDomain(dataset_size=400)
        budget = 2.5
        res = run_bo(lambda c: min(1.0, 10 * c.eta), dom, budget,
                     plan=DESK_TRIAL_PLAN, k_init=4, n_iter=4,
                     rng=np.random.default_rng(14))
        trained = discarded = 0
        for rec in res.trace:
            cost = planned_cost(rec.config, dom, DESK_TRIAL_PLAN, 1e-5)
            assert abs(cost - rec.eps_planned) < 1e-9
            if rec.val_acc is not None:
                assert rec.feasible and cost <= budget
                trained += 1
            else:
                assert not rec.feasible and cost > budget
                discarded += 1
        assert trained == 8
        assert discarded >= 1  # the budget actually bit during random init
        best_cost = planned_cost(res.best, dom, DESK_TRIAL_PLAN, 1e-5)
        assert best_cost <= budget

    def test_no_feasible_draws_raises(self):
        dom = SearchDomain(dataset_size=400)
        with pytest.raises(InfeasibleError, match="sigma range|budget"):
            run_bo(lambda c: 0.5, dom, 1e-4, plan=DESK_TRIAL_PLAN, k_init=2,
                   n_iter=0, rng=np.random.default_rng(15))

    def test_trace_csv_schema_and_reproducibility(self, tmp_path):
        dom = SearchDomain(dataset_size=400)
        paths = []
        for run in range(2):
            path = tmp_path / f"bo_{run}.csv"
            run_bo(lambda c: min(1.0, 5 * c.eta), dom, 3.0,
                   plan=DESK_TRIAL_PLAN, k_init=3, n_iter=2,
                   rng=np.random.default_rng(16), csv_path=path)
            paths.append(path)
        first, second = (p.read_bytes() for p in paths)
        assert first == second
        lines = first.decode().strip().split("\n")
        assert lines[0] == "iter,eta,B,C,sigma,eps_planned,val_acc,feasible"
        for line in lines[1:]:
            fields = line.split(",")
            assert len(fields) == 8
            assert fields[7] in ("0", "1")
            if fields[7] == "0":
                assert fields[6] == ""  # discarded rows carry no accuracy


class TestDPTrialEvaluator:
    SMALL = SpaceConfig(
        input_shape=(3, 8, 8), d_rep=16, num_classes=2, min_len=3, max_len=4
    )

    def _data(self, seed=17):
        rng = np.random.default_rng(seed)
        x_tr, y_tr = _blob_data(rng, 240)
        x_va, y_va = _blob_data(rng, 100)
        assert _centroid_oracle_accuracy(x_tr, y_tr, x_va, y_va) >= 0.99
        return x_tr, y_tr, x_va, y_va

    def test_learns_separable_blobs_without_noise(self):
        x_tr, y_tr, x_va, y_va = self._data()
        genome = sample_random_genome(self.SMALL, np.random.default_rng(3))
        ev = DPTrialEvaluator(genome, self.SMALL, x_tr, y_tr, x_va, y_va,
                              TrialPlan(epochs=5), seed=1)
        acc = ev(HyperConfig(eta=0.1, batch_size=32, clip=10.0, sigma=0.0))
        assert acc >= 0.9

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_trial_scores_zero(self):
        x_tr, y_tr, x_va, y_va = self._data(18)
        genome = sample_random_genome(self.SMALL, np.random.default_rng(3))
        ev = DPTrialEvaluator(genome, self.SMALL, x_tr, y_tr, x_va, y_va,
                              TrialPlan(epochs=2), seed=1)
        acc = ev(HyperConfig(eta=1e12, batch_size=64, clip=100.0, sigma=0.0))
        assert acc == 0.0

    def test_deterministic_in_call_order(self):
        x_tr, y_tr, x_va, y_va = self._data(19)
        genome = sample_random_genome(self.SMALL, np.random.default_rng(4))
        cfgs = [
            HyperConfig(eta=0.05, batch_size=40, clip=5.0, sigma=0.5),
            HyperConfig(eta=0.02, batch_size=60, clip=2.0, sigma=1.0),
        ]
        runs = []
        for _ in range(2):
            ev = DPTrialEvaluator(genome, self.SMALL, x_tr, y_tr, x_va, y_va,
                                  TrialPlan(epochs=1), seed=7)
            runs.append([ev(c) for c in cfgs])
        assert runs[0] == runs[1]
        assert ev.calls == 2


class TestTraceWriter:
    def test_rows_match_records(self, tmp_path):
        recs = [
            BORecord(0, HyperConfig(0.01, 32, 1.0, 2.0), 1.25, 0.75, True),
            BORecord(1, HyperConfig(0.10, 64, 0.5, 0.6), 9.00, None, False),
        ]
        path = tmp_path / "trace.csv"
        write_bo_trace(path, recs)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "iter,eta,B,C,sigma,eps_planned,val_acc,feasible"
        assert lines[1] == "0,0.01,32,1,2,1.250000,0.750000,1"
        assert lines[2] == "1,0.1,64,0.5,0.6,9.000000,,0"
