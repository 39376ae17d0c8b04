from __future__ import annotations

import numpy as np
import pytest
from scipy import optimize, stats

from jini.crn import RngStream, make_bank
from jini.errors import InvalidArgument, NumericFailure
from jini.estimators import (
    FitConfig,
    benchmark_fit,
    censored_negbin_loglik,
    censored_poisson_loglik,
    fit_censored_negbin_mle,
    fit_censored_poisson_mle,
    fit_logistic_batch,
    fit_logistic_mle,
    fit_negbin_batch,
    fit_negbin_mle,
    fit_poisson_mle,
    initial_fitter,
    logistic_loglik,
    negbin_loglik,
    poisson_loglik,
)
from jini.models import Dataset, DesignMatrix, Family, ModelSpec, gen_design, simulate_responses
from oracles import LIKELIHOODS, gradient_mismatch


def ones(n):
    return DesignMatrix(np.ones((n, 1)))


def nb_theta(p, head=(1.5, 2.5, -2.5), alpha=0.6):
    beta = np.zeros(p)
    beta[: len(head)] = head
    return np.append(beta, alpha) if alpha is not None else beta


@pytest.mark.parametrize("name", LIKELIHOODS)
def test_gradient_matches_finite_differences(name):
    assert gradient_mismatch(name) <= 1e-5


class TestLoglikValues:
    def test_poisson_matches_scipy(self):
        X = np.column_stack([np.ones(4), [0.0, 1.0, -1.0, 0.5]])
        y = np.array([0, 3, 1, 2])
        beta = np.array([0.3, -0.2])
        want = stats.poisson.logpmf(y, np.exp(X @ beta)).sum()
        assert poisson_loglik(X, y, beta)[0] == pytest.approx(want, rel=1e-13)

    def test_negbin_matches_scipy(self):
        X = np.column_stack([np.ones(5), [0.0, 1.0, -1.0, 0.5, 2.0]])
        y = np.array([0, 3, 1, 200, 17])
        beta, alpha = np.array([0.3, 1.2]), 0.6
        mu = np.exp(X @ beta)
        want = stats.nbinom.logpmf(y, 1 / alpha, 1 / (1 + alpha * mu)).sum()
        assert negbin_loglik(X, y, np.append(beta, alpha))[0] == pytest.approx(want, rel=1e-12)

    def test_censored_negbin_tail_matches_scipy(self):
        X = np.ones((3, 1))
        y = np.array([1, 4, 4])
        theta = np.array([1.0, 0.7])
        mu = np.e
        nb = stats.nbinom(1 / 0.7, 1 / (1 + 0.7 * mu))
        want = nb.logpmf(1) + 2 * nb.logsf(3)
        assert censored_negbin_loglik(X, y, theta, 4)[0] == pytest.approx(want, rel=1e-10)

    def test_censored_poisson_underflow(self):
        X = np.ones((2, 1))
        with pytest.raises(NumericFailure) as info:
            censored_poisson_loglik(X, np.array([0, 400]), np.array([-20.0]), 400)
        assert info.value.index == 1


class TestClosedForms:
    def test_logistic(self):
        assert fit_logistic_mle(Dataset(ones(4), [0, 1, 0, 1], kind="binary")).params[0] == pytest.approx(0.0, abs=1e-10)
        fit = fit_logistic_mle(Dataset(ones(4), [1, 1, 1, 0], kind="binary"))
        assert fit.converged
        assert fit.params[0] == pytest.approx(np.log(3.0), abs=1e-10)

    def test_poisson(self):
        fit = fit_poisson_mle(Dataset(ones(2), [2, 4]))
        assert fit.converged
        assert fit.params[0] == pytest.approx(np.log(3.0), abs=1e-10)

    def test_negbin_mean_is_sample_mean(self):
        fit = fit_negbin_mle(Dataset(ones(2), [2, 4]))
        assert fit.params[0] == pytest.approx(np.log(3.0), abs=1e-8)

    def test_negbin_mean_with_interior_alpha(self):
        y = [0, 1, 9, 2, 0, 14, 3]
        fit = fit_negbin_mle(Dataset(ones(7), y))
        assert fit.converged
        assert fit.params[0] == pytest.approx(np.log(np.mean(y)), abs=1e-8)
        # profile likelihood in alpha, maximized independently
        prof = optimize.minimize_scalar(
            lambda a: -stats.nbinom.logpmf(y, 1 / a, 1 / (1 + a * np.mean(y))).sum(),
            bounds=(1e-3, 50), method="bounded", options={"xatol": 1e-10},
        )
        assert fit.params[1] == pytest.approx(prof.x, rel=1e-5)

    def test_censored_poisson_closed_form(self):
        # 2 log(1 - e^-lam) - lam is maximized at lam = log 3
        fit = fit_censored_poisson_mle(Dataset(ones(3), [1, 1, 0], censor_at=1))
        assert fit.converged
        assert fit.params[0] == pytest.approx(np.log(np.log(3.0)), abs=1e-8)
        grid = np.linspace(0.5, 2.0, 150_001)
        best = grid[np.argmax(2 * np.log1p(-np.exp(-grid)) - grid)]
        assert np.exp(fit.params[0]) == pytest.approx(best, abs=2e-5)


class TestEdges:
    @pytest.mark.parametrize("y,edge", [([1, 1, 1], 50.0), ([0, 0, 0], -50.0)])
    def test_separation(self, y, edge):
        fit = fit_logistic_mle(Dataset(ones(3), y, kind="binary"))
        assert not fit.converged
        assert fit.params[0] == edge

    def test_poisson_all_zero(self):
        fit = fit_poisson_mle(Dataset(ones(3), [0, 0, 0]))
        assert not fit.converged
        assert fit.params[0] == -50.0

    def test_negbin_alpha_pinned_on_poisson_data(self):
        design = gen_design("nb-style", 500, 3, RngStream(1))
        model = ModelSpec(Family.POISSON, design)
        y = simulate_responses(model, [1.0, 0.3, -0.5], make_bank(2, 1, 500).u)[0]
        fit = fit_negbin_mle(Dataset(design, y))
        assert fit.converged
        assert fit.params[-1] == 1e-4
        assert "lower box edge" in fit.note

    def test_converged_fits_satisfy_first_order_condition(self):
        design = gen_design("nb-style", 200, 5, RngStream(3))
        model = ModelSpec(Family.POISSON, design)
        cfg = FitConfig()
        Y = simulate_responses(model, [1.0, 0.5, -0.5, 0.0, 0.0], make_bank(4, 20, 200).u)
        for y in Y:
            fit = fit_poisson_mle(Dataset(design, y), cfg)
            assert fit.converged
            _, g = poisson_loglik(design.x, y, fit.params)
            assert np.linalg.norm(g) / 200 <= cfg.grad_tol

    def test_fit_is_local_maximum(self):
        design = gen_design("nb-style", 100, 6, RngStream(5))
        model = ModelSpec(Family.NEGBIN, design)
        y = simulate_responses(model, nb_theta(6), make_bank(6, 1, 100).u)[0]
        fit = fit_negbin_mle(Dataset(design, y))
        ll = negbin_loglik(design.x, y, fit.params)[0]
        assert fit.loglik == pytest.approx(ll, rel=1e-12)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert negbin_loglik(design.x, y, fit.params + rng.normal(0, 1e-3, 7))[0] <= ll

    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidArgument):
            fit_logistic_batch(np.ones((0, 1)), np.ones((1, 0)))


class TestNesting:
    def test_censored_poisson_without_censoring(self):
        design = gen_design("nb-style", 80, 4, RngStream(7))
        model = ModelSpec(Family.POISSON, design)
        y = simulate_responses(model, [0.5, 0.3, -0.4, 0.0], make_bank(8, 1, 80).u)[0]
        C = int(y.max()) + 1
        plain = fit_poisson_mle(Dataset(design, y))
        cens = fit_censored_poisson_mle(Dataset(design, y, censor_at=C))
        assert np.max(np.abs(plain.params - cens.params)) <= 1e-8

    def test_censored_negbin_without_censoring(self):
        design = gen_design("nb-style", 100, 5, RngStream(9))
        model = ModelSpec(Family.NEGBIN, design)
        y = simulate_responses(model, nb_theta(5), make_bank(10, 1, 100).u)[0]
        C = int(y.max()) + 1
        plain = fit_negbin_mle(Dataset(design, y))
        cens = fit_censored_negbin_mle(Dataset(design, y, censor_at=C))
        assert np.max(np.abs(plain.params - cens.params)) <= 1e-6

    def test_single_censored_observation(self):
        fit = fit_censored_negbin_mle(Dataset(ones(4), [2, 5, 1, 200], censor_at=200))
        assert np.all(np.isfinite(fit.params))
        X = np.ones((1, 1))
        tail = censored_negbin_loglik(X, np.array([200]), fit.params, 200)[0]
        assert tail < 0


class TestConsistency:
    def test_negbin_large_n(self):
        n = 100_000
        design = gen_design("nb-style", n, 20, RngStream(0))
        model = ModelSpec(Family.NEGBIN, design)
        theta = nb_theta(20)
        fit = fit_negbin_mle(Dataset(design, simulate_responses(model, theta, make_bank(0, 1, n).u)[0]))
        assert fit.converged
        assert np.all(np.abs(fit.params[:3] - theta[:3]) <= 0.02)
        assert abs(fit.params[-1] - 0.6) <= 0.05

    def test_censored_poisson_large_n(self):
        n = 10_000
        design = gen_design("nb-style", n, 50, RngStream(1))
        model = ModelSpec(Family.POISSON_CENSORED, design, censor_at=5)
        theta = nb_theta(50, head=(0.5, 0.8, -0.4), alpha=None)
        y = simulate_responses(model, theta, make_bank(1, 1, n).u)[0]
        fit = benchmark_fit(model, y)
        assert fit.converged
        assert np.all(np.abs(fit.params[:3] - theta[:3]) <= 0.05)

    def test_censored_negbin_large_n(self):
        n = 10_000
        design = gen_design("nb-style", n, 20, RngStream(2))
        model = ModelSpec(Family.NEGBIN_CENSORED, design, censor_at=30)
        theta = nb_theta(20)
        y = simulate_responses(model, theta, make_bank(2, 1, n).u)[0]
        assert 0.05 < np.mean(y == 30) < 0.2
        fit = benchmark_fit(model, y)
        assert fit.converged
        assert np.all(np.abs(fit.params[:3] - theta[:3]) <= 0.1)
        assert abs(fit.params[-1] - 0.6) <= 0.1


class TestBatch:
    def test_batch_equals_single(self):
        design = gen_design("nb-style", 60, 4, RngStream(11))
        model = ModelSpec(Family.NEGBIN, design)
        Y = simulate_responses(model, nb_theta(4), make_bank(12, 6, 60).u)
        fitter = initial_fitter(Family.NEGBIN)
        batch = fitter(model, Y)
        for h in range(6):
            single = fitter.fit(model, Y[h])
            assert np.allclose(batch.params[h], single.params, atol=1e-10)

    def test_warm_start_reaches_same_optimum(self):
        design = gen_design("nb-style", 60, 4, RngStream(13))
        model = ModelSpec(Family.NEGBIN, design)
        Y = simulate_responses(model, nb_theta(4), make_bank(14, 4, 60).u)
        cold = fit_negbin_batch(design.x, Y)
        start = cold.params + 0.05
        warm = fit_negbin_batch(design.x, Y, start=start)
        assert np.allclose(cold.params, warm.params, atol=1e-6)

    def test_misclassified_has_no_benchmark(self):
        from jini.models import MisclassLatents

        lat = MisclassLatents(np.zeros(3), np.zeros(3))
        model = ModelSpec(Family.LOGISTIC_MISCLASSIFIED, ones(3), misclass=lat)
        with pytest.raises(InvalidArgument):
            benchmark_fit(model, [0, 1, 0])
