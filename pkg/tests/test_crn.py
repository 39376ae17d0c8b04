from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jini.crn import (
    RngStream,
    bernoulli_q,
    bernoulli_q_matrix,
    make_bank,
    negbin_q,
    negbin_q_matrix,
    poisson_q,
    poisson_q_matrix,
    uniform_at,
)
from jini.errors import InvalidArgument, SimulationOverflow
from oracles import oracle_negbin, oracle_poisson, quantile_grid


class TestStreams:
    def test_same_seed_same_draws(self):
        a = RngStream(42).uniform(10)
        b = RngStream(42).uniform(10)
        assert np.array_equal(a, b)

    def test_substream_independent_of_parent_position(self):
        s = RngStream(7)
        first = s.substream(3).uniform(5)
        s.uniform(1000)
        assert np.array_equal(first, s.substream(3).uniform(5))

    def test_substreams_differ(self):
        s = RngStream(7)
        assert not np.array_equal(s.substream(0).uniform(5), s.substream(1).uniform(5))

    def test_counter_advances(self):
        s = RngStream(1)
        assert s.counter == 0
        s.uniform(8)
        assert s.counter == 2

    def test_uniforms_strictly_inside_unit_interval(self):
        u = RngStream(3).uniform(100_000)
        assert u.min() > 0.0 and u.max() < 1.0

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_out_of_range(self, seed):
        with pytest.raises(InvalidArgument):
            RngStream(seed)


class TestBank:
    def test_shape_and_readonly(self):
        bank = make_bank(5, 4, 3)
        assert bank.u.shape == (4, 3)
        with pytest.raises(ValueError):
            bank.u[0, 0] = 0.5

    def test_deterministic(self):
        assert np.array_equal(make_bank(9, 6, 7).u, make_bank(9, 6, 7).u)
        assert not np.array_equal(make_bank(9, 6, 7).u, make_bank(10, 6, 7).u)

    def test_uniform_at_matches_bank(self):
        bank = make_bank(123, 5, 7)
        for h in range(5):
            for i in range(7):
                assert uniform_at(123, h, i, 7) == bank.u[h, i]

    def test_prefix_rows_stable_in_H(self):
        # growing H only appends rows
        assert np.array_equal(make_bank(4, 3, 10).u, make_bank(4, 8, 10).u[:3])

    def test_row_bounds(self):
        bank = make_bank(1, 2, 2)
        with pytest.raises(InvalidArgument):
            bank.row(2)


class TestQuantiles:
    def test_bernoulli(self):
        assert bernoulli_q(0.3, 0.5) == 1
        assert bernoulli_q(0.5, 0.5) == 0
        assert bernoulli_q(0.7, 0.5) == 0

    def test_poisson_small_cases(self):
        # P(Y=0) = exp(-1) = 0.3679
        assert poisson_q(0.36, 1.0) == 0
        assert poisson_q(0.37, 1.0) == 1
        assert poisson_q(0.5, 0.0) == 0

    def test_negbin_geometric_case(self):
        # alpha = 1: geometric with success prob 1/(1+mu); mu = 1 gives P(Y <= k) = 1 - 2^-(k+1)
        assert negbin_q(0.49, 1.0, 1.0) == 0
        assert negbin_q(0.51, 1.0, 1.0) == 1
        assert negbin_q(0.74, 1.0, 1.0) == 1
        assert negbin_q(0.76, 1.0, 1.0) == 2

    def test_poisson_grid_matches_oracle(self):
        mean, _, u = quantile_grid()
        got = [poisson_q(ui, m) for ui, m in zip(u, mean)]
        want = [oracle_poisson(ui, m) for ui, m in zip(u, mean)]
        assert got == want

    def test_negbin_grid_matches_oracle(self):
        mean, alpha, u = quantile_grid()
        got = [negbin_q(ui, m, a) for ui, m, a in zip(u, mean, alpha)]
        want = [oracle_negbin(ui, m, a) for ui, m, a in zip(u, mean, alpha)]
        assert got == want

    def test_matrix_versions_agree_with_scalar(self):
        mean, alpha, _ = quantile_grid(n=20, seed=2)
        u = make_bank(0, 5, 20).u
        P = poisson_q_matrix(u, mean)
        N = negbin_q_matrix(u, mean, 0.7)
        B = bernoulli_q_matrix(u, mean / (1 + mean))
        for h in range(5):
            for i in range(20):
                assert P[h, i] == poisson_q(u[h, i], mean[i])
                assert N[h, i] == negbin_q(u[h, i], mean[i], 0.7)
                assert B[h, i] == bernoulli_q(u[h, i], mean[i] / (1 + mean[i]))

    def test_support_cap_overflow(self):
        with pytest.raises(SimulationOverflow):
            poisson_q(0.5, 1e9)
        with pytest.raises(SimulationOverflow) as info:
            poisson_q_matrix(np.full((1, 3), 0.5), np.array([1.0, 2.0, 1e9]))
        assert info.value.index == 2

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1])
    def test_u_outside_open_interval(self, u):
        with pytest.raises(InvalidArgument):
            poisson_q(u, 1.0)

    def test_invalid_parameters(self):
        with pytest.raises(InvalidArgument):
            negbin_q(0.5, 1.0, 0.0)
        with pytest.raises(InvalidArgument):
            bernoulli_q(0.5, 1.5)


@settings(max_examples=200, deadline=None)
@given(
    u1=st.floats(1e-9, 1 - 1e-9),
    u2=st.floats(1e-9, 1 - 1e-9),
    lam=st.floats(1e-3, 500.0),
    alpha=st.floats(0.01, 10.0),
)
def test_quantiles_monotone_in_u(u1, u2, lam, alpha):
    lo, hi = sorted((u1, u2))
    assert poisson_q(lo, lam) <= poisson_q(hi, lam)
    assert negbin_q(lo, lam, alpha) <= negbin_q(hi, lam, alpha)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(1e-9, 1 - 1e-9), lam=st.floats(1e-3, 100.0), factor=st.floats(1.0, 3.0))
def test_poisson_quantile_monotone_in_mean(u, lam, factor):
    assert poisson_q(u, lam) <= poisson_q(u, lam * factor)
