from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jini.crn import RngStream, make_bank
from jini.errors import InvalidArgument, SimulationOverflow
from jini.models import (
    Dataset,
    DatasetFormatError,
    DesignMatrix,
    Family,
    MisclassLatents,
    ModelSpec,
    SyntheticBiasSpec,
    gen_design,
    linear_predictor,
    mean_logistic,
    mean_misclassified,
    parse_dataset_csv,
    read_dataset_csv,
    simulate,
    simulate_responses,
    synthetic_initial,
    write_dataset_csv,
)


def nb_model(n=100, p=20, seed=0, family=Family.NEGBIN, censor_at=None):
    design = gen_design("nb-style", n, p, RngStream(seed))
    return ModelSpec(family, design, censor_at=censor_at)


def nb_theta(p=20, alpha=0.6):
    beta = np.zeros(p)
    beta[:3] = (1.5, 2.5, -2.5)
    return np.append(beta, alpha)


class TestMeans:
    def test_linear_predictor(self):
        assert np.array_equal(linear_predictor(np.eye(2), [3.0, -1.0]), [3.0, -1.0])
        assert np.array_equal(linear_predictor(np.ones((3, 1)), [2.0]), [2.0, 2.0, 2.0])
        assert linear_predictor(np.array([[1.0, 0.5]]), [1.5, 2.5])[0] == 2.75

    def test_linear_predictor_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            linear_predictor(np.eye(2), [1.0, 2.0, 3.0])

    def test_mean_logistic(self):
        assert mean_logistic(0.0) == 0.5
        assert mean_logistic(np.log(3.0)) == pytest.approx(0.75, abs=1e-15)
        assert mean_logistic(40.0) >= 1 - 1e-12
        assert mean_logistic(-800.0) == 0.0

    def test_mean_misclassified(self):
        mu = np.array([0.0, 0.3, 1.0])
        none = MisclassLatents(np.zeros(3), np.zeros(3))
        assert np.array_equal(mean_misclassified(mu, none), mu)
        lat = MisclassLatents(np.full(3, 0.02), np.full(3, 0.1))
        got = mean_misclassified(mu, lat)
        assert got[0] == pytest.approx(0.02)
        assert got[2] == pytest.approx(0.9)


@settings(max_examples=100, deadline=None)
@given(
    mu=st.floats(0.0, 1.0),
    fp=st.floats(0.0, 1.0),
    fn=st.floats(0.0, 1.0),
)
def test_misclassified_mean_bracketed(mu, fp, fn):
    got = mean_misclassified(np.array([mu]), MisclassLatents([fp], [fn]))[0]
    lo, hi = sorted((fp, 1 - fn))
    assert lo - 1e-15 <= got <= hi + 1e-15


class TestDesign:
    def test_nb_style_shape(self):
        x = gen_design("nb-style", 100, 20, RngStream(0)).x
        assert x.shape == (100, 20)
        assert np.all(x[:, 0] == 1.0)
        assert np.all(x[:50, 2] == 0.0) and np.all(x[50:, 2] == 1.0)

    def test_nb_style_minimal(self):
        x = gen_design("nb-style", 4, 3, RngStream(0)).x
        assert np.array_equal(x[:, 2], [0.0, 0.0, 1.0, 1.0])

    def test_nb_style_odd_n_puts_extra_zero_first(self):
        x = gen_design("nb-style", 5, 3, RngStream(0)).x
        assert np.array_equal(x[:, 2], [0.0, 0.0, 0.0, 1.0, 1.0])

    def test_logistic_designs_scale(self):
        x = gen_design("logistic-I", 2000, 200, RngStream(5)).x
        assert x.mean() == pytest.approx(0.0, abs=0.003)
        assert x.std() == pytest.approx(4 / np.sqrt(2000), rel=0.01)
        x2 = gen_design("logistic-II", 3000, 50, RngStream(5)).x
        assert x2.mean() == pytest.approx(0.6, abs=0.003)

    def test_intercept(self):
        assert np.array_equal(gen_design("intercept", 3, 1, RngStream(0)).x, np.ones((3, 1)))

    def test_deterministic_in_stream(self):
        a = gen_design("nb-style", 30, 6, RngStream(2)).x
        b = gen_design("nb-style", 30, 6, RngStream(2)).x
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("recipe,p", [("nb-style", 2), ("intercept", 2), ("bogus", 3)])
    def test_bad_arguments(self, recipe, p):
        with pytest.raises(InvalidArgument):
            gen_design(recipe, 10, p, RngStream(0))


class TestSynthetic:
    def test_arithmetic(self):
        spec = SyntheticBiasSpec([[0.5]], [0.1])
        u = make_bank(0, 3, 1).u
        assert np.allclose(synthetic_initial(spec, [1.0], u), 1.6, atol=1e-15)
        assert np.allclose(synthetic_initial(spec, [0.7], u), 1.15, atol=1e-15)

    def test_unbiased_case_is_identity(self):
        spec = SyntheticBiasSpec(np.zeros((3, 3)), np.zeros(3))
        theta = np.array([0.3, -2.0, 7.0])
        assert np.array_equal(synthetic_initial(spec, theta, make_bank(0, 2, 3).u), np.tile(theta, (2, 1)))

    def test_noise_is_normal_inversion(self):
        spec = SyntheticBiasSpec(np.zeros((1, 1)), [0.0], noise_sd=2.0)
        u = np.array([[0.5], [0.975]])
        got = synthetic_initial(spec, [1.0], u)[:, 0]
        assert got[0] == 1.0
        assert got[1] == pytest.approx(1.0 + 2.0 * 1.959963984540054, rel=1e-12)


class TestSimulate:
    def test_deterministic(self):
        model = nb_model()
        bank = make_bank(1, 4, 100)
        a = simulate(model, nb_theta(), bank, 2)
        b = simulate(model, nb_theta(), bank, 2)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.y, simulate_responses(model, nb_theta(), bank.u)[2])

    def test_censoring_is_clipping(self):
        bank = make_bank(3, 20, 100)
        plain = simulate_responses(nb_model(), nb_theta(), bank.u)
        cens = simulate_responses(nb_model(family=Family.NEGBIN_CENSORED, censor_at=30), nb_theta(), bank.u)
        assert plain.max() > 30
        assert np.array_equal(cens, np.minimum(plain, 30))

    def test_poisson_censoring_hits_threshold(self):
        model = ModelSpec(Family.POISSON_CENSORED, DesignMatrix(np.ones((50, 1))), censor_at=5)
        y = simulate_responses(model, [np.log(7.0)], make_bank(0, 1, 50).u)
        assert y.max() == 5

    def test_negbin_overdispersed(self):
        y = simulate_responses(nb_model(), nb_theta(), make_bank(4, 200, 100).u)
        assert np.mean(y.var(axis=1)) > np.mean(y.mean(axis=1))

    def test_logistic_fair_coin(self):
        model = ModelSpec(Family.LOGISTIC, DesignMatrix(np.ones((10, 1))))
        y = simulate_responses(model, [0.0], make_bank(6, 10_000, 10).u)
        assert y.mean() == pytest.approx(0.5, abs=0.02)

    @pytest.mark.parametrize("family", [Family.POISSON, Family.NEGBIN])
    def test_mean_law(self, family):
        design = gen_design("nb-style", 20, 4, RngStream(8))
        model = ModelSpec(family, design)
        beta = np.array([1.0, 0.5, -0.5, 0.3])
        theta = np.append(beta, 0.6) if family.has_alpha else beta
        y = simulate_responses(model, theta, make_bank(9, 10_000, 20).u)
        mu = np.exp(design.x @ beta)
        var = mu + (0.6 * mu**2 if family.has_alpha else 0.0)
        z = (y.mean(axis=0) - mu) / np.sqrt(var / 10_000)
        assert np.all(np.abs(z) < 3.0)

    def test_overflow_reports_index(self):
        model = ModelSpec(Family.POISSON, DesignMatrix(np.array([[1.0], [1.0], [30.0]])))
        with pytest.raises(SimulationOverflow) as info:
            simulate_responses(model, [1.0], make_bank(0, 1, 3).u)
        assert info.value.index == 2

    def test_synthetic_has_no_dataset(self):
        model = ModelSpec(Family.SYNTHETIC, None, synth=SyntheticBiasSpec([[0.5]], [0.1]))
        with pytest.raises(InvalidArgument):
            simulate(model, [1.0], make_bank(0, 1, 1), 0)


class TestModelSpec:
    def test_default_box(self):
        model = nb_model(p=4)
        assert model.dim == 5
        assert np.array_equal(model.box.lower, [-50, -50, -50, -50, 1e-4])
        assert np.array_equal(model.box.upper, [50, 50, 50, 50, 100])

    def test_censoring_required(self):
        with pytest.raises(InvalidArgument):
            nb_model(family=Family.NEGBIN_CENSORED)

    def test_latents_required(self):
        with pytest.raises(InvalidArgument):
            ModelSpec(Family.LOGISTIC_MISCLASSIFIED, DesignMatrix(np.ones((3, 1))))

    def test_latent_draws_have_beta_means(self):
        lat = MisclassLatents.draw(RngStream(0), 20_000)
        assert lat.u_fp.mean() == pytest.approx(2 / 52, abs=0.002)
        assert lat.u_fn.mean() == pytest.approx(2 / 12, abs=0.003)


class TestDatasetCsv:
    def test_round_trip(self, tmp_path):
        x = np.array([[1.0, 0.25], [1.0, -1.5], [1.0, 1e-17]])
        data = Dataset(DesignMatrix(x), [3, 0, 5], censor_at=5)
        path = tmp_path / "d.csv"
        write_dataset_csv(data, path)
        back = read_dataset_csv(path)
        assert back.censor_at == 5
        assert np.array_equal(back.y, data.y)
        assert np.array_equal(back.design.x, x)

    def test_explicit_censor_overrides_metadata(self):
        data = parse_dataset_csv("#censor_at=5\ny,x1\n3,1\n", censor_at=9)
        assert data.censor_at == 9

    @pytest.mark.parametrize(
        "text",
        [
            "x,y\n1,2\n",
            "y,x1\n1,2,3\n",
            "y,x1\n1,abc\n",
            "y,x1\n",
            "y\n1\n",
            "#censor_at=oops\ny,x1\n1,1\n",
        ],
    )
    def test_malformed(self, text):
        with pytest.raises(DatasetFormatError):
            parse_dataset_csv(text)

    def test_response_validation(self):
        with pytest.raises(InvalidArgument):
            parse_dataset_csv("y,x1\n1.5,1\n")
        with pytest.raises(InvalidArgument):
            parse_dataset_csv("y,x1\n2,1\n", kind="binary")
        with pytest.raises(InvalidArgument):
            parse_dataset_csv("y,x1\n7,1\n", censor_at=5)
