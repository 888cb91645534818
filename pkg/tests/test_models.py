import math

import numpy as np
import pytest
from scipy import integrate, stats

from helpers import random_setup, rel_err
from uwise.estimators import approx_first_order, complete_u
from uwise.gradients import finite_difference_gradient
from uwise.models import (
    FamilyKind,
    GaussianVariational,
    linear_gaussian_model,
    log_weight_batch,
    logistic_regression_model,
    softplus,
    softplus_inverse,
    synthetic_logistic_data,
    write_dataset_csv,
)

FAMILIES = ["diagonal", "full_rank"]
MODELS = ["linear_gaussian", "logistic"]


class TestLinearGaussian:
    def test_scalar_closed_form(self):
        model = linear_gaussian_model([[1.0]], 1.0, [0.0])
        assert model.exact_log_evidence == pytest.approx(-0.5 * math.log(4 * math.pi), rel=1e-14)

    def test_no_coupling(self, rng):
        x = rng.normal(size=4)
        model = linear_gaussian_model(np.zeros((4, 2)), 1.5, x)
        assert model.exact_log_evidence == pytest.approx(stats.norm(0, 1.5).logpdf(x).sum(), rel=1e-13)

    @pytest.mark.parametrize("d_z", [1, 2])
    def test_evidence_matches_quadrature(self, d_z):
        rng = np.random.default_rng(d_z)
        model = linear_gaussian_model(rng.normal(size=(3, d_z)), 0.8, rng.normal(size=3))
        shift = model.exact_log_evidence
        if d_z == 1:
            val, _ = integrate.quad(lambda a: math.exp(model.log_joint(np.array([a])) - shift), -12, 12, epsabs=1e-12)
        else:
            val, _ = integrate.dblquad(
                lambda b, a: math.exp(model.log_joint(np.array([a, b])) - shift), -12, 12, -12, 12, epsabs=1e-11
            )
        assert math.log(val) + shift == pytest.approx(model.exact_log_evidence, abs=1e-6)

    def test_posterior_matches_bayes_rule(self, rng):
        model = linear_gaussian_model(rng.normal(size=(4, 3)), 0.7, rng.normal(size=4))
        mean, cov = model.exact_posterior()
        z = rng.normal(size=3)
        # log p(z | x) = log p(z, x) - log p(x)
        assert model.log_joint(z) - model.exact_log_evidence == pytest.approx(
            stats.multivariate_normal(mean, cov).logpdf(z), rel=1e-10
        )

    def test_validation(self):
        with pytest.raises(ValueError):
            linear_gaussian_model([[1.0]], 0.0, [1.0])
        with pytest.raises(ValueError):
            linear_gaussian_model(np.ones((2, 1)), 1.0, [1.0])


class TestLogistic:
    def test_no_data_is_prior(self, rng):
        model = logistic_regression_model(np.zeros((0, 3)), np.zeros(0), prior_sd=2.0)
        z = rng.normal(size=3)
        assert model.log_joint(z) == pytest.approx(stats.norm(0, 2.0).logpdf(z).sum(), rel=1e-13)
        np.testing.assert_allclose(model.grad_log_joint(z), -z / 4.0)

    def test_origin(self, rng):
        X, y = synthetic_logistic_data(rng, 25, 4)
        model = logistic_regression_model(X, y)
        assert model.log_joint(np.zeros(4)) == pytest.approx(-25 * math.log(2) - 2 * math.log(2 * math.pi), rel=1e-13)

    def test_zero_one_labels_convert(self, rng):
        X, y = synthetic_logistic_data(rng, 10, 2)
        z = rng.normal(size=2)
        a = logistic_regression_model(X, y).log_joint(z)
        b = logistic_regression_model(X, (y + 1) / 2).log_joint(z)
        assert a == b

    def test_validation(self):
        with pytest.raises(ValueError):
            logistic_regression_model(np.zeros((3, 2)), np.ones(2))
        with pytest.raises(ValueError):
            logistic_regression_model(np.zeros((2, 2)), np.array([1.0, 2.0]))

    def test_dataset_csv(self, rng, tmp_path):
        X, y = synthetic_logistic_data(rng, 7, 3)
        write_dataset_csv(X, y, str(tmp_path))
        Xr = np.loadtxt(tmp_path / "X.csv", delimiter=",", skiprows=1)
        yr = np.loadtxt(tmp_path / "y.csv", delimiter=",", skiprows=1)
        np.testing.assert_array_equal(Xr, X)
        np.testing.assert_array_equal(yr, y)


@pytest.mark.parametrize("kind", MODELS)
@pytest.mark.parametrize("seed", range(5))
def test_grad_log_joint_matches_fd(kind, seed):
    model, params, eps = random_setup(seed, kind, "diagonal")
    z = np.random.default_rng(seed).normal(size=model.dim)
    fd = finite_difference_gradient(lambda t: float(model.log_joint(t)), z, 1e-5)
    assert rel_err(model.grad_log_joint(z), fd) < 1e-6


class TestFamily:
    def test_param_counts(self):
        assert GaussianVariational.num_params_for("diagonal", 4) == 8
        assert GaussianVariational.num_params_for("full_rank", 4) == 14
        with pytest.raises(ValueError):
            GaussianVariational("diagonal", 2, np.zeros(3))

    def test_zero_noise_gives_mean(self, rng):
        for kind in FAMILIES:
            p = GaussianVariational.init(kind, 3, rng)
            s = p.sample(np.zeros((1, 3)))
            np.testing.assert_allclose(s.z[0], p.mu)
            _, logdet = np.linalg.slogdet(p.covariance)
            assert s.log_q[0] == pytest.approx(-0.5 * (3 * math.log(2 * math.pi) + logdet), rel=1e-12)

    def test_scalar_diagonal(self):
        s = GaussianVariational("diagonal", 1, [0.0, 0.0]).sample([[1.0]])
        assert s.z[0, 0] == 1.0
        assert s.log_q[0] == pytest.approx(-0.5 * (1 + math.log(2 * math.pi)), rel=1e-15)

    @pytest.mark.parametrize("kind", FAMILIES)
    def test_log_q_is_exact_density(self, kind, rng):
        p = GaussianVariational.init(kind, 3, rng)
        eps = rng.normal(size=(10, 3))
        s = p.sample(eps)
        ref = stats.multivariate_normal(p.mu, p.covariance).logpdf(s.z)
        np.testing.assert_allclose(s.log_q, ref, rtol=1e-10)
        np.testing.assert_allclose(p.log_density(s.z), ref, rtol=1e-10)

    @pytest.mark.parametrize("kind", FAMILIES)
    def test_positive_scale(self, kind, rng):
        p = GaussianVariational(kind, 3, 30 * rng.normal(size=GaussianVariational.num_params_for(kind, 3)) - 20)
        assert np.all(np.diag(p.scale_tril) > 0)

    @pytest.mark.parametrize("kind", FAMILIES)
    def test_moments(self, kind):
        rng = np.random.default_rng(5)
        p = GaussianVariational.init(kind, 3, rng)
        z = p.sample(rng.normal(size=(10**6, 3))).z
        cov = p.covariance
        se_mean = np.sqrt(np.diag(cov) / z.shape[0])
        assert np.all(np.abs(z.mean(axis=0) - p.mu) < 4 * se_mean)
        emp = np.cov(z.T)
        # var of a sample covariance entry: (S_ij^2 + S_ii S_jj) / N
        se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / z.shape[0])
        assert np.all(np.abs(emp - cov) < 4 * se_cov)

    @pytest.mark.parametrize("kind", FAMILIES)
    def test_normalized(self, kind, rng):
        # E_{z ~ N(mu, 4 I)} [q(z) / N(z; mu, 4I)] = 1
        p = GaussianVariational.init(kind, 2, rng)
        prop = stats.multivariate_normal(p.mu, 4 * p.covariance)
        z = prop.rvs(size=200_000, random_state=rng)
        r = np.exp(p.log_density(z) - prop.logpdf(z))
        assert abs(r.mean() - 1) < 4 * r.std() / math.sqrt(r.size)

    @pytest.mark.parametrize("kind", FAMILIES)
    def test_score_and_vjp_match_fd(self, kind, rng):
        p = GaussianVariational.init(kind, 3, rng)
        eps = rng.normal(size=(4, 3))
        s = p.sample(eps)
        u = rng.normal(size=(4, 3))
        for i in range(4):
            score_fd = finite_difference_gradient(lambda phi: float(p.with_params(phi).log_density(s.z[i])), p.phi)
            assert rel_err(s.score[i], score_fd) < 1e-7
            vjp_fd = finite_difference_gradient(lambda phi: float(p.with_params(phi).sample(eps[i : i + 1]).z[0] @ u[i]), p.phi)
            assert rel_err(s.vjp(u)[i], vjp_fd) < 1e-7
            gz_fd = finite_difference_gradient(lambda z: float(p.log_density(z)), s.z[i])
            assert rel_err(s.grad_z_log_q[i], gz_fd) < 1e-7

    def test_from_moments_round_trip(self, rng):
        B = rng.normal(size=(3, 3))
        cov = B @ B.T + np.eye(3)
        mean = rng.normal(size=3)
        p = GaussianVariational.from_moments("full_rank", mean, cov)
        np.testing.assert_allclose(p.covariance, cov, rtol=1e-12)
        np.testing.assert_allclose(p.mu, mean)
        d = GaussianVariational.from_moments("diagonal", mean, np.diag(np.diag(cov)))
        np.testing.assert_allclose(d.covariance, np.diag(np.diag(cov)), rtol=1e-12)

    def test_softplus_inverse(self):
        y = np.array([1e-8, 0.3, 5.0, 800.0])
        np.testing.assert_allclose(softplus(softplus_inverse(y)), y, rtol=1e-12)


class TestLogWeightBatch:
    @pytest.mark.parametrize("kind", MODELS)
    def test_parts_recompute(self, kind):
        model, params, eps = random_setup(3, kind, "full_rank")
        b = log_weight_batch(model, params, eps)
        np.testing.assert_allclose(b.v, model.log_joint(b.z) - params.log_density(b.z), atol=1e-10)
        np.testing.assert_allclose(b.z, params.mu + eps @ params.scale_tril.T)

    def test_single_draw(self, rng):
        model, params, _ = random_setup(1, "linear_gaussian", "diagonal")
        b = log_weight_batch(model, params, rng.normal(size=(1, params.dim)))
        assert complete_u(b.v, 1).value == b.v[0]

    def test_family_equals_target(self, rng):
        # A = 0: the posterior is the N(0, I) prior, reached by mu = 0, omega = 0
        x = rng.normal(size=3)
        model = linear_gaussian_model(np.zeros((3, 2)), 1.0, x)
        p = GaussianVariational("diagonal", 2, np.zeros(4))
        v = log_weight_batch(model, p, rng.normal(size=(50, 2))).v
        np.testing.assert_allclose(v, model.exact_log_evidence, atol=1e-12)
        wrong = GaussianVariational("diagonal", 2, np.r_[0.0, 0.0, 0.3, -0.3])
        assert np.std(log_weight_batch(model, wrong, rng.normal(size=(50, 2))).v) > 0.01

    def test_exact_posterior_full_rank(self, rng):
        model = linear_gaussian_model(rng.normal(size=(6, 4)), 0.9, rng.normal(size=6))
        mean, cov = model.exact_posterior()
        p = GaussianVariational.from_moments("full_rank", mean, cov)
        v = log_weight_batch(model, p, rng.normal(size=(16, 4))).v
        assert np.var(v) < 1e-10
        assert complete_u(v, 8).value == pytest.approx(model.exact_log_evidence, abs=1e-5)
        assert complete_u(v, 8).value - approx_first_order(v, 8).value == pytest.approx(math.log(8), abs=1e-5)

    def test_jensen_ladder(self):
        rng = np.random.default_rng(11)
        model = linear_gaussian_model(rng.normal(size=(4, 2)), 1.0, rng.normal(size=4))
        mean, cov = model.exact_posterior()
        p = GaussianVariational.from_moments("diagonal", mean + 0.3, np.diag(np.diag(cov)) * 1.5)
        n, R = 8, 4000
        V = log_weight_batch(model, p, rng.normal(size=(n * R, 2))).v.reshape(R, n)
        from uwise.estimators import batch_complete_u

        means, ses = [], []
        for m in range(1, n + 1):
            x = batch_complete_u(V, m)
            means.append(x.mean())
            ses.append(x.std(ddof=1) / math.sqrt(R))
        for m in range(n - 1):
            # common draws: use the paired difference for the error
            d = batch_complete_u(V, m + 2) - batch_complete_u(V, m + 1)
            assert d.mean() > -4 * d.std(ddof=1) / math.sqrt(R)
        assert means[-1] <= model.exact_log_evidence + 4 * ses[-1]

    def test_dim_mismatch(self, rng):
        model, params, _ = random_setup(0, "logistic", "diagonal")
        with pytest.raises(ValueError):
            log_weight_batch(model, params, rng.normal(size=(3, params.dim + 1)))
