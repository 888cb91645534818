"""Shared fixtures-by-function for gradient and model tests."""

import numpy as np

from uwise.gradients import finite_difference_gradient, normalized_weights
from uwise.models import (
    GaussianVariational,
    linear_gaussian_model,
    log_weight_batch,
    logistic_regression_model,
    synthetic_logistic_data,
)


def random_setup(seed, model_kind, family, n=None):
    """Model, params, noise and batch size drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    if model_kind == "linear_gaussian":
        A = rng.normal(size=(int(rng.integers(1, 6)), d))
        model = linear_gaussian_model(A, float(rng.uniform(0.5, 2.0)), rng.normal(size=A.shape[0]))
    else:
        X, y = synthetic_logistic_data(rng, N=int(rng.integers(5, 40)), d=d)
        model = logistic_regression_model(X, y, prior_sd=float(rng.uniform(0.5, 2.0)))
    params = GaussianVariational(family, d, 0.5 * rng.normal(size=GaussianVariational.num_params_for(family, d)))
    n = n or int(rng.integers(2, 9))
    eps = rng.normal(size=(n, d))
    return model, params, eps


def log_weights_at(model, params, eps, phi):
    return log_weight_batch(model, params.with_params(phi), eps).v


def fd_of(model, params, eps, objective_of_v, step=1e-5):
    """Central differences of ``objective_of_v(v(phi))`` at fixed noise."""
    return finite_difference_gradient(lambda phi: objective_of_v(log_weights_at(model, params, eps, phi)), params.phi, step)


def fd_path(model, params, eps, coef, step=1e-5):
    """Central differences of ``sum_i coef_i (log p - log q_fixed)(z_i(phi))``.

    The density ``q`` is held at the unperturbed parameters, so only the
    path through ``z`` is differentiated.
    """

    def f(phi):
        z = params.with_params(phi).sample(eps).z
        return float(coef @ (model.log_joint(z) - params.log_density(z)))

    return finite_difference_gradient(f, params.phi, step)


def dreg_coefficients_on(v, rows):
    c = np.zeros(v.size)
    c[rows] = normalized_weights(v[rows]) ** 2
    return c


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
