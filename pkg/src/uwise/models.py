"""Target models and the Gaussian variational family.

All gradients are closed form. For a batch of standard-normal noise ``eps``
the family provides, per sample ``i``:

* ``z_i = T(eps_i)`` and ``log q(z_i)``,
* ``grad_z log q(z_i)``,
* the parameter score ``d/dphi log q(z)`` at fixed ``z = z_i``,
* the vector-Jacobian product ``J_i^T u`` with ``J_i = dz_i/dphi``.

The total derivative of a log-weight is then
``J^T (grad_z log p - grad_z log q) - score``.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

__all__ = [
    "TargetModel",
    "LinearGaussianModel",
    "LogisticRegressionModel",
    "linear_gaussian_model",
    "logistic_regression_model",
    "synthetic_logistic_data",
    "write_dataset_csv",
    "FamilyKind",
    "GaussianVariational",
    "FamilySample",
    "family_sample",
    "SampleBatch",
    "log_weight_batch",
    "softplus",
    "softplus_inverse",
]

_LOG_2PI = math.log(2.0 * math.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse needs positive input")
    # log(expm1(y)) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


class TargetModel:
    """Unnormalized target ``p(z, x)`` with ``x`` fixed.

    Subclasses implement :meth:`log_joint` and :meth:`grad_log_joint` for
    ``z`` of shape ``(..., dim)``.
    """

    dim: int
    exact_log_evidence: float | None = None

    def log_joint(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_log_joint(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LinearGaussianModel(TargetModel):
    """``z ~ N(0, I)``, ``x | z ~ N(A z, noise_sd^2 I)``."""

    def __init__(self, A, noise_sd: float, x):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if not noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if A.shape[0] != x.size:
            raise ValueError(f"A has {A.shape[0]} rows but x has {x.size} entries")
        self.A, self.noise_sd, self.x = A, float(noise_sd), x
        self.dim = A.shape[1]
        self._s2 = self.noise_sd**2
        cov_x = A @ A.T + self._s2 * np.eye(x.size)
        c = linalg.cho_factor(cov_x, lower=True)
        quad = x @ linalg.cho_solve(c, x)
        logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
        self.exact_log_evidence = float(-0.5 * (quad + logdet + x.size * _LOG_2PI))

    def log_joint(self, z):
        z = np.asarray(z, dtype=np.float64)
        r = self.x - z @ self.A.T
        d_x = self.x.size
        prior = -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.dim * _LOG_2PI
        lik = -0.5 * np.sum(r * r, axis=-1) / self._s2 - 0.5 * d_x * (math.log(self._s2) + _LOG_2PI)
        return prior + lik

    def grad_log_joint(self, z):
        z = np.asarray(z, dtype=np.float64)
        r = self.x - z @ self.A.T
        return -z + (r @ self.A) / self._s2

    def exact_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and covariance of ``z`` given ``x``."""
        prec = np.eye(self.dim) + self.A.T @ self.A / self._s2
        cov = linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        return cov @ (self.A.T @ self.x) / self._s2, cov


def linear_gaussian_model(A, noise_sd: float, x) -> LinearGaussianModel:
    return LinearGaussianModel(A, noise_sd, x)


class LogisticRegressionModel(TargetModel):
    """Bayesian logistic regression with an isotropic Gaussian prior.

    ``log p(theta, y) = sum_i log sigmoid(y_i theta^T x_i) - |theta|^2 / (2 s^2) - (d/2) log(2 pi s^2)``
    """

    def __init__(self, X, y, prior_sd: float = 1.0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} labels")
        if not prior_sd > 0:
            raise ValueError("prior_sd must be positive")
        if y.size and set(np.unique(y)) <= {0.0, 1.0}:
            y = 2.0 * y - 1.0
        if not set(np.unique(y)) <= {-1.0, 1.0}:
            raise ValueError("labels must be in {-1, +1} or {0, 1}")
        self.X, self.y, self.prior_sd = X, y, float(prior_sd)
        self.dim = X.shape[1]
        self.exact_log_evidence = None

    def log_joint(self, z):
        z = np.asarray(z, dtype=np.float64)
        margins = (z @ self.X.T) * self.y
        s2 = self.prior_sd**2
        return (
            np.sum(log_expit(margins), axis=-1)
            - 0.5 * np.sum(z * z, axis=-1) / s2
            - 0.5 * self.dim * (_LOG_2PI + math.log(s2))
        )

    def grad_log_joint(self, z):
        z = np.asarray(z, dtype=np.float64)
        margins = (z @ self.X.T) * self.y
        return (expit(-margins) * self.y) @ self.X - z / self.prior_sd**2


def logistic_regression_model(X, y, prior_sd: float = 1.0) -> LogisticRegressionModel:
    return LogisticRegressionModel(X, y, prior_sd)


def synthetic_logistic_data(
    rng: np.random.Generator, N: int = 200, d: int = 10
) -> tuple[np.ndarray, np.ndarray]:
    """Features ``N(0, 1)``, labels in ``{-1, +1}`` from a ground truth ``theta* ~ N(0, I)``."""
    theta = rng.standard_normal(d)
    X = rng.standard_normal((N, d))
    y = np.where(rng.random(N) < expit(X @ theta), 1.0, -1.0)
    return X, y


def write_dataset_csv(X: np.ndarray, y: np.ndarray, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "X.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(X.shape[1])])
        w.writerows([[repr(float(a)) for a in row] for row in X])
    with open(os.path.join(out_dir, "y.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["y"])
        w.writerows([[int(a)] for a in y])


# ---------------------------------------------------------------------------
# variational family


class FamilyKind(str, enum.Enum):
    DIAGONAL = "diagonal"
    FULL_RANK = "full_rank"


@dataclass(frozen=True)
class FamilySample:
    eps: np.ndarray
    z: np.ndarray
    log_q: np.ndarray
    grad_z_log_q: np.ndarray
    score: np.ndarray  # (n, d_phi), d/dphi log q(z) at fixed z
    _family: "GaussianVariational" = field(repr=False)

    def vjp(self, u: np.ndarray) -> np.ndarray:
        """Rows ``J_i^T u_i`` for ``u`` of shape ``(n, dim)``."""
        return self._family._vjp(self.eps, u)


@dataclass(frozen=True)
class GaussianVariational:
    """Gaussian ``q_phi`` with a flat unconstrained parameter vector ``phi``.

    ``DIAGONAL``: ``phi = (mu, omega)`` and scale ``exp(omega)``.
    ``FULL_RANK``: ``phi = (mu, lower-triangular entries of L)`` in
    ``np.tril_indices`` order; diagonal entries pass through softplus.
    """

    kind: FamilyKind
    dim: int
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        phi = np.array(self.phi, dtype=np.float64).reshape(-1)
        if phi.size != self.num_params_for(self.kind, self.dim):
            raise ValueError(
                f"{self.kind.value} family of dim {self.dim} needs "
                f"{self.num_params_for(self.kind, self.dim)} params, got {phi.size}"
            )
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @staticmethod
    def num_params_for(kind, dim: int) -> int:
        if FamilyKind(kind) is FamilyKind.DIAGONAL:
            return 2 * dim
        return dim + dim * (dim + 1) // 2

    @classmethod
    def init(cls, kind, dim: int, rng: np.random.Generator) -> "GaussianVariational":
        """Unconstrained parameters drawn iid ``N(0, 1)``."""
        return cls(kind, dim, rng.standard_normal(cls.num_params_for(kind, dim)))

    @classmethod
    def from_moments(cls, kind, mean, cov) -> "GaussianVariational":
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        d = mean.size
        if FamilyKind(kind) is FamilyKind.DIAGONAL:
            return cls(kind, d, np.concatenate([mean, 0.5 * np.log(np.diag(cov))]))
        L = np.linalg.cholesky(cov)
        raw = L[np.tril_indices(d)].copy()
        raw[_diag_positions(d)] = softplus_inverse(np.diag(L))
        return cls(kind, d, np.concatenate([mean, raw]))

    def with_params(self, phi) -> "GaussianVariational":
        return GaussianVariational(self.kind, self.dim, phi)

    @property
    def num_params(self) -> int:
        return self.phi.size

    @property
    def mu(self) -> np.ndarray:
        return self.phi[: self.dim]

    @property
    def scale_params(self) -> np.ndarray:
        return self.phi[self.dim :]

    @property
    def scale_tril(self) -> np.ndarray:
        d = self.dim
        if self.kind is FamilyKind.DIAGONAL:
            return np.diag(np.exp(self.scale_params))
        L = np.zeros((d, d))
        raw = self.scale_params.copy()
        pos = _diag_positions(d)
        raw[pos] = softplus(raw[pos])
        L[np.tril_indices(d)] = raw
        return L

    @property
    def covariance(self) -> np.ndarray:
        L = self.scale_tril
        return L @ L.T

    def log_density(self, z) -> np.ndarray:
        """Exact Gaussian log-density at arbitrary ``z`` of shape ``(..., dim)``."""
        z = np.asarray(z, dtype=np.float64)
        L = self.scale_tril
        diff = (z - self.mu).reshape(-1, self.dim)
        a = linalg.solve_triangular(L, diff.T, lower=True).T
        out = -0.5 * np.sum(a * a, axis=1) - np.sum(np.log(np.diag(L))) - 0.5 * self.dim * _LOG_2PI
        return out.reshape(z.shape[:-1])

    def _vjp(self, eps: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.kind is FamilyKind.DIAGONAL:
            sigma = np.exp(self.scale_params)
            return np.concatenate([u, u * sigma * eps], axis=1)
        d = self.dim
        rows, cols = np.tril_indices(d)
        dL = u[:, rows] * eps[:, cols]
        dL[:, _diag_positions(d)] *= expit(self.scale_params[_diag_positions(d)])
        return np.concatenate([u, dL], axis=1)

    def sample(self, eps) -> FamilySample:
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if eps.shape[1] != self.dim:
            raise ValueError(f"noise rows must have {self.dim} entries, got {eps.shape[1]}")
        d = self.dim
        if self.kind is FamilyKind.DIAGONAL:
            omega = self.scale_params
            sigma = np.exp(omega)
            z = self.mu + sigma * eps
            log_q = -0.5 * np.sum(eps * eps, axis=1) - np.sum(omega) - 0.5 * d * _LOG_2PI
            grad_z = -eps / sigma
            score = np.concatenate([eps / sigma, eps * eps - 1.0], axis=1)
        else:
            L = self.scale_tril
            diag = np.diag(L)
            z = self.mu + eps @ L.T
            log_q = -0.5 * np.sum(eps * eps, axis=1) - np.sum(np.log(diag)) - 0.5 * d * _LOG_2PI
            # b = L^{-T} eps, so grad_z log q = -b and d/dmu log q = b
            b = linalg.solve_triangular(L, eps.T, lower=True, trans="T").T
            grad_z = -b
            rows, cols = np.tril_indices(d)
            sL = b[:, rows] * eps[:, cols]
            pos = _diag_positions(d)
            sL[:, pos] -= 1.0 / diag
            sL[:, pos] *= expit(self.scale_params[pos])
            score = np.concatenate([b, sL], axis=1)
        return FamilySample(eps, z, log_q, grad_z, score, self)


def _diag_positions(d: int) -> np.ndarray:
    """Positions of the diagonal within ``np.tril_indices(d)`` order."""
    k = np.arange(d)
    return k * (k + 1) // 2 + k


def family_sample(params: GaussianVariational, eps) -> FamilySample:
    return params.sample(eps)


@dataclass(frozen=True)
class SampleBatch:
    """``n`` reparameterized draws with their log-weights and per-sample gradients.

    ``path_grad[i] = J_i^T (grad_z log p - grad_z log q)`` and
    ``grad_v[i] = path_grad[i] - score[i]`` is the total derivative of the
    ``i``-th log-weight with respect to the variational parameters.
    """

    eps: np.ndarray
    z: np.ndarray
    v: np.ndarray
    grad_logp_z: np.ndarray
    grad_v: np.ndarray
    path_grad: np.ndarray

    @property
    def n(self) -> int:
        return self.v.size


def log_weight_batch(model: TargetModel, params: GaussianVariational, eps) -> SampleBatch:
    if model.dim != params.dim:
        raise ValueError(f"model dim {model.dim} != family dim {params.dim}")
    fs = params.sample(eps)
    log_p = model.log_joint(fs.z)
    grad_p = model.grad_log_joint(fs.z)
    v = log_p - fs.log_q
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite log-weight")
    path = fs.vjp(grad_p - fs.grad_z_log_q)
    return SampleBatch(fs.eps, fs.z, v, grad_p, path - fs.score, path)
