"""Bayesian logistic regression and a marginalised Gaussian mixture.

Each model exposes the contract consumed by :mod:`dpvi.variational`:
parameter blocks, vectorised per-example log-likelihoods with gradients in
constrained space, and a log prior with its gradient. Constrained values
are passed around as flat arrays keyed by block name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, log_expit, logsumexp

from .variational import GaussianVariational, ParameterBlock, Transform, sample_reparam

__all__ = [
    "ModelSpec",
    "LogRegModel",
    "GmmModel",
    "logreg_loglik",
    "logreg_loglik_grad",
    "logreg_predict",
    "classification_accuracy",
    "gmm_loglik",
    "gmm_loglik_grad",
    "log_prior_and_jacobian",
    "gmm_predictive_likelihood",
]

_LOG_2PI = math.log(2.0 * math.pi)
_SIMPLEX_TOL = 1e-12


class ModelSpec:
    """Interface for models fitted by DPVI.

    Subclasses define ``blocks`` and the four likelihood/prior methods. The
    optional :meth:`gaussian_prior` enables the analytic KL path.
    """

    blocks: tuple[ParameterBlock, ...] = ()

    def loglik(self, theta: dict, X, y=None) -> np.ndarray:
        raise NotImplementedError

    def loglik_grad(self, theta: dict, X, y=None) -> dict:
        raise NotImplementedError

    def log_prior(self, theta: dict) -> float:
        raise NotImplementedError

    def log_prior_grad(self, theta: dict) -> dict:
        raise NotImplementedError

    def gaussian_prior(self):
        """``(mean, var)`` of a diagonal Gaussian prior, or ``None``."""
        return None

    def initial_posterior(self, rng=None) -> GaussianVariational:
        return GaussianVariational.initial(self.blocks)

    def metadata(self) -> dict:
        return {}


# -- logistic regression ------------------------------------------------------


def logreg_loglik(w, x, y):
    """``ln sigmoid(y * w.x)``; ``x`` may be a single row or a batch."""
    return log_expit(y * (np.asarray(x) @ np.asarray(w)))


def logreg_loglik_grad(w, x, y):
    x = np.asarray(x, dtype=float)
    margin = y * (x @ np.asarray(w))
    coef = np.asarray(y * expit(-margin), dtype=float)
    return coef[..., None] * x


def logreg_predict(vp: GaussianVariational, x) -> np.ndarray:
    """Probit-approximate predictive probability of class +1.

    Uses ``sigmoid(m / sqrt(1 + pi s^2 / 8))`` with ``m = mean.x`` and
    ``s^2 = sum exp(2 log_std) x^2``.
    """
    x = np.asarray(x, dtype=float)
    m = x @ vp.mean
    s2 = (x * x) @ np.exp(2.0 * vp.log_std)
    return expit(m / np.sqrt(1.0 + math.pi * s2 / 8.0))


def classification_accuracy(vp: GaussianVariational, X, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("test set is empty")
    pred = np.where(logreg_predict(vp, X) >= 0.5, 1, -1)
    return float(np.mean(pred == y))


@dataclass
class LogRegModel(ModelSpec):
    """``P(y | x, w) = sigmoid(y w.x)`` with prior ``N(prior_mean, diag(prior_var))``."""

    dimension: int
    prior_mean: np.ndarray | float = 0.0
    prior_var: np.ndarray | float = 1.0

    def __post_init__(self):
        d = self.dimension
        self.prior_mean = np.broadcast_to(np.asarray(self.prior_mean, float), (d,)).copy()
        self.prior_var = np.broadcast_to(np.asarray(self.prior_var, float), (d,)).copy()
        if np.any(self.prior_var <= 0):
            raise ValueError("prior_var must be positive")
        self.blocks = (ParameterBlock("w", d, Transform.IDENTITY),)

    def loglik(self, theta, X, y=None):
        return logreg_loglik(theta["w"], X, y)

    def loglik_grad(self, theta, X, y=None):
        return {"w": logreg_loglik_grad(theta["w"], X, y)}

    def log_prior(self, theta):
        w = theta["w"]
        return float(
            -0.5 * np.sum(_LOG_2PI + np.log(self.prior_var) + (w - self.prior_mean) ** 2 / self.prior_var)
        )

    def log_prior_grad(self, theta):
        return {"w": -(theta["w"] - self.prior_mean) / self.prior_var}

    def gaussian_prior(self):
        return self.prior_mean, self.prior_var

    def metadata(self):
        return {
            "model": "logreg",
            "dimension": self.dimension,
            "prior_mean": self.prior_mean.tolist(),
            "prior_var": self.prior_var.tolist(),
        }


# -- Gaussian mixture -----------------------------------------------------------


def _component_log_joint(pi, mu, tau, X):
    """``ln pi_k + ln N(x; mu_k, tau_k I)`` for each row and component, ``(B, K)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mu = np.asarray(mu, dtype=float)
    log_tau = np.log(tau)
    D = X.shape[1]
    sq = ((X[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    return log_pi - 0.5 * D * (_LOG_2PI + log_tau) - sq / (2.0 * tau), sq


def gmm_loglik(pi, mu, tau, x):
    """Log density of a spherical Gaussian mixture with covariances ``tau_k I``."""
    single = np.ndim(x) == 1
    log_joint, _ = _component_log_joint(pi, mu, tau, x)
    out = logsumexp(log_joint, axis=1)
    return float(out[0]) if single else out


def gmm_loglik_grad(pi, mu, tau, x):
    """Gradients of :func:`gmm_loglik` w.r.t. ``(pi, mu, tau)`` in constrained space.

    Returns a tuple ``(d_pi, d_mu, d_tau)`` with shapes ``(B, K)``, ``(B, K, D)``
    and ``(B, K)`` (leading axis dropped for a single example).
    """
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    pi, mu, tau = np.asarray(pi, float), np.asarray(mu, float), np.asarray(tau, float)
    D = X.shape[1]
    log_joint, sq = _component_log_joint(pi, mu, tau, X)
    resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    d_pi = resp / pi
    d_mu = resp[:, :, None] * (X[:, None, :] - mu[None]) / tau[None, :, None]
    d_tau = resp * (sq / (2.0 * tau**2) - D / (2.0 * tau))
    if single:
        return d_pi[0], d_mu[0], d_tau[0]
    return d_pi, d_mu, d_tau


@dataclass
class GmmModel(ModelSpec):
    """Mixture of ``K`` spherical Gaussians with the latent assignments summed out.

    Priors: ``pi ~ Dir(alpha)``, ``mu_k ~ N(0, I)``, ``tau_k ~ Inv-Gamma(1, 1)``.
    Blocks: ``pi`` (anchored softmax, width ``K - 1``), ``mu`` (identity,
    ``K * D``), ``tau`` (log, ``K``).
    """

    components: int
    dimension: int
    dirichlet_alpha: float = 1.0
    tau_shape: float = 1.0
    tau_rate: float = 1.0

    def __post_init__(self):
        if self.components < 1:
            raise ValueError("need at least one component")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be positive")
        K, D = self.components, self.dimension
        blocks = []
        if K > 1:
            blocks.append(ParameterBlock("pi", K - 1, Transform.ANCHORED_SOFTMAX))
        blocks += [
            ParameterBlock("mu", K * D, Transform.IDENTITY),
            ParameterBlock("tau", K, Transform.LOG),
        ]
        self.blocks = tuple(blocks)

    def unpack(self, theta):
        K, D = self.components, self.dimension
        pi = theta["pi"] if K > 1 else np.ones(1)
        return pi, np.asarray(theta["mu"]).reshape(K, D), np.asarray(theta["tau"])

    def loglik(self, theta, X, y=None):
        return gmm_loglik(*self.unpack(theta), np.atleast_2d(X))

    def loglik_grad(self, theta, X, y=None):
        d_pi, d_mu, d_tau = gmm_loglik_grad(*self.unpack(theta), np.atleast_2d(X))
        out = {"mu": d_mu.reshape(d_mu.shape[0], -1), "tau": d_tau}
        if self.components > 1:
            out["pi"] = d_pi
        return out

    def _check_domain(self, pi, tau):
        if np.any(tau <= 0):
            raise ValueError("tau must be positive")
        if np.any(pi < -_SIMPLEX_TOL) or abs(pi.sum() - 1.0) > _SIMPLEX_TOL * max(1, pi.size):
            raise ValueError("pi must lie on the probability simplex")

    def log_prior(self, theta):
        pi, mu, tau = self.unpack(theta)
        self._check_domain(pi, tau)
        K, D, a = self.components, self.dimension, self.dirichlet_alpha
        lp = -0.5 * np.sum(mu**2) - 0.5 * K * D * _LOG_2PI
        shape, rate = self.tau_shape, self.tau_rate
        lp += np.sum(shape * math.log(rate) - gammaln(shape) - (shape + 1) * np.log(tau) - rate / tau)
        if K > 1:
            lp += gammaln(K * a) - K * gammaln(a) + (a - 1.0) * np.sum(np.log(pi))
        return float(lp)

    def log_prior_grad(self, theta):
        pi, mu, tau = self.unpack(theta)
        shape, rate = self.tau_shape, self.tau_rate
        out = {"mu": -mu.ravel(), "tau": -(shape + 1) / tau + rate / tau**2}
        if self.components > 1:
            out["pi"] = (self.dirichlet_alpha - 1.0) / pi
        return out

    def initial_posterior(self, rng=None, spread: float = 1.0) -> GaussianVariational:
        """Zero-centred start with component means drawn from ``N(0, spread^2 I)``.

        Identical component means would receive identical gradients, so the
        ``mu`` block is initialised from a data-independent random draw.
        """
        rng = np.random.default_rng(rng)
        vp = GaussianVariational.initial(self.blocks)
        sl = vp.block_slices()["mu"]
        vp.mean[sl] = spread * rng.standard_normal(sl.stop - sl.start)
        return vp

    def metadata(self):
        return {
            "model": "gmm",
            "components": self.components,
            "dimension": self.dimension,
            "dirichlet_alpha": self.dirichlet_alpha,
            "tau_prior": [self.tau_shape, self.tau_rate],
            "simplex_transform": "anchored_softmax with log-Jacobian correction",
        }


def log_prior_and_jacobian(model: ModelSpec, theta_constrained: dict, log_jacobian: float) -> float:
    """Log prior at constrained values plus the change-of-variables term."""
    return model.log_prior(theta_constrained) + float(log_jacobian)


def gmm_predictive_likelihood(
    vp: GaussianVariational, model: GmmModel, X_test, n_samples: int = 1000, rng=None
) -> float:
    """Mean over test rows of ``log (1/S) sum_s p(x | theta_s)``, ``theta_s ~ q``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return float(np.mean(gmm_predictive_loglik_rows(vp, model, X_test, n_samples, rng)))


def gmm_predictive_loglik_rows(vp, model, X_test, n_samples=1000, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    zs = rng.standard_normal((n_samples, vp.dim))
    ll = np.empty((n_samples, X_test.shape[0]))
    for s, z in enumerate(zs):
        ll[s] = model.loglik(sample_reparam(vp, z).theta_constrained, X_test)
    return logsumexp(ll, axis=0) - math.log(n_samples)
