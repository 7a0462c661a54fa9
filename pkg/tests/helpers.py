"""Shared oracles for the test-suite."""

import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammaln, logsumexp

from dpvi.models import GmmModel, LogRegModel
from dpvi.variational import GaussianVariational, elbo_contribution


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        grad[j] = (f(x + step) - f(x - step)) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def elbo_fd_gradient(model, vp, x, zs, N, y=None, h=1e-5):
    def f(xi):
        return elbo_contribution(model, vp.with_params(xi), x, zs, N, y)

    return central_difference(f, vp.params, h)


def random_logreg_case(rng, d=None):
    d = d or int(rng.integers(1, 6))
    model = LogRegModel(d, rng.normal(size=d), rng.uniform(0.5, 2.0, size=d))
    vp = GaussianVariational(rng.normal(size=d), rng.uniform(-2, 0.5, size=d), model.blocks)
    x = rng.normal(size=d)
    y = float(rng.choice([-1, 1]))
    return model, vp, x, y


def random_gmm_case(rng, K=None, D=None):
    K = K or int(rng.integers(1, 5))
    D = D or int(rng.integers(1, 4))
    model = GmmModel(K, D, dirichlet_alpha=float(rng.uniform(0.5, 3.0)))
    dim = sum(b.width for b in model.blocks)
    vp = GaussianVariational(rng.normal(scale=0.7, size=dim), rng.uniform(-2.5, -0.5, size=dim), model.blocks)
    x = rng.normal(scale=1.5, size=D)
    return model, vp, x


def binomial_log_moment(q, sigma, lam):
    """Closed form of both expectations by expanding the mixture binomially.

    E_mu0[(mu/mu0)^n] = sum_k C(n, k) (1-q)^(n-k) q^k exp(k(k-1) / (2 sigma^2)).
    """

    def log_e(n):
        k = np.arange(n + 1)
        log_binom = gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
        with np.errstate(divide="ignore"):
            terms = log_binom + (n - k) * np.log1p(-q) + k * np.log(q)
        terms = np.where(k == n, k * np.log(q), terms) if q == 1 else terms
        return logsumexp(terms + k * (k - 1) / (2 * sigma**2))

    return max(log_e(lam), log_e(lam + 1))


def trapezoid_log_moment(q, sigma, lam, points_per_sigma=400):
    """Brute-force fine-grid trapezoid rule over a window covering every bump."""
    lo, hi = -30 * sigma, lam + 1 + 30 * sigma
    z = np.linspace(lo, hi, int((hi - lo) / sigma * points_per_sigma) + 1)
    log_mu0 = -z**2 / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi))
    log_mu1 = -(z - 1) ** 2 / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi))
    log_mu = np.logaddexp(math.log1p(-q) + log_mu0, math.log(q) + log_mu1) if q < 1 else log_mu1
    ratio = log_mu - log_mu0

    def log_integral(log_f):
        peak = log_f.max()
        return peak + math.log(trapezoid(np.exp(log_f - peak), z))

    e1 = log_integral(log_mu0 + lam * ratio)
    e2 = log_integral(log_mu + lam * ratio)
    return max(e1, e2)
