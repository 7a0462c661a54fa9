"""Mean-field Gaussian variational posteriors and per-example ELBO terms.

Parameters live in an unconstrained space where the approximation is a
diagonal Gaussian ``N(mean, exp(2 * log_std))``. Constrained model
parameters are obtained blockwise through a transform (identity, ``exp`` or
an anchored softmax onto the simplex), and the ELBO accounts for the
change of variables through the log-Jacobian.

The ELBO splits over examples as ``sum_i [<ln p(x_i | theta)> - KL / N]``.
Everything here evaluates those per-example terms and their gradients with
respect to ``(mean, log_std)`` for a fixed set of standard normal draws.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.special import logsumexp

if TYPE_CHECKING:
    from .models import ModelSpec

__all__ = [
    "Transform",
    "ParameterBlock",
    "GaussianVariational",
    "ReparamSample",
    "transform_forward",
    "transform_vjp",
    "log_jacobian_grad",
    "sample_reparam",
    "entropy",
    "gaussian_kl",
    "elbo_terms",
    "elbo_contribution",
    "elbo_gradient_contribution",
    "elbo_estimate",
]

_LOG_FLOAT_MAX = math.log(np.finfo(float).max)
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"
    ANCHORED_SOFTMAX = "anchored_softmax"


@dataclass(frozen=True)
class ParameterBlock:
    """A named slice of the unconstrained vector and its constraining transform.

    An ``anchored_softmax`` block of width ``K - 1`` maps onto a ``K``-simplex
    by appending a fixed zero logit.
    """

    name: str
    width: int
    transform: Transform = Transform.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "transform", Transform(self.transform))
        if self.width < 1:
            raise ValueError(f"block {self.name!r} must have positive width")

    @property
    def constrained_size(self) -> int:
        if self.transform is Transform.ANCHORED_SOFTMAX:
            return self.width + 1
        return self.width


def transform_forward(block: ParameterBlock, u) -> tuple[np.ndarray, float]:
    """Map unconstrained ``u`` to the block's constrained value.

    Returns:
        The constrained value and ``log |det d value / d u|``.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (block.width,):
        raise ValueError(f"block {block.name!r} expects shape ({block.width},), got {u.shape}")
    if block.transform is Transform.IDENTITY:
        return u.copy(), 0.0
    if block.transform is Transform.LOG:
        return np.exp(u), float(u.sum())
    logits = np.append(u, 0.0)
    log_pi = logits - logsumexp(logits)
    return np.exp(log_pi), float(log_pi.sum())


def transform_vjp(block: ParameterBlock, u, value, grad_value) -> np.ndarray:
    """Pull a gradient w.r.t. the constrained value back to ``u``.

    ``grad_value`` may carry leading batch dimensions.
    """
    grad_value = np.asarray(grad_value, dtype=float)
    if block.transform is Transform.IDENTITY:
        return grad_value
    if block.transform is Transform.LOG:
        return grad_value * value
    # d pi_k / d u_j = pi_k (delta_kj - pi_j), j < K
    inner = (grad_value * value).sum(axis=-1, keepdims=True)
    return value[:-1] * (grad_value[..., :-1] - inner)


def log_jacobian_grad(block: ParameterBlock, u, value) -> np.ndarray:
    if block.transform is Transform.IDENTITY:
        return np.zeros(block.width)
    if block.transform is Transform.LOG:
        return np.ones(block.width)
    k = block.constrained_size
    return 1.0 - k * value[:-1]


@dataclass
class GaussianVariational:
    """Diagonal Gaussian over the concatenated unconstrained block vector."""

    mean: np.ndarray
    log_std: np.ndarray
    blocks: tuple[ParameterBlock, ...]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        self.blocks = tuple(self.blocks)
        width = sum(b.width for b in self.blocks)
        if self.mean.shape != (width,) or self.log_std.shape != (width,):
            raise ValueError(
                f"mean and log_std must both have length {width} "
                f"(got {self.mean.shape}, {self.log_std.shape})"
            )
        # exp overflows past log(float max) ~ 709.78
        if not np.all(np.isfinite(self.log_std) & (self.log_std < _LOG_FLOAT_MAX)):
            raise ValueError("exp(log_std) must be finite")

    @classmethod
    def initial(
        cls,
        blocks: Sequence[ParameterBlock],
        mean: float | np.ndarray = 0.0,
        log_std: float | np.ndarray = -1.0,
    ) -> "GaussianVariational":
        dim = sum(b.width for b in blocks)
        return cls(
            np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy(),
            np.broadcast_to(np.asarray(log_std, dtype=float), (dim,)).copy(),
            tuple(blocks),
        )

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def params(self) -> np.ndarray:
        """Flat optimisation vector ``[mean, log_std]``."""
        return np.concatenate([self.mean, self.log_std])

    def with_params(self, xi: np.ndarray) -> "GaussianVariational":
        xi = np.asarray(xi, dtype=float)
        return GaussianVariational(xi[: self.dim].copy(), xi[self.dim :].copy(), self.blocks)

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for block in self.blocks:
            out[block.name] = slice(start, start + block.width)
            start += block.width
        return out

    @property
    def is_identity(self) -> bool:
        return all(b.transform is Transform.IDENTITY for b in self.blocks)


@dataclass(frozen=True)
class ReparamSample:
    z: np.ndarray
    theta_unconstrained: np.ndarray
    theta_constrained: dict[str, np.ndarray]
    log_jacobian: float


def sample_reparam(vp: GaussianVariational, z) -> ReparamSample:
    """Deterministic reparametrised draw ``mean + exp(log_std) * z`` pushed through the blocks."""
    z = np.asarray(z, dtype=float)
    if z.shape != (vp.dim,):
        raise ValueError(f"z must have shape ({vp.dim},), got {z.shape}")
    theta_u = vp.mean + vp.std * z
    constrained, log_jac = {}, 0.0
    for block, sl in zip(vp.blocks, vp.block_slices().values()):
        value, lj = transform_forward(block, theta_u[sl])
        constrained[block.name] = value
        log_jac += lj
    return ReparamSample(z, theta_u, constrained, log_jac)


def entropy(vp: GaussianVariational) -> float:
    return float(vp.log_std.sum()) + vp.dim * _HALF_LOG_2PIE


def gaussian_kl(vp: GaussianVariational, prior_mean, prior_var) -> float:
    """``KL(q || N(prior_mean, diag(prior_var)))`` for a diagonal Gaussian ``q``."""
    prior_mean = np.asarray(prior_mean, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    if prior_mean.shape != (vp.dim,) or prior_var.shape != (vp.dim,):
        raise ValueError(f"prior dimensions must be ({vp.dim},)")
    var_q = np.exp(2.0 * vp.log_std)
    ratio = var_q / prior_var
    return float(
        0.5 * np.sum(ratio + (vp.mean - prior_mean) ** 2 / prior_var - 1.0 - np.log(ratio))
    )


def _gaussian_kl_grad(vp: GaussianVariational, prior_mean, prior_var) -> np.ndarray:
    var_q = np.exp(2.0 * vp.log_std)
    return np.concatenate([(vp.mean - prior_mean) / prior_var, var_q / prior_var - 1.0])


def _analytic_prior(model: "ModelSpec", vp: GaussianVariational):
    if not vp.is_identity:
        return None
    return model.gaussian_prior()


def _pullback(vp: GaussianVariational, sample: ReparamSample, grads: dict) -> np.ndarray:
    """Concatenate per-block VJPs of constrained-space gradients."""
    parts = []
    for block, sl in zip(vp.blocks, vp.block_slices().values()):
        parts.append(
            transform_vjp(
                block, sample.theta_unconstrained[sl],
                sample.theta_constrained[block.name], grads[block.name],
            )
        )
    return np.concatenate(parts, axis=-1)


def _log_jacobian_pullback(vp: GaussianVariational, sample: ReparamSample) -> np.ndarray:
    return np.concatenate([
        log_jacobian_grad(block, sample.theta_unconstrained[sl], sample.theta_constrained[block.name])
        for block, sl in zip(vp.blocks, vp.block_slices().values())
    ])


def _as_batch(X, y):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
        if y is not None:
            y = np.atleast_1d(np.asarray(y, dtype=float))
    return X, y, single


def elbo_terms(
    model: "ModelSpec",
    vp: GaussianVariational,
    X,
    y,
    zs,
    N: int,
    compute_grad: bool = True,
) -> tuple[np.ndarray, np.ndarray | None, float]:
    """Per-example ELBO terms for a batch and, optionally, their gradients.

    Args:
        model: Model providing log-likelihoods, priors and their gradients.
        vp: Current variational posterior.
        X: Batch features, shape ``(B, d)``.
        y: Batch labels or ``None``.
        zs: Standard normal draws, shape ``(S, D)``, shared by all examples.
        N: Training set size; each term carries ``KL / N``.
        compute_grad: Whether to build the ``(B, 2D)`` gradient matrix.

    Returns:
        ``(values, grads, kl)``: per-example terms ``(B,)``, per-example
        gradients w.r.t. ``[mean, log_std]`` or ``None``, and the KL estimate.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    if zs.shape[0] == 0:
        raise ValueError("need at least one z sample")
    X = np.asarray(X, dtype=float)
    B, D, S = X.shape[0], vp.dim, zs.shape[0]
    std = vp.std

    loglik = np.zeros(B)
    grads = np.zeros((B, 2 * D)) if compute_grad else None
    prior = _analytic_prior(model, vp)
    # MC part of the KL: -<ln p(theta) + log_jac>, entropy handled analytically
    neg_cross = 0.0
    neg_cross_grad = np.zeros(2 * D)

    for z in zs:
        sample = sample_reparam(vp, z)
        theta = sample.theta_constrained
        if B:
            loglik += model.loglik(theta, X, y)
        if prior is None:
            neg_cross -= model.log_prior(theta) + sample.log_jacobian
        if not compute_grad:
            continue
        if B:
            g_u = _pullback(vp, sample, model.loglik_grad(theta, X, y))
            grads[:, :D] += g_u
            grads[:, D:] += g_u * (z * std)
        if prior is None:
            g_prior = _pullback(vp, sample, model.log_prior_grad(theta))
            g_prior = g_prior + _log_jacobian_pullback(vp, sample)
            neg_cross_grad[:D] -= g_prior
            neg_cross_grad[D:] -= g_prior * (z * std)

    loglik /= S
    if prior is None:
        kl = neg_cross / S - entropy(vp)
    else:
        kl = gaussian_kl(vp, *prior)
    values = loglik - kl / N

    if compute_grad:
        grads /= S
        if prior is None:
            kl_grad = neg_cross_grad / S
            kl_grad[D:] -= 1.0  # entropy gradient w.r.t. log_std
        else:
            kl_grad = _gaussian_kl_grad(vp, *prior)
        grads -= kl_grad / N
    return values, grads, kl


def elbo_contribution(model: "ModelSpec", vp: GaussianVariational, x_i, zs, N: int, y_i=None):
    """Monte Carlo estimate of ``<ln p(x_i | theta)> - KL / N``.

    ``x_i`` may be a single example (returns a float) or a batch.
    """
    X, y, single = _as_batch(x_i, y_i)
    values, _, _ = elbo_terms(model, vp, X, y, zs, N, compute_grad=False)
    return float(values[0]) if single else values


def elbo_gradient_contribution(
    model: "ModelSpec", vp: GaussianVariational, x_i, zs, N: int, y_i=None
) -> np.ndarray:
    """Gradient of :func:`elbo_contribution` w.r.t. ``[mean, log_std]``."""
    X, y, single = _as_batch(x_i, y_i)
    _, grads, _ = elbo_terms(model, vp, X, y, zs, N)
    return grads[0] if single else grads


def elbo_estimate(model: "ModelSpec", vp: GaussianVariational, X, y, zs) -> float:
    """Undecomposed ELBO estimate ``sum_i <ln p(x_i | theta)> - KL`` with shared draws."""
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    X = np.asarray(X, dtype=float)
    total = 0.0
    for z in zs:
        total += float(np.sum(model.loglik(sample_reparam(vp, z).theta_constrained, X, y)))
    total /= zs.shape[0]
    prior = _analytic_prior(model, vp)
    if prior is not None:
        return total - gaussian_kl(vp, *prior)
    cross = np.mean([
        model.log_prior(s.theta_constrained) + s.log_jacobian
        for s in (sample_reparam(vp, z) for z in zs)
    ])
    return total + float(cross) + entropy(vp)
