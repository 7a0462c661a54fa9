"""Differentially private doubly stochastic variational inference.

Each iteration Poisson-samples a mini batch, computes per-example ELBO
gradients, clips each to norm ``clip``, sums them, adds Gaussian noise of
std ``2 * clip * noise_multiplier`` per coordinate and takes an AdaGrad
ascent step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .accounting import MechanismParams, PrivacyReport
from .variational import GaussianVariational, elbo_terms

__all__ = [
    "OptimizerConfig",
    "AdaGradState",
    "IterationRecord",
    "RunTrace",
    "NumericalOverflowError",
    "make_streams",
    "subsample",
    "clip_gradient",
    "perturb_sum",
    "adagrad_step",
    "run_dpvi",
]


class NumericalOverflowError(ArithmeticError):
    """Raised when the iterates become non-finite; carries the partial trace."""

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class OptimizerConfig:
    """Inputs of the DPVI loop.

    ``noise_multiplier = 0`` is only accepted with ``private=False``, and a
    private run needs a finite ``clip``. ``sampling="fixed"`` draws batches of
    exactly ``round(q N)`` without replacement; the accountants assume Poisson
    sampling, so such runs are flagged as not exactly accounted.
    """

    sampling_ratio: float
    steps: int
    step_size: float = 0.1
    clip: float = 5.0
    noise_multiplier: float = 1.0
    mc_samples: int = 1
    seed: int = 0
    adagrad_fuzz: float = 1e-8
    private: bool = True
    target_delta: float = 1e-5
    sampling: str = "poisson"

    def __post_init__(self):
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must be in (0, 1]")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("steps must be a non-negative integer")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be non-negative")
        if self.private and self.noise_multiplier == 0:
            raise ValueError("noise_multiplier = 0 requires private=False")
        if self.noise_multiplier > 0 and not math.isfinite(self.clip):
            raise ValueError("clip must be finite when noise is added")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not self.adagrad_fuzz > 0:
            raise ValueError("adagrad_fuzz must be positive")
        if self.sampling not in ("poisson", "fixed"):
            raise ValueError("sampling must be 'poisson' or 'fixed'")


@dataclass
class AdaGradState:
    accumulator: np.ndarray


@dataclass
class IterationRecord:
    iteration: int
    elbo_estimate: float | None
    raw_grad_norm_mean: float | None
    clip_fraction: float
    batch_size: int


@dataclass
class RunTrace:
    """Per-iteration diagnostics and the final privacy report.

    The diagnostics are computed from raw, unperturbed batch statistics and
    are not differentially private; keep them away from released outputs.
    """

    records: list[IterationRecord] = field(default_factory=list)
    privacy: PrivacyReport | None = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def privacy_dict(self) -> dict | None:
        return None if self.privacy is None else self.privacy.to_dict()

    def to_jsonl(self) -> str:
        """One JSON object per iteration; the last line also carries the privacy report."""
        lines = [asdict(r) for r in self.records]
        final = {"privacy": self.privacy_dict(), "metadata": self.metadata}
        if lines:
            lines[-1] = {**lines[-1], **final}
        else:
            lines = [final]
        return "\n".join(json.dumps(line, sort_keys=True) for line in lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for subsampling, reparametrisation draws and DP noise."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {
        name: np.random.default_rng(child)
        for name, child in zip(("subsample", "reparam", "noise"), children)
    }


def subsample(N: int, q: float, rng: np.random.Generator, fixed: bool = False) -> np.ndarray:
    """Indices of a mini batch; each index is kept independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if q == 1.0:
        return np.arange(N)
    if fixed:
        return np.sort(rng.choice(N, size=max(1, round(q * N)), replace=False))
    return np.flatnonzero(rng.random(N) < q)


def clip_gradient(g, c: float) -> np.ndarray:
    """Scale ``g`` (or each row of a matrix) to norm at most ``c``."""
    g = np.asarray(g, dtype=float)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norms / c)


def perturb_sum(clipped, c: float, sigma: float, rng: np.random.Generator, dim: int | None = None):
    """Sum of clipped gradients plus ``N(0, (2 c sigma)^2)`` noise per coordinate.

    The noise draw depends only on ``(c, sigma, rng)``; ``dim`` is needed when
    the batch is empty.
    """
    clipped = np.asarray(clipped, dtype=float)
    if dim is None:
        dim = clipped.shape[-1]
    total = clipped.reshape(-1, dim).sum(axis=0)
    if sigma > 0:
        total = total + 2.0 * c * sigma * rng.standard_normal(dim)
    return total


def adagrad_step(
    state: AdaGradState, xi, g, step_size: float, fuzz: float = 1e-8
) -> tuple[AdaGradState, np.ndarray]:
    """Ascent step ``xi + step_size * g / (sqrt(G) + fuzz)`` after ``G += g^2``."""
    g = np.asarray(g, dtype=float)
    acc = state.accumulator + g * g
    xi = np.asarray(xi, dtype=float) + step_size * g / (np.sqrt(acc) + fuzz)
    return AdaGradState(acc), xi


def run_dpvi(
    model,
    X,
    y,
    vp0: GaussianVariational,
    config: OptimizerConfig,
    hook: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[GaussianVariational, RunTrace]:
    """Fit ``vp0`` to ``(X, y)`` with DPVI.

    Args:
        model: A :class:`~dpvi.models.ModelSpec`.
        X: Training features, shape ``(N, d)``.
        y: Labels in ``{-1, +1}`` or ``None`` for unsupervised models.
        vp0: Initial variational posterior.
        config: Loop settings; ``config.seed`` fixes every random choice.
        hook: Called as ``hook(t, clipped, released)`` each iteration with the
            clipped per-example gradients and the perturbed sum.

    Returns:
        The fitted posterior and the run trace. Both accountants' budgets are
        attached to the trace for private runs.

    Raises:
        NumericalOverflowError: If the parameters become non-finite.
    """
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    if N < 1:
        raise ValueError("dataset is empty")
    if y is not None:
        y = np.asarray(y, dtype=float)
        if y.shape != (N,):
            raise ValueError("y must have one label per row of X")
    if {b.name for b in vp0.blocks} != {b.name for b in model.blocks}:
        raise ValueError("posterior blocks do not match the model")

    streams = make_streams(config.seed)
    D2 = 2 * vp0.dim
    vp = vp0
    xi = vp0.params
    state = AdaGradState(np.zeros(D2))
    trace = RunTrace(metadata={
        "sampling": config.sampling,
        "accounting_exact": config.sampling == "poisson",
        "adagrad_initial_accumulator": 0.0,
        "model": model.metadata(),
    })
    clip, sigma = config.clip, config.noise_multiplier

    for t in range(config.steps):
        idx = subsample(N, config.sampling_ratio, streams["subsample"], config.sampling == "fixed")
        zs = streams["reparam"].standard_normal((config.mc_samples, vp.dim))
        Xb = X[idx]
        yb = None if y is None else y[idx]
        values, grads, kl = elbo_terms(model, vp, Xb, yb, zs, N)

        norms = np.linalg.norm(grads, axis=1)
        clipped = clip_gradient(grads, clip) if math.isfinite(clip) else grads
        released = perturb_sum(clipped, clip, sigma, streams["noise"], dim=D2)
        if hook is not None:
            hook(t, clipped, released)
        state, xi = adagrad_step(state, xi, released, config.step_size, config.adagrad_fuzz)

        B = len(idx)
        trace.records.append(IterationRecord(
            iteration=t,
            elbo_estimate=float(N * values.mean()) if B else None,
            raw_grad_norm_mean=float(norms.mean()) if B else None,
            clip_fraction=float(np.mean(norms > clip)) if B else 0.0,
            batch_size=B,
        ))
        if not np.all(np.isfinite(xi)) or np.any(xi[vp.dim:] > 700):
            raise NumericalOverflowError(f"non-finite parameters at iteration {t}", trace)
        vp = vp.with_params(xi)

    if config.private and config.steps > 0:
        params = MechanismParams(sigma, clip, config.sampling_ratio, config.steps, N)
        trace.privacy = PrivacyReport.compute(params, config.target_delta)
    return vp, trace
