"""Privacy accounting for the iterated subsampled Gaussian mechanism.

Two independent routes are provided:

* the moments accountant, which composes per-step log moments of the
  privacy loss linearly over steps and converts to ``(epsilon, delta)`` by
  minimising over integer moment orders;
* a classical pipeline of Gaussian mechanism calibration, amplification by
  subsampling and advanced composition.

Both report guarantees under *bounded* adjacency (replace-one) for an
optimizer that clips per-example gradients to ``clip`` and adds Gaussian
noise of standard deviation ``2 * clip * noise_multiplier`` to their sum.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

__all__ = [
    "Adjacency",
    "PrivacyBudget",
    "MechanismParams",
    "MomentLedger",
    "AdjacencyMismatchError",
    "IntegrationError",
    "UnachievableBudgetError",
    "DEFAULT_LAMBDAS",
    "calibrate_gaussian_sigma",
    "basic_composition",
    "advanced_composition",
    "amplify_by_subsampling",
    "log_moment_subsampled_gaussian",
    "compute_moment_ledger",
    "accountant_epsilon",
    "bounded_dp_epsilon",
    "advanced_pipeline_epsilon",
    "calibrate_sigma_for_budget",
    "PrivacyReport",
]

DEFAULT_LAMBDAS: tuple[int, ...] = tuple(range(1, 65))

# Half-width of the integration window in units of sigma.
_WINDOW_SIGMAS = 20.0
_QUAD_EPSABS = 1e-12
_SIGMA_MAX = 1e6


class Adjacency(str, enum.Enum):
    BOUNDED = "bounded"
    UNBOUNDED = "unbounded"


class AdjacencyMismatchError(ValueError):
    """Raised when budgets with different adjacency notions are combined."""


class IntegrationError(ArithmeticError):
    """Raised when the log-moment quadrature fails to converge."""


class UnachievableBudgetError(ValueError):
    """Raised when no noise level up to the search limit meets a target."""


@dataclass(frozen=True)
class PrivacyBudget:
    """An ``(epsilon, delta)`` guarantee under an explicit adjacency notion."""

    epsilon: float
    delta: float
    adjacency: Adjacency

    def __post_init__(self):
        if not isinstance(self.adjacency, Adjacency):
            object.__setattr__(self, "adjacency", Adjacency(self.adjacency))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "adjacency": self.adjacency.value,
        }


@dataclass(frozen=True)
class MechanismParams:
    """Parameters of the clipped, subsampled, Gaussian-perturbed gradient sum.

    Attributes:
        noise_multiplier: Noise std relative to ``2 * clip`` (sigma).
        clip: Per-example gradient norm bound.
        sampling_ratio: Poisson inclusion probability ``q``.
        steps: Number of iterations ``T``.
        dataset_size: Number of training examples ``N``.
    """

    noise_multiplier: float
    clip: float
    sampling_ratio: float
    steps: int
    dataset_size: int

    def __post_init__(self):
        if not self.noise_multiplier > 0:
            raise ValueError("noise_multiplier must be positive")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must be in (0, 1]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")
        if int(self.dataset_size) != self.dataset_size or self.dataset_size < 1:
            raise ValueError("dataset_size must be a positive integer")
        # small slack so q = L / N round-trips
        if self.sampling_ratio * self.dataset_size < 1 - 1e-9:
            raise ValueError("expected batch size sampling_ratio * dataset_size must be >= 1")


@dataclass(frozen=True)
class MomentLedger:
    """Per-step log moments at a set of orders, composed over ``steps_composed``."""

    lambdas: tuple[int, ...]
    log_moments: tuple[float, ...]
    steps_composed: int = 1

    def __post_init__(self):
        if len(self.lambdas) != len(self.log_moments):
            raise ValueError("lambdas and log_moments must have equal length")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("lambdas must be strictly ascending")
        if any(lam < 1 or int(lam) != lam for lam in self.lambdas):
            raise ValueError("lambdas must be positive integers")
        if not all(math.isfinite(a) for a in self.log_moments):
            raise ValueError("log moments must be finite")
        if self.steps_composed < 1:
            raise ValueError("steps_composed must be >= 1")

    def compose(self, steps: int) -> "MomentLedger":
        """Return the same per-step moments composed over ``steps`` steps."""
        return MomentLedger(self.lambdas, self.log_moments, steps)

    def total_log_moments(self) -> np.ndarray:
        return self.steps_composed * np.asarray(self.log_moments)


def _check_delta(delta: float, name: str = "delta") -> None:
    if not 0 < delta < 1:
        raise ValueError(f"{name} must be in (0, 1), got {delta}")


def calibrate_gaussian_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Noise std of the Gaussian mechanism for an ``(epsilon, delta)`` target.

    Returns the boundary value ``sqrt(2 ln(1.25 / delta)) * sensitivity / epsilon``.
    The guarantee needs a strictly larger std, so callers add relative slack.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_delta(delta)
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    return math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity / epsilon


def basic_composition(budgets: Sequence[PrivacyBudget]) -> PrivacyBudget:
    if not budgets:
        raise ValueError("need at least one budget")
    adjacency = budgets[0].adjacency
    if any(b.adjacency != adjacency for b in budgets):
        raise AdjacencyMismatchError("cannot compose budgets with different adjacency")
    return PrivacyBudget(
        math.fsum(b.epsilon for b in budgets),
        math.fsum(b.delta for b in budgets),
        adjacency,
    )


def _eps_times_expm1(k: int, epsilon: float) -> float:
    try:
        return k * epsilon * math.expm1(epsilon)
    except OverflowError:
        return math.inf


def advanced_composition(
    epsilon: float,
    delta: float,
    k: int,
    delta_prime: float,
    adjacency: Adjacency = Adjacency.BOUNDED,
) -> PrivacyBudget:
    """k-fold composition of an ``(epsilon, delta)`` mechanism with slack ``delta_prime``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not delta >= 0:
        raise ValueError(f"delta must be non-negative, got {delta}")
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    _check_delta(delta_prime, "delta_prime")
    eps_total = math.sqrt(2.0 * k * math.log(1.0 / delta_prime)) * epsilon
    eps_total += _eps_times_expm1(k, epsilon)
    return PrivacyBudget(eps_total, k * delta + delta_prime, adjacency)


def _amplified_epsilon(epsilon: float, q: float) -> float:
    # log(1 + q (e^eps - 1)) evaluated without overflow for large eps
    if q == 1.0:
        return epsilon
    if epsilon < 1.0:
        return math.log1p(q * math.expm1(epsilon))
    return float(np.logaddexp(math.log1p(-q), math.log(q) + epsilon))


def amplify_by_subsampling(budget: PrivacyBudget, q: float) -> PrivacyBudget:
    """Guarantee of a mechanism run on a subsample drawn with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    if not q > budget.delta:
        raise ValueError(f"amplification requires q > delta (q={q}, delta={budget.delta})")
    eps_amp = min(budget.epsilon, _amplified_epsilon(budget.epsilon, q))
    return PrivacyBudget(eps_amp, q * budget.delta, budget.adjacency)


def _log_ratio(z, q: float, sigma: float):
    """log(mu(z) / mu0(z)) for the mixture mu = (1-q) N(0, s^2) + q N(1, s^2)."""
    shift = (2.0 * z - 1.0) / (2.0 * sigma * sigma)
    if q == 1.0:
        return shift
    return np.logaddexp(math.log1p(-q), math.log(q) + shift)


def _log_integrand(z, q: float, sigma: float, lam: int, under_mixture: bool):
    log_mu0 = -z * z / (2.0 * sigma * sigma) - math.log(sigma) - 0.5 * math.log(2.0 * math.pi)
    lr = _log_ratio(z, q, sigma)
    # density of the expectation: mu for E2, mu0 for E1
    return log_mu0 + (lam + 1 if under_mixture else lam) * lr


def _log_expectation(q: float, sigma: float, lam: int, under_mixture: bool) -> float:
    # The integrand is a weighted sum of Gaussians with std sigma centred at
    # 0, 1, ..., lam + 1, so the window is widened to cover the top centre.
    lo = -_WINDOW_SIGMAS * sigma
    hi = lam + 1.0 + _WINDOW_SIGMAS * sigma
    grid = np.linspace(lo, hi, int(math.ceil((hi - lo) / (sigma / 8.0))) + 1)
    values = _log_integrand(grid, q, sigma, lam, under_mixture)
    peak = float(values.max())
    z_peak = float(grid[values.argmax()])
    # drop the region contributing < e^-60 relative to the peak
    support = grid[values > peak - 60.0]
    a = max(lo, float(support.min()) - 2.0 * sigma)
    b = min(hi, float(support.max()) + 2.0 * sigma)

    def scaled(z: float) -> float:
        return math.exp(float(_log_integrand(z, q, sigma, lam, under_mixture)) - peak)

    with np.errstate(all="ignore"):
        value, abserr = integrate.quad(
            scaled, a, b, points=[z_peak], epsabs=_QUAD_EPSABS, epsrel=1e-10, limit=500,
            full_output=False,
        )
    if not (value > 0 and math.isfinite(value)) or abserr > max(1e-8 * value, 1e-10):
        raise IntegrationError(
            f"log-moment quadrature did not converge (q={q}, sigma={sigma}, lambda={lam}, "
            f"value={value}, abserr={abserr})"
        )
    return peak + math.log(value)


@functools.lru_cache(maxsize=65536)
def _log_moment_cached(q: float, sigma: float, lam: int) -> float:
    e1 = _log_expectation(q, sigma, lam, under_mixture=False)
    e2 = _log_expectation(q, sigma, lam, under_mixture=True)
    return max(e1, e2)


def log_moment_subsampled_gaussian(q: float, sigma: float, lam: int) -> float:
    """Per-step log moment of the Poisson-subsampled Gaussian mechanism.

    With ``mu0 = N(0, sigma^2)`` and ``mu = (1 - q) N(0, sigma^2) + q N(1, sigma^2)``
    this is ``log max(E_mu0[(mu/mu0)^lam], E_mu[(mu/mu0)^lam])``, computed by
    adaptive Gauss-Kronrod quadrature in log-scaled form.

    Args:
        q: Sampling probability in (0, 1].
        sigma: Noise std in units of the sensitivity.
        lam: Moment order, a positive integer.

    Raises:
        IntegrationError: If the quadrature does not converge.
    """
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if int(lam) != lam or lam < 1:
        raise ValueError(f"lambda must be a positive integer, got {lam}")
    return _log_moment_cached(float(q), float(sigma), int(lam))


def compute_moment_ledger(
    q: float, sigma: float, steps: int = 1, lambdas: Sequence[int] = DEFAULT_LAMBDAS
) -> MomentLedger:
    log_moments = tuple(log_moment_subsampled_gaussian(q, sigma, lam) for lam in lambdas)
    return MomentLedger(tuple(int(lam) for lam in lambdas), log_moments, int(steps))


def accountant_epsilon(ledger: MomentLedger, delta: float) -> float:
    """Smallest epsilon over stored orders, ``min (T alpha(lam) + ln(1/delta)) / lam``."""
    if not ledger.lambdas:
        raise ValueError("moment ledger is empty")
    _check_delta(delta)
    lambdas = np.asarray(ledger.lambdas, dtype=float)
    eps = (ledger.total_log_moments() + math.log(1.0 / delta)) / lambdas
    return float(max(eps.min(), 0.0))


def bounded_dp_epsilon(
    params: MechanismParams, delta: float, lambdas: Sequence[int] = DEFAULT_LAMBDAS
) -> PrivacyBudget:
    """Moments-accountant guarantee under bounded adjacency.

    Noise of std ``2 C sigma`` is a noise multiplier of ``2 sigma`` relative to
    the add/remove sensitivity ``C``. The unbounded guarantee at ``delta / 2`` is
    doubled because a replacement is one removal plus one addition.
    """
    _check_delta(delta)
    ledger = compute_moment_ledger(
        params.sampling_ratio, 2.0 * params.noise_multiplier, params.steps, lambdas
    )
    eps_unbounded = accountant_epsilon(ledger, delta / 2.0)
    return PrivacyBudget(2.0 * eps_unbounded, delta, Adjacency.BOUNDED)


def advanced_pipeline_epsilon(params: MechanismParams, delta_total: float) -> PrivacyBudget:
    """Gaussian mechanism + amplification + advanced composition, bounded adjacency.

    Half of ``delta_total`` is the composition slack, the other half is spread
    evenly over the ``T`` amplified per-step deltas.
    """
    _check_delta(delta_total, "delta_total")
    q, steps = params.sampling_ratio, params.steps
    delta_prime = delta_total / 2.0
    delta_step = delta_total / (2.0 * steps * q)
    if not q > delta_step:
        raise ValueError(
            f"amplification requires q > per-step delta (q={q}, delta_step={delta_step})"
        )
    # bounded sensitivity 2C against noise std 2C sigma
    eps_step = math.sqrt(2.0 * math.log(1.25 / delta_step)) / params.noise_multiplier
    step = amplify_by_subsampling(PrivacyBudget(eps_step, delta_step, Adjacency.BOUNDED), q)
    return advanced_composition(step.epsilon, step.delta, steps, delta_prime, Adjacency.BOUNDED)


def _epsilon_for(method: str, sigma: float, delta: float, q: float, steps: int) -> float:
    params = MechanismParams(sigma, 1.0, q, steps, max(1, math.ceil(1.0 / q)))
    if method == "moments":
        return bounded_dp_epsilon(params, delta).epsilon
    if method == "advanced":
        return advanced_pipeline_epsilon(params, delta).epsilon
    raise ValueError(f"unknown accounting method {method!r}")


def calibrate_sigma_for_budget(
    epsilon_target: float,
    delta: float,
    q: float,
    steps: int,
    method: str = "moments",
    rtol: float = 1e-4,
) -> float:
    """Smallest noise multiplier whose accounted epsilon is at most the target.

    Bisects on ``log(sigma)`` until the bracket is within ``rtol`` relative and
    returns the upper (feasible) end.

    Raises:
        UnachievableBudgetError: If even ``sigma = 1e6`` exceeds the target.
    """
    if not epsilon_target > 0:
        raise ValueError("epsilon_target must be positive")
    _check_delta(delta)

    def eps(sigma: float) -> float:
        return _epsilon_for(method, sigma, delta, q, steps)

    hi = _SIGMA_MAX
    if eps(hi) > epsilon_target:
        raise UnachievableBudgetError(
            f"epsilon={epsilon_target} unreachable with sigma <= {_SIGMA_MAX:g} ({method})"
        )
    # find a bracket [lo, hi] with eps(lo) > target >= eps(hi)
    hi = 1.0
    while eps(hi) > epsilon_target:
        hi *= 4.0
    lo = hi / 4.0
    while eps(lo) <= epsilon_target:
        hi = lo
        lo /= 4.0
        if lo < 1e-6:
            return hi
    while hi / lo - 1.0 > rtol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class PrivacyReport:
    """Both accountants' budgets for one mechanism, with the conventions used."""

    params: MechanismParams
    delta: float
    moments: PrivacyBudget | None = None
    advanced: PrivacyBudget | None = None
    notes: list[str] = field(default_factory=list)

    @classmethod
    def compute(cls, params: MechanismParams, delta: float) -> "PrivacyReport":
        report = cls(params, delta)
        report.moments = bounded_dp_epsilon(params, delta)
        try:
            report.advanced = advanced_pipeline_epsilon(params, delta)
        except ValueError as exc:
            report.notes.append(f"advanced pipeline unavailable: {exc}")
        report.notes.append(
            "bounded adjacency; amplification applied with Poisson sampling as in the "
            "moments analysis"
        )
        return report

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "noise_multiplier": self.params.noise_multiplier,
            "clip": self.params.clip,
            "sampling_ratio": self.params.sampling_ratio,
            "steps": self.params.steps,
            "dataset_size": self.params.dataset_size,
            "moments": None if self.moments is None else self.moments.to_dict(),
            "advanced": None if self.advanced is None else self.advanced.to_dict(),
            "notes": list(self.notes),
        }
