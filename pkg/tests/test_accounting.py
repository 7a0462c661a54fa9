import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpvi.accounting import (
    DEFAULT_LAMBDAS,
    Adjacency,
    AdjacencyMismatchError,
    MechanismParams,
    MomentLedger,
    PrivacyBudget,
    PrivacyReport,
    UnachievableBudgetError,
    accountant_epsilon,
    advanced_composition,
    advanced_pipeline_epsilon,
    amplify_by_subsampling,
    basic_composition,
    bounded_dp_epsilon,
    calibrate_gaussian_sigma,
    calibrate_sigma_for_budget,
    compute_moment_ledger,
    log_moment_subsampled_gaussian,
)
from helpers import binomial_log_moment, trapezoid_log_moment


# -- Gaussian mechanism and composition ------------------------------------------------


def test_gaussian_sigma_golden():
    assert calibrate_gaussian_sigma(1, 1e-5, 1) == pytest.approx(math.sqrt(2 * math.log(125000)), abs=1e-12)
    assert calibrate_gaussian_sigma(1, 1e-5, 1) == pytest.approx(4.8448, abs=1e-3)


def test_gaussian_sigma_log_term_collapses():
    assert calibrate_gaussian_sigma(1, 1.25 / math.e, 1) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_gaussian_sigma_depends_on_ratio_only():
    assert calibrate_gaussian_sigma(2, 1e-5, 2) == pytest.approx(calibrate_gaussian_sigma(1, 1e-5, 1), rel=1e-14)


@pytest.mark.parametrize("eps,delta,sens", [(0, 1e-5, 1), (-1, 1e-5, 1), (1, 1, 1), (1, 1.5, 1), (1, 1e-5, 0)])
def test_gaussian_sigma_domain(eps, delta, sens):
    with pytest.raises(ValueError):
        calibrate_gaussian_sigma(eps, delta, sens)


def test_basic_composition_examples():
    b = PrivacyBudget(0.1, 1e-6, Adjacency.BOUNDED)
    out = basic_composition([b, b, b])
    assert out.epsilon == pytest.approx(0.3)
    assert out.delta == pytest.approx(3e-6)
    assert basic_composition([b]) == b
    pure = basic_composition([PrivacyBudget(0.5, 0, "bounded"), PrivacyBudget(0.25, 0, "bounded")])
    assert (pure.epsilon, pure.delta) == (0.75, 0)


def test_basic_composition_rejects_mixed_adjacency():
    with pytest.raises(AdjacencyMismatchError):
        basic_composition([PrivacyBudget(1, 0, "bounded"), PrivacyBudget(1, 0, "unbounded")])
    with pytest.raises(ValueError):
        basic_composition([])


def test_budget_validation():
    with pytest.raises(ValueError):
        PrivacyBudget(-0.1, 0, "bounded")
    with pytest.raises(ValueError):
        PrivacyBudget(1, 1.0, "bounded")
    with pytest.raises(ValueError):
        PrivacyBudget(1, 0, "sideways")


def test_advanced_composition_golden():
    out = advanced_composition(0.1, 0, 100, 1e-6)
    direct = math.sqrt(200 * math.log(1e6)) * 0.1 + 100 * 0.1 * (math.exp(0.1) - 1)
    assert out.epsilon == pytest.approx(direct, rel=1e-14)
    assert out.epsilon == pytest.approx(6.3082, abs=1e-3)
    assert out.delta == pytest.approx(1e-6)


def test_advanced_composition_single_step():
    eps, delta, dp = 0.3, 1e-7, 1e-5
    out = advanced_composition(eps, delta, 1, dp)
    assert out.epsilon == pytest.approx(math.sqrt(2 * math.log(1 / dp)) * eps + eps * math.expm1(eps))
    assert out.delta == pytest.approx(delta + dp)


def test_advanced_composition_first_order_expansion():
    eps, k = 0.01, 100
    out = advanced_composition(eps, 0, k, 1e-5)
    approx = math.sqrt(2 * k * math.log(1e5)) * eps + k * eps**2
    assert out.epsilon == pytest.approx(0.490, abs=1e-3)
    assert abs(out.epsilon - approx) <= k * eps**3


@pytest.mark.parametrize("dp", [0, 1, -1e-3])
def test_advanced_composition_domain(dp):
    with pytest.raises(ValueError):
        advanced_composition(0.1, 0, 10, dp)


def test_amplification_golden():
    out = amplify_by_subsampling(PrivacyBudget(1, 1e-5, "bounded"), 0.01)
    assert out.epsilon == pytest.approx(math.log(1 + 0.01 * (math.e - 1)), rel=1e-14)
    assert out.epsilon == pytest.approx(0.017037, abs=1e-5)
    assert out.delta == pytest.approx(1e-7)


def test_amplification_identity_at_full_sampling():
    b = PrivacyBudget(0.7, 1e-6, "bounded")
    assert amplify_by_subsampling(b, 1.0) == b


def test_amplification_small_epsilon_is_linear():
    out = amplify_by_subsampling(PrivacyBudget(0.001, 0, "bounded"), 0.1)
    assert out.epsilon == pytest.approx(1e-4, rel=0.01)


def test_amplification_precondition():
    with pytest.raises(ValueError):
        amplify_by_subsampling(PrivacyBudget(1, 0.1, "bounded"), 0.05)


def test_amplification_large_epsilon_does_not_overflow():
    out = amplify_by_subsampling(PrivacyBudget(5000, 0, "bounded"), 0.5)
    assert out.epsilon == pytest.approx(5000 + math.log(0.5), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 50), st.floats(1e-4, 1.0))
def test_amplification_never_hurts(eps, q):
    out = amplify_by_subsampling(PrivacyBudget(eps, 0, "bounded"), q)
    assert out.epsilon <= eps
    if q <= 0.999:  # closer to 1 the gap falls below float resolution
        assert out.epsilon < eps


# -- log moments -------------------------------------------------------------------------------


def test_oracles_agree_with_each_other():
    for q, sigma, lam in [(0.01, 4, 8), (0.1, 1, 20), (0.05, 2, 32)]:
        assert trapezoid_log_moment(q, sigma, lam) == pytest.approx(binomial_log_moment(q, sigma, lam), abs=1e-9)


def test_log_moment_spec_point_against_trapezoid():
    assert log_moment_subsampled_gaussian(0.01, 4, 8) == pytest.approx(
        trapezoid_log_moment(0.01, 4, 8), abs=1e-6
    )


@pytest.mark.parametrize("q", [0.01, 0.05, 0.1])
@pytest.mark.parametrize("sigma", [1.0, 2.0, 4.0])
def test_log_moment_matches_binomial_closed_form(q, sigma):
    for lam in range(1, 33):
        assert log_moment_subsampled_gaussian(q, sigma, lam) == pytest.approx(
            binomial_log_moment(q, sigma, lam), abs=1e-6
        ), lam


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0, 10.0])
def test_log_moment_full_sampling_closed_form(sigma):
    for lam in DEFAULT_LAMBDAS:
        assert log_moment_subsampled_gaussian(1.0, sigma, lam) == pytest.approx(
            lam * (lam + 1) / (2 * sigma**2), abs=1e-9
        )


def test_log_moment_vanishes_without_sampling():
    assert log_moment_subsampled_gaussian(1e-9, 2.0, 1) == pytest.approx(0, abs=1e-8)


@pytest.mark.parametrize("args", [(0, 1, 1), (1.5, 1, 1), (0.1, 0, 1), (0.1, 1, 0), (0.1, 1, 1.5)])
def test_log_moment_domain(args):
    with pytest.raises(ValueError):
        log_moment_subsampled_gaussian(*args)


def test_ledger_composition_is_linear():
    ledger = compute_moment_ledger(0.02, 3.0, steps=1)
    composed = ledger.compose(250)
    np.testing.assert_allclose(composed.total_log_moments(), 250 * np.asarray(ledger.log_moments), rtol=1e-15)


def test_ledger_validation():
    with pytest.raises(ValueError):
        MomentLedger((2, 1), (0.1, 0.2))
    with pytest.raises(ValueError):
        MomentLedger((1,), (math.inf,))
    with pytest.raises(ValueError):
        accountant_epsilon(MomentLedger((), ()), 1e-5)


def test_accountant_epsilon_closed_form_scan():
    ledger = compute_moment_ledger(1.0, 2.0, steps=1)
    expected = min((lam * (lam + 1) / 8 + math.log(1e5)) / lam for lam in range(1, 65))
    assert accountant_epsilon(ledger, 1e-5) == pytest.approx(expected, rel=1e-10)


def test_accountant_epsilon_monotone_in_steps_and_delta():
    ledger = compute_moment_ledger(0.05, 2.0, steps=100)
    assert accountant_epsilon(ledger.compose(200), 1e-5) > accountant_epsilon(ledger, 1e-5)
    assert accountant_epsilon(ledger, 1e-3) <= accountant_epsilon(ledger, 1e-5)


def test_bounded_epsilon_full_sampling_closed_form():
    sigma, delta = 1.5, 1e-5
    params = MechanismParams(sigma, 1.0, 1.0, 1, 10)
    expected = 2 * min(
        (lam * (lam + 1) / (2 * (2 * sigma) ** 2) + math.log(2 / delta)) / lam for lam in range(1, 65)
    )
    out = bounded_dp_epsilon(params, delta)
    assert out.epsilon == pytest.approx(expected, rel=1e-10)
    assert out.adjacency is Adjacency.BOUNDED and out.delta == delta


def test_bounded_epsilon_vanishes_with_huge_noise():
    params, delta = MechanismParams(1e5, 1.0, 0.1, 10, 100), 1e-5
    # with lambda <= 64 the bound cannot drop below 2 ln(2/delta) / 64
    floor = 2 * math.log(2 / delta) / 64
    assert bounded_dp_epsilon(params, delta).epsilon == pytest.approx(floor, rel=1e-6)
    wide = bounded_dp_epsilon(params, delta, lambdas=[2**k for k in range(13)])
    assert wide.epsilon < 1e-2


def test_bounded_epsilon_scales_as_sqrt_steps():
    q, sigma = 0.01, 2.0
    steps = np.array([100, 300, 1000, 3000, 10000])
    eps = [bounded_dp_epsilon(MechanismParams(sigma, 1.0, q, int(t), 100), 1e-5).epsilon for t in steps]
    slope = np.polyfit(np.log(steps), np.log(eps), 1)[0]
    assert 0.4 <= slope <= 0.6


def test_advanced_pipeline_degenerate_case():
    sigma, delta = 3.0, 1e-4
    out = advanced_pipeline_epsilon(MechanismParams(sigma, 1.0, 1.0, 1, 10), delta)
    eps0 = math.sqrt(2 * math.log(1.25 / (delta / 2))) / sigma
    assert out.epsilon == pytest.approx(math.sqrt(2 * math.log(2 / delta)) * eps0 + eps0 * math.expm1(eps0))
    assert out.delta == pytest.approx(delta)


def test_advanced_pipeline_is_reproducible():
    params = MechanismParams(4.0, 1.0, 0.05, 1000, 100)
    a, b = advanced_pipeline_epsilon(params, 1e-3), advanced_pipeline_epsilon(params, 1e-3)
    assert math.isfinite(a.epsilon) and abs(a.epsilon - b.epsilon) <= 1e-6


def test_advanced_pipeline_precondition():
    with pytest.raises(ValueError):
        advanced_pipeline_epsilon(MechanismParams(1.0, 1.0, 1e-3, 1, 1000), 0.5)


def test_mechanism_params_validation():
    with pytest.raises(ValueError):
        MechanismParams(1.0, 1.0, 0.001, 10, 100)  # q N < 1
    with pytest.raises(ValueError):
        MechanismParams(1.0, 1.0, 0.1, 0, 100)
    with pytest.raises(ValueError):
        MechanismParams(0.0, 1.0, 0.1, 1, 100)


@pytest.mark.parametrize("q", [0.005, 0.02, 0.05])
@pytest.mark.parametrize("sigma", [1.0, 2.0, 4.0])
def test_moments_tighter_than_advanced(q, sigma):
    for steps in (1000, 2000):
        for delta in (1e-3, 1e-5):
            params = MechanismParams(sigma, 1.0, q, steps, 1000)
            assert bounded_dp_epsilon(params, delta).epsilon <= advanced_pipeline_epsilon(params, delta).epsilon


@settings(max_examples=25, deadline=None)
@given(
    q=st.sampled_from([0.01, 0.03, 0.1]),
    sigma=st.sampled_from([1.0, 2.0, 5.0]),
    steps=st.integers(10, 3000),
    delta=st.sampled_from([1e-3, 1e-5, 1e-7]),
)
def test_accountant_monotonicity(q, sigma, steps, delta):
    def eps(q=q, sigma=sigma, steps=steps, delta=delta):
        return bounded_dp_epsilon(MechanismParams(sigma, 1.0, q, steps, 1000), delta).epsilon

    base = eps()
    assert eps(steps=steps + 100) >= base
    assert eps(q=q * 1.5) >= base
    assert eps(sigma=sigma * 1.5) <= base
    assert eps(delta=delta * 10) <= base


# -- calibration ---------------------------------------------------------------------------------


@pytest.mark.parametrize("target", [0.5, 1.0, 2.0])
def test_calibration_round_trip(target):
    q, steps, delta = 0.05, 1000, 1e-5
    sigma = calibrate_sigma_for_budget(target, delta, q, steps, "moments")
    got = bounded_dp_epsilon(MechanismParams(sigma, 1.0, q, steps, 20), delta).epsilon
    assert got <= target
    assert target - got < 1e-3 * target


def test_calibration_monotone_and_ordered():
    q, steps, delta = 0.02, 500, 1e-5
    s1 = calibrate_sigma_for_budget(1.0, delta, q, steps, "moments")
    s_half = calibrate_sigma_for_budget(0.5, delta, q, steps, "moments")
    assert s_half > s1
    for target in (0.5, 1.0, 4.0):
        assert calibrate_sigma_for_budget(target, delta, q, steps, "advanced") >= calibrate_sigma_for_budget(
            target, delta, q, steps, "moments"
        )


def test_calibration_unachievable():
    with pytest.raises(UnachievableBudgetError):
        calibrate_sigma_for_budget(1e-9, 1e-5, 1.0, 1, "advanced")
    with pytest.raises(ValueError):
        calibrate_sigma_for_budget(1.0, 1e-5, 0.1, 10, "renyi")


def test_privacy_report_has_both_methods():
    report = PrivacyReport.compute(MechanismParams(2.0, 5.0, 0.05, 100, 4000), 1e-5)
    d = report.to_dict()
    assert d["moments"]["epsilon"] <= d["advanced"]["epsilon"]
    assert d["moments"]["adjacency"] == "bounded"
    assert any("Poisson" in n for n in d["notes"])


def test_determinism_of_pure_functions():
    assert log_moment_subsampled_gaussian(0.03, 1.7, 11) == log_moment_subsampled_gaussian(0.03, 1.7, 11)
    t0 = time.perf_counter()
    calibrate_gaussian_sigma(1, 1e-5, 1)
    advanced_composition(0.1, 0, 100, 1e-6)
    amplify_by_subsampling(PrivacyBudget(1, 1e-5, "bounded"), 0.01)
    assert time.perf_counter() - t0 < 1.0
