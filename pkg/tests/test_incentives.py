import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sensorlqg import CostCache
from sensorlqg.incentives import (
    BjQuadratic,
    PaymentScheme,
    audit_truthfulness,
    best_response_scan,
    design_bj,
    first_order_condition_terms,
    expected_payment,
    expected_pstar,
    payment_p,
    payment_p0,
    sensor_utility,
)
from sensorlqg.incentives import _expected_corrected
from sensorlqg.model import SystemSpec, effort_mapping, sigma2
from sensorlqg.montecarlo import mc_costs

from conftest import with_horizon


def make_spec(N=40, **overrides):
    base = dict(
        A=[[0.7, 0.0], [0.7, 0.7]], B=[[1.0], [0.0]], Cr=[[1.0, 0.0]], Cs=[[0.0, 1.0]],
        SigmaX0=[[1.0, 0.0], [0.0, 1.0]], SigmaW=[[1.0, 0.0], [0.0, 1.0]],
        SigmaVr=[[1.0]], Q=[[1.0, 0.0], [0.0, 1.0]], R=[[1.0]], N=N,
    )
    base.update(overrides)
    return SystemSpec(**base)


@pytest.fixture(scope="module")
def system():
    spec = make_spec(N=40)
    mapping = effort_mapping("reciprocal")
    return spec, mapping, CostCache(spec, mapping)


def quad(anchor=1.0, beta0=1.0, beta1=0.0, beta2=0.0):
    return BjQuadratic(anchor=anchor, beta0=beta0, beta1=beta1, beta2=beta2)


def corrected(a=10.0, b_e=1.0, bj=None):
    return PaymentScheme(kind="corrected_p", a=a, b_e=b_e, b_j=bj or quad())


def test_payment_p0_arithmetic():
    mk = lambda a, bj, be: PaymentScheme(kind="static_p0", a=a, b_e=be, b_j=bj)
    assert payment_p0(mk(10.0, 1.0, 0.0), realized_J=7.0, jstar=7.0) == 10.0
    assert payment_p0(mk(0.0, 0.0, 1.0), realized_J=5.0, jstar=2.0) == -5.0
    assert payment_p0(mk(10.0, 2.0, 1.0), realized_J=3.0, jstar=2.0) == 5.0


def test_payment_p_arithmetic():
    scheme = corrected(a=10.0, b_e=1.0)
    assert payment_p(scheme, realized_J=4.0, jstar=4.0, f2=2.0, sigma2_ehat=1.0, ehat=1.0) == 9.0
    scheme2 = corrected(a=10.0, b_e=0.0)
    # scaled gap of 2: a - bJ * 4
    assert payment_p(scheme2, realized_J=8.0, jstar=4.0, f2=2.0, sigma2_ehat=1.0, ehat=1.0) == 6.0
    with pytest.raises(ValueError, match="f2"):
        payment_p(scheme, realized_J=1.0, jstar=0.0, f2=0.0, sigma2_ehat=1.0, ehat=1.0)


def test_expected_payment_matches_variance_plus_pstar(system):
    # The closed form: E[p] = -bJ(ehat) Var / f2^2 + pstar(e, ehat).
    spec, mapping, cache = system
    scheme = corrected(a=50.0, b_e=2.0, bj=quad(beta0=1.5, beta1=0.4, beta2=2.0))
    rng = np.random.default_rng(3)
    for _ in range(8):
        e, ehat = rng.uniform(0.3, 3.0, size=2)
        pt = cache.point(float(ehat))
        got = expected_payment(spec, mapping, scheme, float(e), float(ehat), cache=cache)
        want = (
            -scheme.bj_at(float(ehat)) * pt.variance_at(sigma2(mapping, float(e))) / pt.f2**2
            + expected_pstar(mapping, scheme, float(e), float(ehat))
        )
        assert abs(got - want) <= 1e-9 * max(abs(got), 1.0)


def test_truthful_report_collapses_pstar(system):
    spec, mapping, cache = system
    scheme = corrected(a=20.0, b_e=3.0)
    for e in (0.5, 1.0, 2.0):
        assert_allclose(expected_pstar(mapping, scheme, e, e),
                        20.0 - 3.0 * sigma2(mapping, e), rtol=1e-15)
        pt = cache.point(e)
        got = expected_payment(spec, mapping, scheme, e, e, cache=cache)
        want = -scheme.bj_at(e) * pt.variance_at(pt.sigma2_ehat) / pt.f2**2 \
            + 20.0 - 3.0 * sigma2(mapping, e)
        assert_allclose(got, want, rtol=1e-12)


def test_f1_offset_cancels_in_corrected_payment(system):
    # Injecting a synthetic constant into the decomposition's fixed part
    # shifts E[J] and J* together and leaves the payment untouched.
    spec, mapping, cache = system
    scheme = corrected(a=100.0, b_e=1.0, bj=quad(beta0=2.0, beta1=1.0, beta2=4.0))
    pt = cache.point(1.4)
    shifted = dataclasses.replace(pt, f1=pt.f1 + 500.0, jstar=pt.jstar + 500.0)
    s2e = sigma2(mapping, 0.6)
    base = _expected_corrected(scheme, pt, s2e)
    moved = _expected_corrected(scheme, shifted, s2e)
    assert abs(moved - base) <= 1e-9 * max(abs(base), 1.0)


def test_static_expansion_exposes_f1(system):
    spec, mapping, cache = system
    scheme = PaymentScheme(kind="static_p0", a=100.0, b_e=1.0, b_j=0.5)
    pt = cache.point(1.4)
    s2e = sigma2(mapping, 0.6)
    got = expected_payment(spec, mapping, scheme, 0.6, 1.4, cache=cache)
    want = 100.0 - 0.5 * (pt.variance_at(s2e) + (s2e - pt.sigma2_ehat) ** 2 * pt.f2**2) \
        - 1.0 * (pt.f1 + s2e * pt.f2)
    assert_allclose(got, want, rtol=1e-12)


def test_monte_carlo_payment_consistency(system):
    spec, mapping, cache = system
    nsamp = 40_000
    pt = cache.point(1.0)
    costs = mc_costs(spec, mapping, 1.0, 1.0, nsamp, seed=31)

    static = PaymentScheme(kind="static_p0", a=1000.0, b_e=1.0, b_j=0.01)
    realized = static.a - static.b_j * (costs - pt.jstar) ** 2 - static.b_e * costs
    se = realized.std(ddof=1) / np.sqrt(nsamp)
    want = expected_payment(spec, mapping, static, 1.0, 1.0, cache=cache)
    assert abs(realized.mean() - want) <= 3 * se

    scheme = corrected(a=1000.0, b_e=1.0, bj=quad(beta0=2.0))
    scaled = (costs - pt.jstar) / pt.f2
    realized = scheme.a - scheme.bj_at(1.0) * scaled**2 - scheme.b_e * (scaled + pt.sigma2_ehat)
    se = realized.std(ddof=1) / np.sqrt(nsamp)
    want = expected_payment(spec, mapping, scheme, 1.0, 1.0, cache=cache)
    assert abs(realized.mean() - want) <= 3 * se


def test_utility_single_peak_matches_calculus(system):
    # With b_J = 0 and a fixed report, u(e) = const - b_e f2 / e - e peaks
    # at e = sqrt(b_e f2): a one-dimensional calculus oracle.
    spec, mapping, cache = system
    b_e = 0.37
    scheme = PaymentScheme(kind="static_p0", a=50.0, b_e=b_e, b_j=0.0)
    f2 = cache.point(1.0).f2
    e_star = np.sqrt(b_e * f2)
    grid = np.linspace(0.5 * e_star, 2.0 * e_star, 301)
    utils = [sensor_utility(spec, mapping, scheme, float(e), 1.0, cache=cache) for e in grid]
    best = grid[int(np.argmax(utils))]
    assert abs(best - e_star) <= (grid[1] - grid[0])


def test_utility_invariant_to_base_payment_shift(system):
    spec, mapping, cache = system
    lo = corrected(a=10.0, b_e=1.0)
    hi = corrected(a=25.0, b_e=1.0)
    u_lo = sensor_utility(spec, mapping, lo, 0.9, 1.1, cache=cache)
    u_hi = sensor_utility(spec, mapping, hi, 0.9, 1.1, cache=cache)
    assert_allclose(u_hi - u_lo, 15.0, rtol=1e-12)


def test_design_produces_local_max(system):
    spec, mapping, cache = system
    scheme = design_bj(spec, mapping, 1.0, a=1e3, b_e=1.0, curvature_margin=1e-3, cache=cache)
    audit = audit_truthfulness(spec, mapping, scheme, 1.0, cache=cache)
    assert audit.verdict == "local_max"
    assert audit.second_deriv <= -1e-3
    terms = first_order_condition_terms(spec, mapping, scheme, 1.0, cache=cache)
    assert terms["residual_rel"] <= 1e-6
    assert scheme.b_j.min_on_window(0.2) >= 0.0


def test_design_on_unused_channel_reports_zero_slope(cs_zero):
    spec, mapping = cs_zero
    spec = with_horizon(spec, 30)
    cache = CostCache(spec, mapping)
    scheme = design_bj(spec, mapping, 1.0, a=1e3, b_e=1.0, curvature_margin=1e-3, cache=cache)
    assert scheme.b_j.beta1 == 0.0
    audit = audit_truthfulness(spec, mapping, scheme, 1.0, cache=cache)
    assert audit.verdict == "local_max"
    assert first_order_condition_terms(spec, mapping, scheme, 1.0, cache=cache)["residual_rel"] == 0.0


def test_pstar_alone_is_local_max_for_any_convex_bj(system):
    _, mapping, _ = system
    spec_unused = make_spec(Cs=[[0.0, 0.0]], N=10)
    for bj in (quad(beta0=1.0), quad(beta0=0.5, beta1=0.3, beta2=2.0), quad(beta0=3.0, beta2=10.0)):
        scheme = PaymentScheme(kind="corrected_p", a=1e3, b_e=1.0, b_j=bj)
        audit = audit_truthfulness(spec_unused, mapping, scheme, 1.0, target="pstar")
        assert audit.verdict == "local_max"
        assert audit.second_deriv < 0


def test_static_payment_fails_truthfulness(system):
    spec, mapping, cache = system
    scheme = PaymentScheme(kind="static_p0", a=1e3, b_e=1.0, b_j=1.0)
    audit = audit_truthfulness(spec, mapping, scheme, 1.0, cache=cache)
    assert audit.verdict == "not_local_max"
    assert abs(audit.first_deriv) > 10 * (1e-4 * 1e3 + 1e-6)


def test_scan_argmax_at_anchor_for_designed_scheme(system):
    spec, mapping, cache = system
    scheme = design_bj(spec, mapping, 1.0, a=1e3, b_e=1.0, curvature_margin=1e-3, cache=cache)
    grid = np.linspace(0.8, 1.2, 41)
    scan = best_response_scan(spec, mapping, scheme, 1.0, grid, cache=cache)
    nearest = int(np.argmin(np.abs(grid - 1.0)))
    assert scan.argmax_index == nearest
    assert_allclose(scan.utility, scan.expected_payment - 1.0)


def test_scan_static_scheme_prefers_misreport(system):
    spec, mapping, cache = system
    scheme = PaymentScheme(kind="static_p0", a=1e6, b_e=0.0, b_j=10.0)
    grid = np.geomspace(0.3, 3.0, 61)
    scan = best_response_scan(spec, mapping, scheme, 1.0, grid, cache=cache)
    assert abs(scan.ehat[scan.argmax_index] - 1.0) > 0.05


def test_constant_payment_is_flat(system):
    spec, mapping, cache = system
    scheme = PaymentScheme(kind="static_p0", a=7.0, b_e=0.0, b_j=0.0)
    grid = np.geomspace(0.5, 2.0, 11)
    scan = best_response_scan(spec, mapping, scheme, 1.0, grid, cache=cache)
    assert np.all(scan.expected_payment == 7.0)


def test_scheme_validation():
    with pytest.raises(ValueError):
        PaymentScheme(kind="static_p0", a=-1.0, b_e=0.0, b_j=0.0)
    with pytest.raises(ValueError):
        PaymentScheme(kind="static_p0", a=1.0, b_e=0.0, b_j=-0.5)
    with pytest.raises(ValueError):
        PaymentScheme(kind="corrected_p", a=1.0, b_e=0.0, b_j=quad(beta0=0.0))
    with pytest.raises(ValueError):
        PaymentScheme(kind="corrected_p", a=1.0, b_e=0.0, b_j=quad(beta2=-1.0))
    with pytest.raises(ValueError):
        PaymentScheme(kind="corrected_p", a=1.0, b_e=0.0, b_j=1.0)
