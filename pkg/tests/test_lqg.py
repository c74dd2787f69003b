import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sensorlqg import load_config, solve_kalman, solve_lqr
from sensorlqg.model import SystemSpec, effort_mapping

from conftest import PAPER_CONFIG


def riccati_step(P, A, B, Q, R):
    """Reference backward step, written out independently of the library."""
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, Q + A.T @ P @ A + A.T @ P @ B @ K


def test_scalar_one_step_riccati():
    # Oracle: one backward step by hand for A=B=Q=R=1.
    spec = SystemSpec(A=[[1.0]], B=[[1.0]], Cr=[], Cs=[[1.0]], SigmaX0=[[1.0]],
                      SigmaW=[[1.0]], SigmaVr=[], Q=[[1.0]], R=[[1.0]], N=1)
    sol = solve_lqr(spec)
    assert_allclose(sol.K[0], [[-0.5]], atol=1e-14)
    assert_allclose(sol.P[0], [[1.5]], atol=1e-14)
    assert_allclose(sol.P[1], [[1.0]], atol=0)
    assert_array_equal(sol.K[1], [[0.0]])


def test_zero_horizon_lqr():
    spec = SystemSpec(A=[[2.0]], B=[[1.0]], Cr=[], Cs=[[1.0]], SigmaX0=[[1.0]],
                      SigmaW=[[1.0]], SigmaVr=[], Q=[[3.0]], R=[[1.0]], N=0)
    sol = solve_lqr(spec)
    assert sol.K.shape == (1, 1, 1) and sol.P.shape == (1, 1, 1)
    assert_array_equal(sol.K[0], [[0.0]])
    assert_array_equal(sol.P[0], [[3.0]])


def test_gain_plateau_matches_fixed_point():
    spec, _ = load_config(PAPER_CONFIG)
    sol = solve_lqr(spec)
    # Oracle: iterate the Riccati map to its fixed point.
    P = np.array(spec.Q)
    for _ in range(10_000):
        K, P_next = riccati_step(P, spec.A, spec.B, spec.Q, spec.R)
        if np.max(np.abs(P_next - P)) < 1e-14:
            break
        P = P_next
    K_inf, _ = riccati_step(P, spec.A, spec.B, spec.Q, spec.R)
    assert np.linalg.norm(sol.K[0] - sol.K[1]) <= 1e-9
    assert_allclose(sol.K[0], K_inf, atol=1e-9)


def test_lqr_invariants_on_paper_system():
    spec, _ = load_config(PAPER_CONFIG)
    sol = solve_lqr(spec)
    assert_array_equal(sol.P[spec.N], spec.Q)
    assert_array_equal(sol.K[spec.N], np.zeros((spec.m, spec.n)))
    for k in range(0, spec.N + 1, 25):
        lam = np.linalg.eigvalsh(sol.P[k])
        assert lam.min() > 0
    # Backward convergence: increments shrink after the initial transient.
    diffs = [np.linalg.norm(sol.P[k] - sol.P[k + 1]) for k in range(spec.N)]
    tail = diffs[:-5]  # earliest steps are the most converged
    assert all(tail[i] <= tail[i + 1] + 1e-12 for i in range(len(tail) - 1))


def test_scalar_kalman_hand_recursion():
    # Oracle: two filter steps by hand for A=C=1, unit covariances.
    spec = SystemSpec(A=[[1.0]], B=[[1.0]], Cr=[], Cs=[[1.0]], SigmaX0=[[1.0]],
                      SigmaW=[[1.0]], SigmaVr=[], Q=[[1.0]], R=[[1.0]], N=1)
    mapping = effort_mapping("reciprocal")
    kal = solve_kalman(spec, mapping, 1.0)
    assert_allclose(kal.L[0], [[0.5]], atol=1e-15)
    assert_allclose(kal.SigmaFiltered[0], [[0.5]], atol=1e-15)
    assert_allclose(kal.SigmaPredicted[0], [[1.5]], atol=1e-15)
    assert_allclose(kal.L[1], [[0.6]], atol=1e-15)
    assert_allclose(kal.SigmaFiltered[1], [[0.6]], atol=1e-15)


def test_kalman_determinism_bitwise():
    spec, mapping = load_config(PAPER_CONFIG)
    a = solve_kalman(spec, mapping, 1.3)
    b = solve_kalman(spec, mapping, 1.3)
    assert_array_equal(a.L, b.L)
    assert_array_equal(a.SigmaFiltered, b.SigmaFiltered)
    assert_array_equal(a.SigmaPredicted, b.SigmaPredicted)


def test_posterior_below_prior_in_psd_order():
    spec, mapping = load_config(PAPER_CONFIG)
    kal = solve_kalman(spec, mapping, 0.7)
    for k in range(spec.N):
        gap = kal.SigmaPredicted[k] - kal.SigmaFiltered[k + 1]
        assert np.linalg.eigvalsh((gap + gap.T) / 2).min() >= -1e-9
        lam = np.linalg.eigvalsh(kal.SigmaFiltered[k])
        assert lam.min() >= -1e-9


def test_higher_report_shrinks_posteriors():
    # More reported effort means less assumed noise, so tighter posteriors.
    spec, mapping = load_config(PAPER_CONFIG)
    lo = solve_kalman(spec, mapping, 0.5)
    hi = solve_kalman(spec, mapping, 2.0)
    for k in range(spec.N + 1):
        gap = lo.SigmaFiltered[k] - hi.SigmaFiltered[k]
        assert np.linalg.eigvalsh((gap + gap.T) / 2).min() >= -1e-9


def test_separation_of_designs():
    spec, mapping = load_config(PAPER_CONFIG)
    lqr = solve_lqr(spec)
    kal_a = solve_kalman(spec, mapping, 0.5)
    kal_b = solve_kalman(spec, mapping, 2.0)
    # The regulator never sees the report; the filter does.
    assert_array_equal(solve_lqr(spec).K, lqr.K)
    assert not np.array_equal(kal_a.L, kal_b.L)
    assert kal_a.reported_effort.value == 0.5
