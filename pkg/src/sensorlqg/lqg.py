"""Finite-horizon LQR and reported-effort-parameterized Kalman recursions.

The controller and observer are designed as if the reported effort were
true: feedback gains come from the backward Riccati recursion (and never
depend on the report), while the filter gains use the measurement
covariance implied by the reported effort. Realized measurements later
carry the true effort's noise, but that never enters the gains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    EffortLevel,
    EffortLike,
    EffortMapping,
    SystemSpec,
    effort_value,
    measurement_covariance,
)

__all__ = ["LqrSolution", "KalmanSolution", "solve_lqr", "solve_kalman"]


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LqrSolution:
    """Feedback gains K_0..K_N and cost-to-go matrices P_0..P_N.

    The control law is u_k = K_k xhat_k with the minus sign folded into the
    gain. K_N is identically zero: no input is applied at the terminal step.
    """

    K: np.ndarray  # (N+1, m, n)
    P: np.ndarray  # (N+1, n, n)


@dataclass(frozen=True)
class KalmanSolution:
    """Time-varying filter gains and covariances for one reported effort.

    L[k] applies to the measurement at time k (including a time-0 update
    from a zero-mean prior). SigmaFiltered holds the posteriors
    Sigma_0..Sigma_N; SigmaPredicted the priors Sigma_{1|0}..Sigma_{N|N-1}.
    """

    reported_effort: EffortLevel
    L: np.ndarray  # (N+1, n, p)
    SigmaFiltered: np.ndarray  # (N+1, n, n)
    SigmaPredicted: np.ndarray  # (N, n, n)


def solve_lqr(spec: SystemSpec) -> LqrSolution:
    """Run the backward Riccati recursion for the finite-horizon regulator.

    P_N = Q and, stepping k = N-1..0,
    K_k = -(R + B' P_{k+1} B)^{-1} B' P_{k+1} A,
    P_k = Q + A' P_{k+1} A + A' P_{k+1} B K_k.
    The solution depends only on (A, B, Q, R, N).
    """
    A, B, Q, R, N = spec.A, spec.B, spec.Q, spec.R, spec.N
    n, m = spec.n, spec.m
    K = np.zeros((N + 1, m, n))
    P = np.zeros((N + 1, n, n))
    P[N] = Q
    for k in range(N - 1, -1, -1):
        PB = P[k + 1] @ B
        gram = R + B.T @ PB
        gram = (gram + gram.T) / 2.0
        try:
            cf = cho_factor(gram, lower=True)
        except np.linalg.LinAlgError as exc:  # unreachable for R > 0
            raise RuntimeError(f"internal error: singular input gram at step {k}") from exc
        K[k] = -cho_solve(cf, PB.T @ A)
        Pk = Q + A.T @ P[k + 1] @ A + A.T @ PB @ K[k]
        P[k] = (Pk + Pk.T) / 2.0
    return LqrSolution(K=_freeze(K), P=_freeze(P))


def solve_kalman(spec: SystemSpec, mapping: EffortMapping, ehat: EffortLike) -> KalmanSolution:
    """Run the forward Kalman recursion at the reported effort.

    The measurement covariance is diag(SigmaVr, sigma2(ehat) I). Time 0
    updates the zero-mean prior with covariance SigmaX0:
    L_0 = SigmaX0 C' (C SigmaX0 C' + Sv)^{-1}, Sigma_0 = (I - L_0 C) SigmaX0.
    Then for k >= 0:
    Sigma_{k+1|k} = A Sigma_k A' + SigmaW,
    L_{k+1} = Sigma_{k+1|k} C' (C Sigma_{k+1|k} C' + Sv)^{-1},
    Sigma_{k+1} = (I - L_{k+1} C) Sigma_{k+1|k}.
    Innovations are inverted through a Cholesky factorization and
    covariances re-symmetrized each step, which keeps the recursion stable
    over long horizons. The result is a function of ehat only, never of the
    true effort.
    """
    A, W, N = spec.A, spec.SigmaW, spec.N
    C = spec.C
    n, p = spec.n, spec.p
    Sv = measurement_covariance(spec, mapping, ehat)
    eye = np.eye(n)

    L = np.zeros((N + 1, n, p))
    Sf = np.zeros((N + 1, n, n))
    Sp = np.zeros((N, n, n))

    def update(prior: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        innov = C @ prior @ C.T + Sv
        innov = (innov + innov.T) / 2.0
        try:
            cf = cho_factor(innov, lower=True)
        except np.linalg.LinAlgError as exc:  # unreachable for SigmaVr > 0, sigma2 > 0
            raise RuntimeError("internal error: singular innovation covariance") from exc
        gain = cho_solve(cf, C @ prior).T
        post = (eye - gain @ C) @ prior
        return gain, (post + post.T) / 2.0

    L[0], Sf[0] = update(spec.SigmaX0)
    for k in range(N):
        prior = A @ Sf[k] @ A.T + W
        Sp[k] = (prior + prior.T) / 2.0
        L[k + 1], Sf[k + 1] = update(Sp[k])

    level = ehat if isinstance(ehat, EffortLevel) else EffortLevel(effort_value(ehat), "reported_effort")
    return KalmanSolution(
        reported_effort=level,
        L=_freeze(L),
        SigmaFiltered=_freeze(Sf),
        SigmaPredicted=_freeze(Sp),
    )
