"""Closed-loop trajectory sampling as an independent statistical oracle.

Gains are designed at the reported effort; realized measurement noise is
drawn at the true effort. Every Gaussian draw is derived from a
counter-based stream keyed by (seed, sample index), so any sample can be
regenerated in isolation and batches can be split across workers without
changing the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lqg import KalmanSolution, LqrSolution, solve_kalman, solve_lqr
from .model import EffortLike, EffortMapping, SystemSpec, effort_value, sigma2

__all__ = ["TrajectorySample", "MCReport", "simulate_trajectory", "mc_costs", "mc_moments"]

_U64 = (1 << 64) - 1
_CHUNK = 16384


@dataclass(frozen=True)
class TrajectorySample:
    """One realized closed-loop run with all primitives retained.

    The recorded sequences satisfy the plant dynamics and the control law
    exactly as constructed: x_{k+1} = A x_k + B u_k + w_k, u_k = K_k xhat_k,
    and cost is the realized quadratic objective.
    """

    x: np.ndarray  # (N+1, n)
    xhat: np.ndarray  # (N+1, n)
    u: np.ndarray  # (N, m)
    y: np.ndarray  # (N+1, p)
    w: np.ndarray  # (N, n)
    v: np.ndarray  # (N+1, p)
    cost: float


@dataclass(frozen=True)
class MCReport:
    """Sample moments of the realized cost with their standard errors."""

    sample_count: int
    mean_cost: float
    var_cost: float
    std_error_mean: float
    std_error_var: float
    seed: int


def _standard_normals(seed: int, sample_index: int, count: int) -> np.ndarray:
    """Deterministic N(0,1) stream for one sample.

    A Philox counter-based generator is keyed by (seed, sample_index); its
    raw 64-bit words become open-interval uniforms u = (raw >> 11 + 0.5) /
    2^53, which a Box-Muller transform turns into normals. The stream
    depends only on the key, never on other samples or batch layout.
    """
    key = np.array([seed & _U64, sample_index & _U64], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(2 * ((count + 1) // 2))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(2 * u1.size)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:count]


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tolerates rank-deficient covariances."""
    if M.size == 0:
        return M.reshape(0, 0)
    lam, U = np.linalg.eigh((M + M.T) / 2.0)
    return U @ np.diag(np.sqrt(np.clip(lam, 0.0, None))) @ U.T


def _noise_blocks(spec: SystemSpec, mapping: EffortMapping, e: EffortLike):
    sig = math.sqrt(sigma2(mapping, e))
    return _psd_sqrt(spec.SigmaX0), _psd_sqrt(spec.SigmaW), _psd_sqrt(spec.SigmaVr), sig


def _draw_noise(spec: SystemSpec, roots, seed: int, sample_index: int):
    """Draw (x0, w, v) for one sample in the documented stream order."""
    n, p, p_r, N = spec.n, spec.p, spec.p_r, spec.N
    sx0, sw, svr, sig = roots
    z = _standard_normals(seed, sample_index, n + N * n + (N + 1) * p)
    x0 = sx0 @ z[:n]
    w = (sw @ z[n : n + N * n].reshape(N, n).T).T
    zv = z[n + N * n :].reshape(N + 1, p)
    v = np.empty((N + 1, p))
    v[:, :p_r] = zv[:, :p_r] @ svr.T
    v[:, p_r:] = sig * zv[:, p_r:]
    return x0, w, v


def simulate_trajectory(
    spec: SystemSpec,
    mapping: EffortMapping,
    e: EffortLike,
    ehat: EffortLike,
    lqr: LqrSolution,
    kal: KalmanSolution,
    seed: int,
    sample_index: int,
) -> TrajectorySample:
    """Sample one closed-loop trajectory and its realized cost.

    The filter consumes y_0..y_N starting from a zero-mean prior
    (xhat_0 = L_0 y_0); inputs u_0..u_{N-1} follow u_k = K_k xhat_k. The
    same (seed, sample_index) always reproduces the identical sample.
    """
    if abs(kal.reported_effort.value - effort_value(ehat)) > 0:
        raise ValueError("Kalman solution was built at a different reported effort")
    n, m, p, N = spec.n, spec.m, spec.p, spec.N
    A, B, C, Q, R = spec.A, spec.B, spec.C, spec.Q, spec.R
    x0, w, v = _draw_noise(spec, _noise_blocks(spec, mapping, e), int(seed), int(sample_index))

    x = np.zeros((N + 1, n))
    xh = np.zeros((N + 1, n))
    u = np.zeros((N, m))
    y = np.zeros((N + 1, p))
    x[0] = x0
    y[0] = C @ x[0] + v[0]
    xh[0] = kal.L[0] @ y[0]
    cost = 0.0
    for k in range(N):
        u[k] = lqr.K[k] @ xh[k]
        cost += float(x[k] @ Q @ x[k] + u[k] @ R @ u[k])
        x[k + 1] = A @ x[k] + B @ u[k] + w[k]
        y[k + 1] = C @ x[k + 1] + v[k + 1]
        pred = A @ xh[k] + B @ u[k]
        xh[k + 1] = pred + kal.L[k + 1] @ (y[k + 1] - C @ pred)
    cost += float(x[N] @ Q @ x[N])
    return TrajectorySample(x=x, xhat=xh, u=u, y=y, w=w, v=v, cost=cost)


def mc_costs(
    spec: SystemSpec,
    mapping: EffortMapping,
    e: EffortLike,
    ehat: EffortLike,
    sample_count: int,
    seed: int,
    lqr: LqrSolution | None = None,
    kal: KalmanSolution | None = None,
    chunk_size: int = _CHUNK,
) -> np.ndarray:
    """Realized costs for sample indices 0..sample_count-1.

    Samples are propagated in fixed-size chunks purely as a vectorization
    detail; each sample's noise comes from its own keyed stream, so the
    costs array is independent of the chunk layout up to float roundoff in
    the batched matrix products.
    """
    if lqr is None:
        lqr = solve_lqr(spec)
    if kal is None:
        kal = solve_kalman(spec, mapping, ehat)
    n, p, p_r, N = spec.n, spec.p, spec.p_r, spec.N
    A, B, C, Q, R = spec.A, spec.B, spec.C, spec.Q, spec.R
    roots = _noise_blocks(spec, mapping, e)
    sx0, sw, svr, sig = roots
    draws = n + N * n + (N + 1) * p
    seed = int(seed)

    costs = np.empty(sample_count)
    for lo in range(0, sample_count, chunk_size):
        hi = min(lo + chunk_size, sample_count)
        z = np.empty((hi - lo, draws))
        for i in range(lo, hi):
            z[i - lo] = _standard_normals(seed, i, draws)
        cols = hi - lo
        x = sx0 @ z[:, :n].T
        wz = z[:, n : n + N * n].reshape(cols, N, n)
        vz = z[:, n + N * n :].reshape(cols, N + 1, p)
        chunk_cost = np.zeros(cols)

        v0 = np.empty((p, cols))
        v0[:p_r] = svr @ vz[:, 0, :p_r].T
        v0[p_r:] = sig * vz[:, 0, p_r:].T
        y = C @ x + v0
        xh = kal.L[0] @ y
        for k in range(N):
            u = lqr.K[k] @ xh
            chunk_cost += np.einsum("is,ij,js->s", x, Q, x) + np.einsum("is,ij,js->s", u, R, u)
            x = A @ x + B @ u + sw @ wz[:, k, :].T
            vk = np.empty((p, cols))
            vk[:p_r] = svr @ vz[:, k + 1, :p_r].T
            vk[p_r:] = sig * vz[:, k + 1, p_r:].T
            y = C @ x + vk
            pred = A @ xh + B @ u
            xh = pred + kal.L[k + 1] @ (y - C @ pred)
        chunk_cost += np.einsum("is,ij,js->s", x, Q, x)
        costs[lo:hi] = chunk_cost
    return costs


def mc_moments(
    spec: SystemSpec,
    mapping: EffortMapping,
    e: EffortLike,
    ehat: EffortLike,
    sample_count: int,
    seed: int,
) -> MCReport:
    """Mean and unbiased variance of the realized cost over keyed samples.

    The standard error of the mean is sqrt(var/n); the standard error of
    the variance uses the fourth-moment estimator
    sqrt((m4 - (n-3)/(n-1) var^2) / n). A report is a pure function of its
    arguments regardless of how the sampling is batched.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    costs = mc_costs(spec, mapping, e, ehat, sample_count, seed)
    nsamp = sample_count
    mean = float(np.mean(costs))
    var = float(np.var(costs, ddof=1))
    centered = costs - mean
    m4 = float(np.mean(centered**4))
    var_of_var = (m4 - (nsamp - 3) / (nsamp - 1) * var * var) / nsamp
    return MCReport(
        sample_count=nsamp,
        mean_cost=mean,
        var_cost=var,
        std_error_mean=math.sqrt(max(var, 0.0) / nsamp),
        std_error_var=math.sqrt(max(var_of_var, 0.0)),
        seed=int(seed),
    )
