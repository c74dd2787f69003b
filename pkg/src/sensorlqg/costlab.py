"""Closed-loop cost analysis: exact moments of the operating cost.

The closed loop under gains designed at a reported effort ehat is an
augmented linear system in (x_k, xhat_k) driven by the primitive noises.
Stacking every primitive noise into one Gaussian vector
z = (x_0, w_0..w_{N-1}, v_0..v_N) turns the realized cost into a single
quadratic form J = z' M z, whose covariance argument is affine in the true
effort's noise variance: Cov(z) = SigmaZ1 + sigma2(e) SigmaZ2. Everything
follows exactly from that structure:

    E[J(e, ehat)]   = f1(ehat) + sigma2(e) f2(ehat)
    Var[J(e, ehat)] = 2 tr(M Sigma_z(e) M Sigma_z(e))

with f1 = tr(M SigmaZ1) and f2 = tr(M SigmaZ2), both nonnegative. The
reported effort enters only through the gains inside M; the true effort
only through sigma2(e).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .lqg import KalmanSolution, LqrSolution, solve_kalman, solve_lqr
from .model import (
    EffortDomainError,
    EffortLevel,
    EffortLike,
    EffortMapping,
    SystemSpec,
    effort_value,
    sigma2,
)

__all__ = [
    "ConsistencyError",
    "ClosedLoopModel",
    "StackedForm",
    "CostMoments",
    "CostPoint",
    "CostCache",
    "build_closed_loop",
    "build_stacked_form",
    "decompose_cost",
    "expected_cost",
    "j_star",
    "variance_of_cost",
    "var_cost_partial_ehat",
    "cost_moments",
    "compile_cost_point",
    "default_fd_step",
]

JSTAR_CROSSCHECK_RTOL = 1e-8


class ConsistencyError(RuntimeError):
    """Two exact routes to the same quantity disagreed beyond tolerance."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ClosedLoopModel:
    """Augmented closed-loop dynamics for one reported effort.

    With xbar_k = (x_k, xhat_k), the loop evolves as
    xbar_{k+1} = Abar_k xbar_k + Bbar_k (w_k, v_{k+1}) where

        Abar_k = [[A,        B K_k              ],
                  [L_{k+1} C A,  A + B K_k - L_{k+1} C A]]
        Bbar_k = [[I,          0      ],
                  [L_{k+1} C,  L_{k+1}]]

    and the stage cost is xbar_k' Qbar_k xbar_k with
    Qbar_k = diag(Q, K_k' R K_k). The driving noise (w_k, v_{k+1}) has
    covariance SigmaVbar1 + sigma2(e) SigmaVbar2, affine in the true
    effort's variance.
    """

    reported_effort: EffortLevel
    Abar: np.ndarray  # (N, 2n, 2n)
    Bbar: np.ndarray  # (N, 2n, n+p)
    Qbar: np.ndarray  # (N+1, 2n, 2n)
    SigmaVbar1: np.ndarray  # (n+p, n+p)
    SigmaVbar2: np.ndarray  # (n+p, n+p)


@dataclass(frozen=True)
class StackedForm:
    """The cost as one quadratic form in the stacked primitive noise.

    z concatenates (x_0, w_0..w_{N-1}, v_0..v_N), so d = n + N n + (N+1) p.
    S[k] maps z to xbar_k, Cov(z) = SigmaZ1 + sigma2(e) SigmaZ2, and
    Mquad = sum_k S[k]' Qbar_k S[k] gives J = z' Mquad z exactly.
    """

    S: np.ndarray  # (N+1, 2n, d)
    SigmaZ1: np.ndarray  # (d, d)
    SigmaZ2: np.ndarray  # (d, d)
    Mquad: np.ndarray  # (d, d)
    # Layout of z: column offsets of the noise blocks inside z.
    n: int
    p_r: int
    p_s: int
    horizon: int

    @property
    def dim(self) -> int:
        return self.Mquad.shape[0]

    @cached_property
    def _strategic_cols(self) -> np.ndarray:
        """Indices of the strategic-sensor noise components inside z."""
        n, p = self.n, self.p_r + self.p_s
        v_off = n + self.horizon * n
        return np.concatenate(
            [v_off + k * p + np.arange(self.p_r, p) for k in range(self.horizon + 1)]
        )

    @cached_property
    def f_terms(self) -> tuple[float, float]:
        """(f1, f2) = (tr(M SigmaZ1), tr(M SigmaZ2))."""
        f1 = float(np.einsum("ij,ji->", self.Mquad, self.SigmaZ1))
        f2 = float(np.einsum("ij,ji->", self.Mquad, self.SigmaZ2))
        return f1, f2

    @cached_property
    def variance_coeffs(self) -> tuple[float, float, float]:
        """Coefficients (c11, c12, c22) of tr(M Sigma_z(e) M Sigma_z(e)).

        The trace is quadratic in s = sigma2(e):
        c11 + 2 s c12 + s^2 c22. SigmaZ1 is block diagonal and SigmaZ2 is a
        0/1 diagonal projector onto the strategic noise components, so the
        products never need a dense d^3 multiply.
        """
        M = self.Mquad
        X1 = M @ self.SigmaZ1
        vs = self._strategic_cols
        c11 = float(np.einsum("ij,ji->", X1, X1))
        c12 = float(np.einsum("jk,kj->", X1[vs, :], M[:, vs]))
        Msub = M[np.ix_(vs, vs)]
        c22 = float(np.einsum("ij,ji->", Msub, Msub))
        return c11, c12, c22


@dataclass(frozen=True)
class CostMoments:
    """Exact cost moments at one (true effort, reported effort) pair."""

    expected_cost: float
    variance: float
    f1: float
    f2: float
    j_star: float


def build_closed_loop(
    spec: SystemSpec,
    mapping: EffortMapping,
    ehat: EffortLike,
    lqr: LqrSolution,
    kal: KalmanSolution,
) -> ClosedLoopModel:
    """Assemble the augmented closed-loop matrices from solved gains.

    The LQR and Kalman solutions must come from this spec, with the filter
    solved at ehat.
    """
    ehat_val = effort_value(ehat)
    if abs(kal.reported_effort.value - ehat_val) > 0:
        raise ValueError(
            f"Kalman solution was built at {kal.reported_effort.value}, not {ehat_val}"
        )
    n, m, p, N = spec.n, spec.m, spec.p, spec.N
    if lqr.K.shape != (N + 1, m, n) or kal.L.shape != (N + 1, n, p):
        raise ValueError("gain sequences do not match the spec dimensions")
    A, B, C = spec.A, spec.B, spec.C

    Abar = np.zeros((N, 2 * n, 2 * n))
    Bbar = np.zeros((N, 2 * n, n + p))
    for k in range(N):
        BK = B @ lqr.K[k]
        LCA = kal.L[k + 1] @ C @ A
        Abar[k, :n, :n] = A
        Abar[k, :n, n:] = BK
        Abar[k, n:, :n] = LCA
        Abar[k, n:, n:] = A + BK - LCA
        Bbar[k, :n, :n] = np.eye(n)
        Bbar[k, n:, :n] = kal.L[k + 1] @ C
        Bbar[k, n:, n:] = kal.L[k + 1]

    Qbar = np.zeros((N + 1, 2 * n, 2 * n))
    for k in range(N + 1):
        Qbar[k, :n, :n] = spec.Q
        Qbar[k, n:, n:] = lqr.K[k].T @ spec.R @ lqr.K[k]

    SigmaVbar1 = np.zeros((n + p, n + p))
    SigmaVbar1[:n, :n] = spec.SigmaW
    SigmaVbar1[n : n + spec.p_r, n : n + spec.p_r] = spec.SigmaVr
    SigmaVbar2 = np.zeros((n + p, n + p))
    SigmaVbar2[n + spec.p_r :, n + spec.p_r :] = np.eye(spec.p_s)

    level = ehat if isinstance(ehat, EffortLevel) else EffortLevel(ehat_val, "reported_effort")
    return ClosedLoopModel(
        reported_effort=level,
        Abar=_freeze(Abar),
        Bbar=_freeze(Bbar),
        Qbar=_freeze(Qbar),
        SigmaVbar1=_freeze(SigmaVbar1),
        SigmaVbar2=_freeze(SigmaVbar2),
    )


def build_stacked_form(cl: ClosedLoopModel, kal: KalmanSolution, spec: SystemSpec) -> StackedForm:
    """Unroll the closed loop into the stacked quadratic form.

    Time 0 seeds xbar_0 = (x_0, L_0 (C x_0 + v_0)); each later S_{k+1} is
    Abar_k S_k plus the columns of Bbar_k scattered into the (w_k, v_{k+1})
    slots of z. Mquad accumulates sum_k S_k' Qbar_k S_k.
    """
    n, p, p_r, p_s, N = spec.n, spec.p, spec.p_r, spec.p_s, spec.N
    d = n + N * n + (N + 1) * p
    w_off = n
    v_off = n + N * n

    S = np.zeros((N + 1, 2 * n, d))
    S[0, :n, :n] = np.eye(n)
    S[0, n:, :n] = kal.L[0] @ spec.C
    S[0, n:, v_off : v_off + p] = kal.L[0]
    for k in range(N):
        S[k + 1] = cl.Abar[k] @ S[k]
        S[k + 1, :, w_off + k * n : w_off + (k + 1) * n] += cl.Bbar[k][:, :n]
        S[k + 1, :, v_off + (k + 1) * p : v_off + (k + 2) * p] += cl.Bbar[k][:, n:]

    G = np.matmul(cl.Qbar, S)
    M = np.tensordot(S, G, axes=([0, 1], [0, 1]))
    M = (M + M.T) / 2.0

    Z1 = np.zeros((d, d))
    Z2 = np.zeros((d, d))
    Z1[:n, :n] = spec.SigmaX0
    for k in range(N):
        o = w_off + k * n
        Z1[o : o + n, o : o + n] = spec.SigmaW
    for k in range(N + 1):
        o = v_off + k * p
        Z1[o : o + p_r, o : o + p_r] = spec.SigmaVr
        Z2[o + p_r : o + p, o + p_r : o + p] = np.eye(p_s)

    return StackedForm(
        S=_freeze(S),
        SigmaZ1=_freeze(Z1),
        SigmaZ2=_freeze(Z2),
        Mquad=_freeze(M),
        n=n,
        p_r=p_r,
        p_s=p_s,
        horizon=N,
    )


def decompose_cost(sf: StackedForm) -> tuple[float, float]:
    """Split the expected cost into its reported-effort pieces (f1, f2).

    f1 = tr(Mquad SigmaZ1) collects every noise source with a fixed
    covariance; f2 = tr(Mquad SigmaZ2) is the gain on the strategic
    sensor's variance. Both are nonnegative traces of PSD products.
    """
    return sf.f_terms


def expected_cost(sf: StackedForm, mapping: EffortMapping, e: EffortLike) -> float:
    """E[J(e, ehat)] = f1 + sigma2(e) f2 for the form's reported effort."""
    f1, f2 = sf.f_terms
    return f1 + sigma2(mapping, e) * f2


def variance_of_cost(sf: StackedForm, mapping: EffortMapping, e: EffortLike) -> float:
    """Var[J(e, ehat)] = 2 tr(M Sigma_z(e) M Sigma_z(e)).

    Exact for the zero-mean Gaussian quadratic form; evaluated through the
    polynomial in sigma2(e) with coefficients cached on the form.
    """
    c11, c12, c22 = sf.variance_coeffs
    s = sigma2(mapping, e)
    return 2.0 * (c11 + 2.0 * s * c12 + s * s * c22)


def _jstar_trace(spec: SystemSpec, lqr: LqrSolution, kal: KalmanSolution) -> float:
    """Truthful-reporting cost from the filter/regulator covariances alone.

    J* = sum_{k<N} tr(Q Sigma_k) + tr(Q Sigma_N)
       + sum_{k<=N} tr(P_k (Sigma_{k|k-1} - Sigma_k)),
    with the time-0 prior covariance equal to SigmaX0. Independent of the
    stacked form, which makes it a strong cross-check.
    """
    Q, N = spec.Q, spec.N
    total = sum(float(np.trace(Q @ kal.SigmaFiltered[k])) for k in range(N + 1))
    prior = spec.SigmaX0
    for k in range(N + 1):
        total += float(np.trace(lqr.P[k] @ (prior - kal.SigmaFiltered[k])))
        if k < N:
            prior = kal.SigmaPredicted[k]
    return total


def default_fd_step(ehat: float) -> float:
    """Central-difference step, scaled for cost magnitudes around 1e3."""
    return 1e-4 * max(1.0, abs(ehat))


def compile_cost_point(
    spec: SystemSpec,
    mapping: EffortMapping,
    ehat: EffortLike,
    lqr: LqrSolution | None = None,
) -> "CostPoint":
    """Run the full chain at one reported effort and keep only the scalars.

    Performs the dual-route J* consistency check (stacked form against the
    covariance trace formula) before discarding the large intermediates.
    """
    ehat_val = effort_value(ehat)
    if lqr is None:
        lqr = solve_lqr(spec)
    kal = solve_kalman(spec, mapping, ehat_val)
    cl = build_closed_loop(spec, mapping, ehat_val, lqr, kal)
    sf = build_stacked_form(cl, kal, spec)
    f1, f2 = sf.f_terms
    s2_hat = sigma2(mapping, ehat_val)
    jstar_decomp = f1 + s2_hat * f2
    jstar_ref = _jstar_trace(spec, lqr, kal)
    if abs(jstar_decomp - jstar_ref) > JSTAR_CROSSCHECK_RTOL * max(abs(jstar_decomp), 1e-300):
        raise ConsistencyError(
            "internal inconsistency: truthful cost routes disagree "
            f"({jstar_decomp!r} vs {jstar_ref!r} at ehat={ehat_val!r})"
        )
    c11, c12, c22 = sf.variance_coeffs
    return CostPoint(
        ehat=ehat_val,
        sigma2_ehat=s2_hat,
        f1=f1,
        f2=f2,
        jstar=jstar_decomp,
        var_c11=c11,
        var_c12=c12,
        var_c22=c22,
    )


@dataclass(frozen=True)
class CostPoint:
    """Scalar cost summaries at one reported effort.

    Everything the incentive layer needs: the decomposition (f1, f2), the
    truthful cost, and the polynomial coefficients of the cost variance in
    sigma2(e).
    """

    ehat: float
    sigma2_ehat: float
    f1: float
    f2: float
    jstar: float
    var_c11: float
    var_c12: float
    var_c22: float

    def expected_cost_at(self, sigma2_e: float) -> float:
        return self.f1 + sigma2_e * self.f2

    def variance_at(self, sigma2_e: float) -> float:
        return 2.0 * (self.var_c11 + 2.0 * sigma2_e * self.var_c12 + sigma2_e**2 * self.var_c22)


class CostCache:
    """Memoized cost points over reported efforts for one system.

    The LQR solution is shared (it never depends on the report); each
    distinct reported effort triggers one stacked-form build. Grid sweeps
    and finite differences hit the cache instead of rebuilding.
    """

    def __init__(self, spec: SystemSpec, mapping: EffortMapping):
        self.spec = spec
        self.mapping = mapping
        self.lqr = solve_lqr(spec)
        self._points: dict[float, CostPoint] = {}

    def point(self, ehat: EffortLike) -> CostPoint:
        key = effort_value(ehat)
        found = self._points.get(key)
        if found is None:
            found = compile_cost_point(self.spec, self.mapping, key, lqr=self.lqr)
            self._points[key] = found
        return found

    def moments(self, e: EffortLike, ehat: EffortLike) -> CostMoments:
        pt = self.point(ehat)
        s2 = sigma2(self.mapping, e)
        return CostMoments(
            expected_cost=pt.expected_cost_at(s2),
            variance=pt.variance_at(s2),
            f1=pt.f1,
            f2=pt.f2,
            j_star=pt.jstar,
        )


def cost_moments(
    spec: SystemSpec, mapping: EffortMapping, e: EffortLike, ehat: EffortLike
) -> CostMoments:
    """One-shot exact moments of J at a (true, reported) effort pair."""
    return CostCache(spec, mapping).moments(e, ehat)


def j_star(spec: SystemSpec, mapping: EffortMapping, ehat: EffortLike) -> float:
    """Expected cost under truthful reporting at ehat.

    Computed through the decomposition at e = ehat and cross-checked
    against the covariance trace formula; raises ConsistencyError if the
    two exact routes drift apart.
    """
    return compile_cost_point(spec, mapping, ehat).jstar


def var_cost_partial_ehat(
    spec: SystemSpec,
    mapping: EffortMapping,
    e: EffortLike,
    ehat: EffortLike,
    step: float | None = None,
    cache: CostCache | None = None,
) -> float:
    """Central finite difference of Var[J(e, .)] in the reported effort."""
    ehat_val = effort_value(ehat)
    h = default_fd_step(ehat_val) if step is None else float(step)
    s2_e = sigma2(mapping, e)
    for probe in (ehat_val - h, ehat_val + h):
        if not mapping.contains(probe):
            raise EffortDomainError(
                f"finite-difference probe {probe!r} leaves the effort domain"
            )
    if cache is None:
        cache = CostCache(spec, mapping)
    hi = cache.point(ehat_val + h).variance_at(s2_e)
    lo = cache.point(ehat_val - h).variance_at(s2_e)
    return (hi - lo) / (2.0 * h)
