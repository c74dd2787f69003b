"""Payment schemes for eliciting truthful effort reports, with audits.

Two payment families are implemented. The static-style payment penalizes
the squared gap between the realized cost and the truthful-report cost
plus a share of the realized cost itself; in a closed loop its expectation
picks up report-dependent variance and gain terms, so truthful reporting
is generally not a stationary point. The corrected payment normalizes the
cost gap by the strategic-noise gain f2 and lets the penalty weight vary
with the report; its expectation separates into

    E[p] = -b_J(ehat) Var[J(e, ehat)] / f2(ehat)^2 + pstar(e, ehat)
    pstar = a - b_J(ehat) (sigma2(e) - sigma2(ehat))^2 - b_e sigma2(e)

where the constant decomposition term f1 cancels. pstar always has a
local maximum at ehat = e; the design routine picks the linear
coefficient of b_J so the variance term's slope cancels too, and grows
its curvature until the report anchor is a certified local maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .costlab import CostCache, CostPoint, default_fd_step
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
    "DesignConvergenceError",
    "BjQuadratic",
    "PaymentScheme",
    "TruthfulnessAudit",
    "BestResponseScan",
    "payment_p0",
    "payment_p",
    "expected_payment",
    "expected_pstar",
    "sensor_utility",
    "design_bj",
    "audit_truthfulness",
    "first_order_condition_terms",
    "best_response_scan",
]

STATIC_P0 = "static_p0"
CORRECTED_P = "corrected_p"

TOL_GRAD_COEF = 1e-4
TOL_GRAD_ABS = 1e-6
TOL_CURV = 1e-8

VERDICT_LOCAL_MAX = "local_max"
VERDICT_NOT_LOCAL_MAX = "not_local_max"
VERDICT_INCONCLUSIVE = "inconclusive"


class DesignConvergenceError(RuntimeError):
    """The curvature search exhausted its doubling budget."""


@dataclass(frozen=True)
class BjQuadratic:
    """Penalty weight b_J as a quadratic around the design anchor.

    b_J(ehat) = beta0 + beta1 (ehat - anchor) + beta2 (ehat - anchor)^2 / 2.
    With beta2 >= 0 this is convex and twice continuously differentiable,
    the minimal family the truthfulness construction needs.
    """

    anchor: float
    beta0: float
    beta1: float
    beta2: float

    def __call__(self, ehat: float) -> float:
        d = ehat - self.anchor
        return self.beta0 + self.beta1 * d + 0.5 * self.beta2 * d * d

    def min_on_window(self, halfwidth: float) -> float:
        """Minimum of b_J over [anchor - halfwidth, anchor + halfwidth]."""
        lo = self(self.anchor - halfwidth)
        hi = self(self.anchor + halfwidth)
        best = min(lo, hi)
        if self.beta2 > 0:
            vertex = -self.beta1 / self.beta2
            if abs(vertex) <= halfwidth:
                best = min(best, self(self.anchor + vertex))
        return best


@dataclass(frozen=True)
class PaymentScheme:
    """Parameters (a, b_e, b_J) of one payment function.

    ``static_p0`` uses a constant nonnegative b_J; ``corrected_p`` uses a
    BjQuadratic with positive base value and nonnegative curvature.
    """

    kind: str
    a: float
    b_e: float
    b_j: float | BjQuadratic

    def __post_init__(self):
        if self.kind not in (STATIC_P0, CORRECTED_P):
            raise ValueError(f"unknown payment kind: {self.kind!r}")
        if self.a < 0 or self.b_e < 0:
            raise ValueError("a and b_e must be nonnegative")
        if self.kind == STATIC_P0:
            if not isinstance(self.b_j, (int, float)) or self.b_j < 0:
                raise ValueError("static_p0 needs a nonnegative constant b_J")
        else:
            if not isinstance(self.b_j, BjQuadratic):
                raise ValueError("corrected_p needs a BjQuadratic b_J")
            if self.b_j.beta0 <= 0:
                raise ValueError("corrected_p needs b_J(anchor) > 0")
            if self.b_j.beta2 < 0:
                raise ValueError("corrected_p needs convex b_J (beta2 >= 0)")

    def bj_at(self, ehat: float) -> float:
        if self.kind == STATIC_P0:
            return float(self.b_j)
        return self.b_j(ehat)


@dataclass(frozen=True)
class TruthfulnessAudit:
    """Finite-difference stationarity check of E[p] in the report at e.

    verdict is ``local_max`` when the gradient is inside tolerance and the
    curvature is clearly negative, ``not_local_max`` when the gradient
    escapes tolerance or the curvature is clearly positive, and
    ``inconclusive`` for flat curvature.
    """

    anchor_e: EffortLevel
    first_deriv: float
    second_deriv: float
    utility_first_deriv: float
    verdict: str
    fd_step: float


@dataclass(frozen=True)
class BestResponseScan:
    """Expected payments and utilities over a report grid at fixed e."""

    ehat: np.ndarray
    expected_payment: np.ndarray
    utility: np.ndarray
    argmax_index: int


def payment_p0(scheme: PaymentScheme, realized_J: float, jstar: float) -> float:
    """Static-style payment a - b_J (J - J*)^2 - b_e J."""
    if scheme.kind != STATIC_P0:
        raise ValueError("payment_p0 requires a static_p0 scheme")
    gap = realized_J - jstar
    return scheme.a - scheme.b_j * gap * gap - scheme.b_e * realized_J


def payment_p(
    scheme: PaymentScheme,
    realized_J: float,
    jstar: float,
    f2: float,
    sigma2_ehat: float,
    ehat: EffortLike,
) -> float:
    """Corrected payment with the cost gap normalized by f2.

    a - b_J(ehat) ((J - J*) / f2)^2 - b_e ((J - J*) / f2 + sigma2(ehat)).
    """
    if scheme.kind != CORRECTED_P:
        raise ValueError("payment_p requires a corrected_p scheme")
    if f2 <= 0:
        raise ValueError("cannot normalize payment: f2 <= 0")
    scaled = (realized_J - jstar) / f2
    bj = scheme.bj_at(effort_value(ehat))
    return scheme.a - bj * scaled * scaled - scheme.b_e * (scaled + sigma2_ehat)


def expected_pstar(
    mapping: EffortMapping, scheme: PaymentScheme, e: EffortLike, ehat: EffortLike
) -> float:
    """The variance-free part of the corrected payment's expectation."""
    if scheme.kind != CORRECTED_P:
        raise ValueError("expected_pstar is defined for corrected_p schemes")
    s2e = sigma2(mapping, e)
    s2h = sigma2(mapping, ehat)
    bj = scheme.bj_at(effort_value(ehat))
    return scheme.a - bj * (s2e - s2h) ** 2 - scheme.b_e * s2e


def _expected_corrected(scheme: PaymentScheme, pt: CostPoint, s2e: float) -> float:
    """Expectation of the corrected payment through the cost decomposition.

    Routed via E[J] and J* so that the f1 term enters both and cancels.
    When f2 is exactly zero the strategic channel never reaches the loop:
    nothing depends on the report, the normalized gap is undefined, and
    the expectation degenerates to pstar alone.
    """
    bj = scheme.bj_at(pt.ehat)
    if pt.f2 == 0.0:
        return scheme.a - bj * (s2e - pt.sigma2_ehat) ** 2 - scheme.b_e * s2e
    expected_J = pt.expected_cost_at(s2e)
    bias = (expected_J - pt.jstar) / pt.f2
    variance = pt.variance_at(s2e)
    return (
        scheme.a
        - bj * (variance / pt.f2**2 + bias * bias)
        - scheme.b_e * (bias + pt.sigma2_ehat)
    )


def expected_payment(
    spec: SystemSpec,
    mapping: EffortMapping,
    scheme: PaymentScheme,
    e: EffortLike,
    ehat: EffortLike,
    cache: CostCache | None = None,
) -> float:
    """Exact expectation of the payment at a (true, reported) effort pair."""
    if cache is None:
        cache = CostCache(spec, mapping)
    pt = cache.point(ehat)
    s2e = sigma2(mapping, e)
    if scheme.kind == CORRECTED_P:
        return _expected_corrected(scheme, pt, s2e)
    variance = pt.variance_at(s2e)
    gap = (s2e - pt.sigma2_ehat) * pt.f2
    return (
        scheme.a
        - scheme.b_j * (variance + gap * gap)
        - scheme.b_e * (pt.f1 + s2e * pt.f2)
    )


def sensor_utility(
    spec: SystemSpec,
    mapping: EffortMapping,
    scheme: PaymentScheme,
    e: EffortLike,
    ehat: EffortLike,
    cache: CostCache | None = None,
) -> float:
    """Expected payment minus the exerted effort."""
    return expected_payment(spec, mapping, scheme, e, ehat, cache=cache) - effort_value(e)


def _grad_tolerance(a: float) -> float:
    return TOL_GRAD_COEF * abs(a) + TOL_GRAD_ABS


def audit_truthfulness(
    spec: SystemSpec,
    mapping: EffortMapping,
    scheme: PaymentScheme,
    anchor_e: EffortLike,
    fd_step: float | None = None,
    target: str = "expected_payment",
    cache: CostCache | None = None,
) -> TruthfulnessAudit:
    """Check whether truthful reporting is a local payment maximum.

    Central finite differences of ehat -> E[p](anchor_e, ehat) at
    ehat = anchor_e. ``target`` may be ``pstar`` to audit the
    variance-free part alone. Since the exerted effort is fixed during the
    report choice, the utility derivative equals the payment derivative.
    """
    e0 = effort_value(anchor_e)
    h = default_fd_step(e0) if fd_step is None else float(fd_step)
    for probe in (e0 - h, e0 + h):
        if not mapping.contains(probe):
            raise EffortDomainError(f"audit probe {probe!r} leaves the effort domain")
    if target == "pstar":
        def F(ehat):
            return expected_pstar(mapping, scheme, e0, ehat)
    elif target == "expected_payment":
        if cache is None:
            cache = CostCache(spec, mapping)
        def F(ehat):
            return expected_payment(spec, mapping, scheme, e0, ehat, cache=cache)
    else:
        raise ValueError(f"unknown audit target: {target!r}")
    f_mid, f_hi, f_lo = F(e0), F(e0 + h), F(e0 - h)
    grad = (f_hi - f_lo) / (2.0 * h)
    curv = (f_hi - 2.0 * f_mid + f_lo) / (h * h)
    tol_grad = _grad_tolerance(scheme.a)
    if abs(grad) <= tol_grad and curv <= -TOL_CURV:
        verdict = VERDICT_LOCAL_MAX
    elif abs(grad) > tol_grad or curv > TOL_CURV:
        verdict = VERDICT_NOT_LOCAL_MAX
    else:
        verdict = VERDICT_INCONCLUSIVE
    level = anchor_e if isinstance(anchor_e, EffortLevel) else EffortLevel(e0)
    return TruthfulnessAudit(
        anchor_e=level,
        first_deriv=grad,
        second_deriv=curv,
        utility_first_deriv=grad,
        verdict=verdict,
        fd_step=h,
    )


def first_order_condition_terms(
    spec: SystemSpec,
    mapping: EffortMapping,
    scheme: PaymentScheme,
    anchor_e: EffortLike,
    fd_step: float | None = None,
    cache: CostCache | None = None,
) -> dict:
    """Terms of the first-order design condition at the anchor.

    The slope of the variance part of E[p] at ehat = e vanishes iff

        b_J' V / f2^2 - 2 b_J V f2' / f2^3 + b_J V' / f2^2 = 0

    with V = Var[J(e, e)], V' its report-derivative, and f2' the
    report-derivative of f2 (both by central differences). Returns the
    three terms and their relative residual; everything is zero when the
    strategic channel is unused (f2 = 0).
    """
    if scheme.kind != CORRECTED_P:
        raise ValueError("the design condition applies to corrected_p schemes")
    e0 = effort_value(anchor_e)
    h = default_fd_step(e0) if fd_step is None else float(fd_step)
    if cache is None:
        cache = CostCache(spec, mapping)
    pt = cache.point(e0)
    bj = scheme.b_j
    if pt.f2 == 0.0:
        return {"terms": (0.0, 0.0, 0.0), "residual_rel": 0.0, "V": pt.variance_at(pt.sigma2_ehat),
                "dV_dehat": 0.0, "df2_dehat": 0.0, "fd_step": h}
    s2e = pt.sigma2_ehat
    pt_hi, pt_lo = cache.point(e0 + h), cache.point(e0 - h)
    V = pt.variance_at(s2e)
    dV = (pt_hi.variance_at(s2e) - pt_lo.variance_at(s2e)) / (2.0 * h)
    df2 = (pt_hi.f2 - pt_lo.f2) / (2.0 * h)
    dbj = bj.beta1 + bj.beta2 * (e0 - bj.anchor) if isinstance(bj, BjQuadratic) else 0.0
    bj0 = scheme.bj_at(e0)
    t1 = dbj * V / pt.f2**2
    t2 = -2.0 * bj0 * V * df2 / pt.f2**3
    t3 = bj0 * dV / pt.f2**2
    scale = max(abs(t1), abs(t2), abs(t3))
    residual = abs(t1 + t2 + t3) / scale if scale > 0 else 0.0
    return {"terms": (t1, t2, t3), "residual_rel": residual, "V": V,
            "dV_dehat": dV, "df2_dehat": df2, "fd_step": h}


def design_bj(
    spec: SystemSpec,
    mapping: EffortMapping,
    anchor_e: EffortLike,
    a: float,
    b_e: float,
    curvature_margin: float,
    beta0: float = 1.0,
    fd_step: float | None = None,
    audit_halfwidth: float = 0.2,
    max_doublings: int = 60,
    cache: CostCache | None = None,
) -> PaymentScheme:
    """Construct a corrected payment that makes the anchor report optimal.

    beta1 solves the first-order condition at the anchor so the variance
    term is stationary there (pstar already is). beta2 starts at 1 and
    doubles until the finite-difference curvature of E[p] at the anchor is
    at most -curvature_margin and b_J stays nonnegative across the audit
    window. Raises DesignConvergenceError if the doubling budget runs out.
    """
    e0 = effort_value(anchor_e)
    h = default_fd_step(e0) if fd_step is None else float(fd_step)
    if cache is None:
        cache = CostCache(spec, mapping)
    pt = cache.point(e0)
    if beta0 <= 0:
        raise ValueError("beta0 must be positive")
    if pt.f2 == 0.0:
        beta1 = 0.0
    else:
        s2e = pt.sigma2_ehat
        pt_hi, pt_lo = cache.point(e0 + h), cache.point(e0 - h)
        V = pt.variance_at(s2e)
        dV = (pt_hi.variance_at(s2e) - pt_lo.variance_at(s2e)) / (2.0 * h)
        df2 = (pt_hi.f2 - pt_lo.f2) / (2.0 * h)
        beta1 = beta0 * (2.0 * df2 / pt.f2 - dV / V) if V > 0 else 0.0

    beta2 = 1.0
    last_curv = math.inf
    for _ in range(max_doublings):
        bj = BjQuadratic(anchor=e0, beta0=beta0, beta1=beta1, beta2=beta2)
        scheme = PaymentScheme(kind=CORRECTED_P, a=float(a), b_e=float(b_e), b_j=bj)
        if bj.min_on_window(audit_halfwidth) >= 0.0:
            audit = audit_truthfulness(spec, mapping, scheme, e0, fd_step=h, cache=cache)
            last_curv = audit.second_deriv
            if audit.second_deriv <= -curvature_margin:
                return scheme
        beta2 *= 2.0
    raise DesignConvergenceError(
        f"curvature search failed after {max_doublings} doublings "
        f"(last curvature {last_curv!r}, margin {curvature_margin!r})"
    )


def best_response_scan(
    spec: SystemSpec,
    mapping: EffortMapping,
    scheme: PaymentScheme,
    e: EffortLike,
    ehat_grid,
    cache: CostCache | None = None,
) -> BestResponseScan:
    """Tabulate expected payment and utility over a grid of reports."""
    grid = np.asarray(list(ehat_grid), dtype=float)
    for g in grid:
        if not mapping.contains(float(g)):
            raise EffortDomainError(f"grid point {g!r} leaves the effort domain")
    if cache is None:
        cache = CostCache(spec, mapping)
    e_val = effort_value(e)
    pay = np.array(
        [expected_payment(spec, mapping, scheme, e_val, float(g), cache=cache) for g in grid]
    )
    util = pay - e_val
    return BestResponseScan(
        ehat=grid,
        expected_payment=pay,
        utility=util,
        argmax_index=int(np.argmax(pay)),
    )
