"""System description, noise model, and the effort-to-variance mapping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "ConfigError",
    "EffortDomainError",
    "SystemSpec",
    "EffortMapping",
    "EffortLevel",
    "TRUE_EFFORT",
    "REPORTED_EFFORT",
    "load_config",
    "effort_mapping",
    "sigma2",
    "sigma2_derivs",
    "effort_value",
    "measurement_covariance",
]

# PSD acceptance: smallest eigenvalue may undershoot zero by this fraction of
# the matrix norm before we reject a user-supplied covariance.
PSD_EIG_SLACK = 1e-10
PD_EIG_SLACK = 1e-12

TRUE_EFFORT = "true_effort"
REPORTED_EFFORT = "reported_effort"

EFFORT_KINDS = ("reciprocal", "exponential-decay", "custom-table")


class ConfigError(ValueError):
    """A config file failed to parse or violates a model invariant."""


class EffortDomainError(ValueError):
    """An effort value lies outside the mapping's admissible domain."""


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return (M + M.T) / 2.0


def _spectral_norm_sym(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvalsh(M))))


def _check_psd(M: np.ndarray, name: str) -> np.ndarray:
    """Validate a symmetric PSD matrix and return its symmetrized copy."""
    S = _symmetrize(np.asarray(M, dtype=float))
    if S.size == 0:
        return S
    if not np.allclose(M, M.T, atol=1e-8 * max(1.0, float(np.abs(M).max()))):
        raise ConfigError(f"{name} not symmetric")
    lam_min = float(np.min(np.linalg.eigvalsh(S)))
    if lam_min < -PSD_EIG_SLACK * max(1.0, _spectral_norm_sym(S)):
        raise ConfigError(f"{name} not positive semidefinite")
    return S


def _check_pd(M: np.ndarray, name: str) -> np.ndarray:
    """Validate a symmetric positive definite matrix, return symmetrized copy."""
    S = _symmetrize(np.asarray(M, dtype=float))
    if S.size == 0:
        return S
    if not np.allclose(M, M.T, atol=1e-8 * max(1.0, float(np.abs(M).max()))):
        raise ConfigError(f"{name} not symmetric")
    lam_min = float(np.min(np.linalg.eigvalsh(S)))
    if lam_min <= PD_EIG_SLACK * max(1.0, _spectral_norm_sym(S)):
        raise ConfigError(f"{name} not positive definite")
    return S


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SystemSpec:
    """An LTI plant with a regular and a strategic measurement channel.

    The plant evolves as x_{k+1} = A x_k + B u_k + w_k and is observed through
    the stacked output [Cr; Cs] x_k plus noise. The regular channel has fixed
    noise covariance SigmaVr; the strategic channel's covariance is
    sigma2(effort) times the identity. The operator pays the quadratic cost
    sum_k (x_k' Q x_k + u_k' R u_k) + x_N' Q x_N over N control steps.
    """

    A: np.ndarray
    B: np.ndarray
    Cr: np.ndarray
    Cs: np.ndarray
    SigmaX0: np.ndarray
    SigmaW: np.ndarray
    SigmaVr: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    N: int

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("dimension mismatch: A")
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != n or B.shape[1] < 1:
            raise ConfigError("dimension mismatch: B")
        m = B.shape[1]
        Cr = np.asarray(self.Cr, dtype=float)
        if Cr.size == 0:
            Cr = np.zeros((0, n))
        elif Cr.ndim != 2 or Cr.shape[1] != n:
            raise ConfigError("dimension mismatch: Cr")
        Cs = np.asarray(self.Cs, dtype=float)
        if Cs.ndim != 2 or Cs.shape[1] != n or Cs.shape[0] < 1:
            raise ConfigError("dimension mismatch: Cs")
        p_r = Cr.shape[0]
        for mat, name, shape in (
            (self.SigmaX0, "SigmaX0", (n, n)),
            (self.SigmaW, "SigmaW", (n, n)),
            (self.SigmaVr, "SigmaVr", (p_r, p_r)),
            (self.Q, "Q", (n, n)),
            (self.R, "R", (m, m)),
        ):
            arr = np.asarray(mat, dtype=float)
            if arr.size == 0:
                arr = arr.reshape(0, 0)
            if arr.shape != shape:
                raise ConfigError(f"dimension mismatch: {name}")
        if not isinstance(self.N, (int, np.integer)) or self.N < 0:
            raise ConfigError("N must be a nonnegative integer")
        object.__setattr__(self, "A", _freeze(A))
        object.__setattr__(self, "B", _freeze(B))
        object.__setattr__(self, "Cr", _freeze(Cr))
        object.__setattr__(self, "Cs", _freeze(Cs))
        object.__setattr__(self, "SigmaX0", _freeze(_check_psd(np.asarray(self.SigmaX0, dtype=float), "SigmaX0")))
        object.__setattr__(self, "SigmaW", _freeze(_check_psd(np.asarray(self.SigmaW, dtype=float), "SigmaW")))
        object.__setattr__(self, "SigmaVr", _freeze(_check_pd(np.asarray(self.SigmaVr, dtype=float).reshape(p_r, p_r), "SigmaVr")))
        object.__setattr__(self, "Q", _freeze(_check_pd(np.asarray(self.Q, dtype=float), "Q")))
        object.__setattr__(self, "R", _freeze(_check_pd(np.asarray(self.R, dtype=float), "R")))
        object.__setattr__(self, "N", int(self.N))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p_r(self) -> int:
        return self.Cr.shape[0]

    @property
    def p_s(self) -> int:
        return self.Cs.shape[0]

    @property
    def p(self) -> int:
        return self.p_r + self.p_s

    @property
    def C(self) -> np.ndarray:
        """Stacked output matrix [Cr; Cs], regular channel rows first."""
        return np.vstack([self.Cr, self.Cs])


@dataclass(frozen=True)
class EffortLevel:
    """An effort value tagged with how it enters the interaction.

    The strategic sensor exerts a true effort (which sets the realized noise
    variance) and reports an effort (which the operator uses to design
    gains). Most functions also accept a bare float.
    """

    value: float
    role: str = TRUE_EFFORT

    def __post_init__(self):
        if self.role not in (TRUE_EFFORT, REPORTED_EFFORT):
            raise ValueError(f"unknown effort role: {self.role!r}")
        object.__setattr__(self, "value", float(self.value))


EffortLike = Union[float, EffortLevel]


def effort_value(e: EffortLike) -> float:
    """Extract the scalar effort from a float or an EffortLevel."""
    if isinstance(e, EffortLevel):
        return e.value
    return float(e)


@dataclass(frozen=True)
class EffortMapping:
    """The map from exerted effort to strategic-sensor noise variance.

    sigma2 must be strictly decreasing, convex, and twice continuously
    differentiable on its domain: more effort buys less noise, with
    diminishing returns. The map is common knowledge between the sensor and
    the operator. Construct through :func:`effort_mapping`, which runs the
    numeric shape checks.
    """

    kind: str
    params: dict = field(default_factory=dict)
    domain: tuple = (0.0, math.inf)

    def contains(self, e: EffortLike) -> bool:
        v = effort_value(e)
        lo, hi = self.domain
        if self.kind == "custom-table":
            return lo <= v <= hi
        return lo < v < hi


def _table_arrays(params) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(params["e"], dtype=float)
    s = np.asarray(params["sigma2"], dtype=float)
    return e, s


def _shape_check_grid(mapping: EffortMapping) -> tuple[np.ndarray, np.ndarray]:
    """Grid used to verify the decreasing/convex shape of sigma2 at load."""
    if mapping.kind == "custom-table":
        e, s = _table_arrays(mapping.params)
        return e, s
    lo, _ = mapping.domain
    grid = np.linspace(lo + 1e-3, lo + 20.0, 129)
    vals = np.array([sigma2(mapping, g) for g in grid])
    return grid, vals


def effort_mapping(kind: str, params: dict | None = None) -> EffortMapping:
    """Build and numerically validate an effort-to-variance mapping.

    Supported kinds:

    - ``reciprocal``: sigma2(e) = scale / e on (e_min, inf);
      params ``scale`` (default 1.0) and ``e_min`` (default 1e-6, a numeric
      floor that keeps 1/e bounded).
    - ``exponential-decay``: sigma2(e) = amplitude * exp(-rate * e) + offset
      on (e_min, inf); params ``amplitude`` (default 1.0), ``rate``
      (default 1.0), ``offset`` (default 0.0), ``e_min`` (default 0.0).
    - ``custom-table``: linear interpolation of a tabulated grid; params
      ``e`` (ascending) and ``sigma2``; domain is the table range and
      derivatives come from finite differences on the table nodes.

    Raises ConfigError if the sampled map is not strictly decreasing with
    nonnegative discrete curvature, or if sigma2 is not positive.
    """
    params = dict(params or {})
    if kind not in EFFORT_KINDS:
        raise ConfigError(f"effort_mapping: unknown kind {kind!r}")
    if kind == "reciprocal":
        scale = float(params.setdefault("scale", 1.0))
        e_min = float(params.setdefault("e_min", 1e-6))
        if scale <= 0:
            raise ConfigError("effort_mapping: scale must be positive")
        if e_min < 0:
            raise ConfigError("effort_mapping: e_min must be nonnegative")
        mapping = EffortMapping("reciprocal", params, (e_min, math.inf))
    elif kind == "exponential-decay":
        amplitude = float(params.setdefault("amplitude", 1.0))
        rate = float(params.setdefault("rate", 1.0))
        offset = float(params.setdefault("offset", 0.0))
        e_min = float(params.setdefault("e_min", 0.0))
        if amplitude <= 0 or rate <= 0:
            raise ConfigError("effort_mapping: amplitude and rate must be positive")
        if offset < 0 or e_min < 0:
            raise ConfigError("effort_mapping: offset and e_min must be nonnegative")
        mapping = EffortMapping("exponential-decay", params, (e_min, math.inf))
    else:
        try:
            e, s = _table_arrays(params)
        except KeyError as exc:
            raise ConfigError(f"effort_mapping: missing table key {exc}") from exc
        if e.ndim != 1 or e.shape != s.shape or e.size < 3:
            raise ConfigError("effort_mapping: table needs matching e/sigma2 arrays of length >= 3")
        if not np.all(np.diff(e) > 0):
            raise ConfigError("effort_mapping: table efforts must be strictly increasing")
        params["e"] = _freeze(e)
        params["sigma2"] = _freeze(s)
        mapping = EffortMapping("custom-table", params, (float(e[0]), float(e[-1])))

    grid, vals = _shape_check_grid(mapping)
    if np.any(vals <= 0):
        raise ConfigError("effort_mapping: sigma2 must be positive on its domain")
    if not np.all(np.diff(vals) < 0):
        raise ConfigError("effort_mapping: sigma2 not strictly decreasing on check grid")
    # Discrete convexity; divided differences handle uneven table grids.
    h = np.diff(grid)
    second = 2.0 * ((vals[2:] - vals[1:-1]) / h[1:] - (vals[1:-1] - vals[:-2]) / h[:-1]) / (h[1:] + h[:-1])
    if np.any(second * (h[1:] * h[:-1]) < -1e-9):
        raise ConfigError("effort_mapping: sigma2 fails convexity check on grid")
    return mapping


def _require_in_domain(mapping: EffortMapping, e: EffortLike) -> float:
    v = effort_value(e)
    if not math.isfinite(v) or not mapping.contains(v):
        raise EffortDomainError(
            f"effort {v!r} outside admissible domain {mapping.domain} for kind {mapping.kind!r}"
        )
    return v


def sigma2(mapping: EffortMapping, e: EffortLike) -> float:
    """Evaluate the noise variance sigma2 at an admissible effort."""
    v = _require_in_domain(mapping, e)
    if mapping.kind == "reciprocal":
        return mapping.params["scale"] / v
    if mapping.kind == "exponential-decay":
        p = mapping.params
        return p["amplitude"] * math.exp(-p["rate"] * v) + p["offset"]
    e_tab, s_tab = _table_arrays(mapping.params)
    return float(np.interp(v, e_tab, s_tab))


def sigma2_derivs(mapping: EffortMapping, e: EffortLike) -> tuple[float, float]:
    """First and second derivative of sigma2 at an admissible effort.

    Analytic for the function kinds; central finite differences on the table
    nodes (interpolated to e) for custom tables.
    """
    v = _require_in_domain(mapping, e)
    if mapping.kind == "reciprocal":
        s = mapping.params["scale"]
        return -s / v**2, 2.0 * s / v**3
    if mapping.kind == "exponential-decay":
        p = mapping.params
        core = p["amplitude"] * math.exp(-p["rate"] * v)
        return -p["rate"] * core, p["rate"] ** 2 * core
    e_tab, s_tab = _table_arrays(mapping.params)
    d1 = np.gradient(s_tab, e_tab)
    d2 = np.gradient(d1, e_tab)
    return float(np.interp(v, e_tab, d1)), float(np.interp(v, e_tab, d2))


def measurement_covariance(spec: SystemSpec, mapping: EffortMapping, e: EffortLike) -> np.ndarray:
    """Total measurement covariance diag(SigmaVr, sigma2(e) I) at effort e."""
    s2 = sigma2(mapping, e)
    p_r, p_s = spec.p_r, spec.p_s
    out = np.zeros((p_r + p_s, p_r + p_s))
    out[:p_r, :p_r] = spec.SigmaVr
    out[p_r:, p_r:] = s2 * np.eye(p_s)
    return out


_MATRIX_FIELDS = ("A", "B", "Cr", "Cs", "SigmaX0", "SigmaW", "SigmaVr", "Q", "R")


def _parse_matrix(raw, name: str) -> np.ndarray:
    if not isinstance(raw, list):
        raise ConfigError(f"field {name} must be an array of arrays")
    if len(raw) == 0:
        return np.zeros((0, 0))
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {name} is not a rectangular numeric matrix") from exc
    if arr.ndim != 2:
        raise ConfigError(f"field {name} is not a rectangular numeric matrix")
    return arr


def load_config(path) -> tuple[SystemSpec, EffortMapping]:
    """Load and validate a JSON system config.

    The file holds row-major matrices under the keys A, B, Cr, Cs, SigmaX0,
    SigmaW, SigmaVr, Q, R, the integer horizon N, and an ``effort_mapping``
    object with ``kind`` and ``params``. Identical file bytes produce an
    identical spec. Raises ConfigError naming the offending field on any
    parse or validation failure.
    """
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    for key in _MATRIX_FIELDS + ("N", "effort_mapping"):
        if key not in doc:
            raise ConfigError(f"missing field: {key}")
    mats = {name: _parse_matrix(doc[name], name) for name in _MATRIX_FIELDS}
    N = doc["N"]
    if isinstance(N, bool) or not isinstance(N, int) or N < 0:
        raise ConfigError("N must be a nonnegative integer")
    em = doc["effort_mapping"]
    if not isinstance(em, dict) or "kind" not in em:
        raise ConfigError("effort_mapping must be an object with a kind")
    mapping = effort_mapping(em["kind"], em.get("params") or {})
    spec = SystemSpec(N=N, **mats)
    return spec, mapping
