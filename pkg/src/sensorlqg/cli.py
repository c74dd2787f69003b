"""Reproducible experiment commands emitting CSV/JSON artifacts.

Every command reads a JSON system config, writes its data files plus a
``manifest.json`` into the output directory, and is deterministic given
the config bytes, flags, and seed. Numeric CSV cells carry 17 significant
digits with LF line endings. Exit codes: 0 success, 1 a checked property
failed, 2 I/O or config error, 3 payment design did not converge.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .costlab import CostCache
from .incentives import (
    CORRECTED_P,
    STATIC_P0,
    BjQuadratic,
    DesignConvergenceError,
    PaymentScheme,
    audit_truthfulness,
    best_response_scan,
    design_bj,
    first_order_condition_terms,
)
from .lqg import solve_kalman
from .model import ConfigError, EffortDomainError, SystemSpec, load_config, sigma2
from .montecarlo import mc_moments

__all__ = ["main", "RunManifest"]

EXIT_OK = 0
EXIT_PROPERTY_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_DESIGN_FAILED = 3


@dataclass
class RunManifest:
    """Record of one CLI run: command, inputs, parameters, outputs."""

    command: str
    config_path: str
    parameters: dict
    outputs: list = field(default_factory=list)
    tool_version: str = __version__

    def to_json(self) -> str:
        doc = {
            "command": self.command,
            "config_path": self.config_path,
            "parameters": self.parameters,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _csv(header: list[str], rows: list[list[float]]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _parse_grid(text: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] != "log"):
        raise argparse.ArgumentTypeError(
            f"grid must be lo:hi:count or lo:hi:count:log, got {text!r}"
        )
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: {exc}") from exc
    if count < 1 or lo <= 0 and len(parts) == 4:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}")
    if len(parts) == 4:
        return np.geomspace(lo, hi, count)
    return np.linspace(lo, hi, count)


def _write_outputs(out_dir: str, files: dict[str, str]) -> None:
    """Write all artifacts, staging through temp names so a failed run
    leaves no partial files behind."""
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            tmp = os.path.join(out_dir, name + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(text.encode("utf-8"))
            staged.append((tmp, os.path.join(out_dir, name)))
        for tmp, final in staged:
            os.replace(tmp, final)
    except OSError:
        for tmp, _ in staged:
            try:
                os.remove(tmp)
            except OSError:
                pass
        raise


def _emit(out_dir: str, manifest: RunManifest, files: dict[str, str]) -> None:
    manifest.outputs = sorted(files)
    files = dict(files)
    files["manifest.json"] = manifest.to_json()
    _write_outputs(out_dir, files)


def _with_horizon(spec: SystemSpec, horizon: int) -> SystemSpec:
    if horizon <= 0 or horizon == spec.N:
        return spec
    return SystemSpec(
        A=spec.A, B=spec.B, Cr=spec.Cr, Cs=spec.Cs, SigmaX0=spec.SigmaX0,
        SigmaW=spec.SigmaW, SigmaVr=spec.SigmaVr, Q=spec.Q, R=spec.R, N=horizon,
    )


def cmd_fig2(args) -> int:
    spec, mapping = load_config(args.config)
    cache = CostCache(spec, mapping)
    rows = []
    for ehat in args.ehat_grid:
        pt = cache.point(float(ehat))
        rows.append([pt.ehat, pt.f1, pt.f2])
    manifest = RunManifest(
        command="fig2",
        config_path=args.config,
        parameters={"ehat_grid": args.ehat_grid_raw},
    )
    _emit(args.out, manifest, {"fig2.csv": _csv(["e_hat", "f1", "f2"], rows)})
    return EXIT_OK


def cmd_fig3(args) -> int:
    spec, mapping = load_config(args.config)
    cache = CostCache(spec, mapping)
    e_list = [float(v) for v in args.e_grid]
    sweep = sorted(set(float(v) for v in args.ehat_grid) | set(e_list))
    rows = []
    for e in e_list:
        s2e = sigma2(mapping, e)
        for ehat in sweep:
            pt = cache.point(ehat)
            rows.append([e, ehat, pt.expected_cost_at(s2e), pt.jstar])
    manifest = RunManifest(
        command="fig3",
        config_path=args.config,
        parameters={"e_grid": args.e_grid_raw, "ehat_grid": args.ehat_grid_raw},
    )
    _emit(args.out, manifest, {"fig3.csv": _csv(["e", "e_hat", "expected_J", "j_star"], rows)})
    return EXIT_OK


def cmd_mc_validate(args) -> int:
    spec, mapping = load_config(args.config)
    spec = _with_horizon(spec, args.horizon)
    if args.samples < 2:
        raise ConfigError("--samples must be at least 2")
    cache = CostCache(spec, mapping)
    analytic = cache.moments(args.e, args.ehat)
    report = mc_moments(spec, mapping, args.e, args.ehat, args.samples, args.seed)
    mean_ok = abs(report.mean_cost - analytic.expected_cost) <= 3.0 * report.std_error_mean
    var_ok = abs(report.var_cost - analytic.variance) <= 3.0 * report.std_error_var
    doc = {
        "analytic": {"E_J": analytic.expected_cost, "Var_J": analytic.variance},
        "sampled": {
            "mean": report.mean_cost,
            "var": report.var_cost,
            "se_mean": report.std_error_mean,
            "se_var": report.std_error_var,
        },
        "sample_count": report.sample_count,
        "seed": report.seed,
        "horizon": spec.N,
        "e": args.e,
        "e_hat": args.ehat,
        "pass_mean": mean_ok,
        "pass_var": var_ok,
        "pass": mean_ok and var_ok,
    }
    manifest = RunManifest(
        command="mc-validate",
        config_path=args.config,
        parameters={
            "e": args.e, "ehat": args.ehat, "samples": args.samples,
            "seed": args.seed, "horizon": args.horizon,
        },
    )
    _emit(args.out, manifest, {"mc_validate.json": json.dumps(doc, indent=2, sort_keys=True) + "\n"})
    return EXIT_OK if doc["pass"] else EXIT_PROPERTY_FAILED


def cmd_audit(args) -> int:
    spec, mapping = load_config(args.config)
    cache = CostCache(spec, mapping)
    doc = {
        "anchor_e": args.anchor_e,
        "a": args.a,
        "b_e": args.b_e,
        "scheme": args.scheme,
    }
    if args.scheme == "p0":
        scheme = PaymentScheme(kind=STATIC_P0, a=args.a, b_e=args.b_e, b_j=args.b_j)
        doc["b_j"] = args.b_j
    else:
        scheme = design_bj(
            spec, mapping, args.anchor_e, a=args.a, b_e=args.b_e,
            curvature_margin=args.curvature_margin, fd_step=args.fd_step,
            audit_halfwidth=args.window, cache=cache,
        )
        bj: BjQuadratic = scheme.b_j
        terms = first_order_condition_terms(spec, mapping, scheme, args.anchor_e, fd_step=args.fd_step, cache=cache)
        doc["designed_b_j"] = {
            "anchor": bj.anchor, "beta0": bj.beta0, "beta1": bj.beta1, "beta2": bj.beta2,
        }
        doc["first_order_condition"] = {
            "terms": list(terms["terms"]),
            "residual_rel": terms["residual_rel"],
            "dV_dehat": terms["dV_dehat"],
            "df2_dehat": terms["df2_dehat"],
        }
    audit = audit_truthfulness(
        spec, mapping, scheme, args.anchor_e, fd_step=args.fd_step, cache=cache
    )
    doc["audit"] = {
        "first_deriv": audit.first_deriv,
        "second_deriv": audit.second_deriv,
        "utility_first_deriv": audit.utility_first_deriv,
        "fd_step": audit.fd_step,
        "verdict": audit.verdict,
    }
    if args.scheme == "p":
        grid = np.linspace(args.anchor_e - args.window, args.anchor_e + args.window, 41)
        grid = grid[[mapping.contains(float(g)) for g in grid]]
        scan = best_response_scan(spec, mapping, scheme, args.anchor_e, grid, cache=cache)
        doc["scan"] = {
            "ehat_argmax": float(scan.ehat[scan.argmax_index]),
            "window": args.window,
            "points": int(scan.ehat.size),
        }
    manifest = RunManifest(
        command="audit",
        config_path=args.config,
        parameters={
            "scheme": args.scheme, "anchor_e": args.anchor_e, "a": args.a,
            "b_e": args.b_e, "b_j": args.b_j, "curvature_margin": args.curvature_margin,
            "window": args.window,
        },
    )
    _emit(args.out, manifest, {"audit.json": json.dumps(doc, indent=2, sort_keys=True) + "\n"})
    return EXIT_OK


def _check_effort_monotonicity(cache: CostCache, mapping, e_grid) -> dict:
    """Fixed report: expected cost strictly decreasing and convex in e."""
    pt = cache.point(1.0)
    vals = np.array([pt.expected_cost_at(sigma2(mapping, float(e))) for e in e_grid])
    dec = bool(np.all(np.diff(vals) < 0))
    second = np.diff(vals, 2)
    cvx = bool(np.all(second >= -1e-9))
    return {"pass": dec and cvx, "strictly_decreasing": dec, "discretely_convex": cvx,
            "grid_points": int(len(e_grid))}


def _check_mixed_curvature(cache: CostCache, mapping, grid) -> dict:
    """The cost surface is neither convex nor concave over (e, ehat)."""
    pts = {float(g): cache.point(float(g)) for g in grid}
    F = np.array([
        [pts[float(eh)].expected_cost_at(sigma2(mapping, float(e))) for eh in grid]
        for e in grid
    ])
    h = float(grid[1] - grid[0]) if len(grid) > 1 else 1.0
    nonconvex = nonconcave = 0
    for i in range(1, len(grid) - 1):
        for j in range(1, len(grid) - 1):
            h11 = (F[i + 1, j] - 2 * F[i, j] + F[i - 1, j]) / h**2
            h22 = (F[i, j + 1] - 2 * F[i, j] + F[i, j - 1]) / h**2
            h12 = (F[i + 1, j + 1] - F[i + 1, j - 1] - F[i - 1, j + 1] + F[i - 1, j - 1]) / (4 * h * h)
            lam = np.linalg.eigvalsh(np.array([[h11, h12], [h12, h22]]))
            if lam[0] < -1e-9:
                nonconvex += 1
            if lam[1] > 1e-9:
                nonconcave += 1
    ok = nonconvex > 0 and nonconcave > 0
    return {"pass": ok, "nonconvex_points": nonconvex, "nonconcave_points": nonconcave,
            "interior_points": (len(grid) - 2) ** 2}


def _check_report_monotonicity(cache: CostCache, ehat_grid) -> dict:
    """Truthful cost decreasing in the report; posteriors shrink too."""
    js = np.array([cache.point(float(g)).jstar for g in ehat_grid])
    dec = bool(np.all(np.diff(js) < 0))
    spec, mapping = cache.spec, cache.mapping
    pairs = [(0.5, 1.0), (1.0, 2.0), (2.0, 4.0)]
    ks = [k for k in (1, 10, 50) if k <= spec.N]
    order_ok = True
    for lo, hi in pairs:
        kal_lo = solve_kalman(spec, mapping, lo)
        kal_hi = solve_kalman(spec, mapping, hi)
        for k in ks:
            gap = kal_lo.SigmaFiltered[k] - kal_hi.SigmaFiltered[k]
            if float(np.min(np.linalg.eigvalsh((gap + gap.T) / 2.0))) < -1e-9:
                order_ok = False
    return {"pass": dec and order_ok, "jstar_strictly_decreasing": dec,
            "posterior_psd_order": order_ok, "grid_points": int(len(ehat_grid))}


def cmd_props(args) -> int:
    spec, mapping = load_config(args.config)
    cache = CostCache(spec, mapping)
    results = {
        "effort_monotonicity": _check_effort_monotonicity(cache, mapping, args.e_grid),
        "mixed_curvature": _check_mixed_curvature(cache, mapping, args.curvature_grid),
        "report_monotonicity": _check_report_monotonicity(cache, args.ehat_grid),
    }
    for name, result in results.items():
        print(f"{name.replace('_', '-')}: {'PASS' if result['pass'] else 'FAIL'}")
    manifest = RunManifest(
        command="props",
        config_path=args.config,
        parameters={
            "e_grid": args.e_grid_raw, "ehat_grid": args.ehat_grid_raw,
            "curvature_grid": args.curvature_grid_raw,
        },
    )
    _emit(args.out, manifest, {"props.json": json.dumps(results, indent=2, sort_keys=True) + "\n"})
    return EXIT_OK if all(r["pass"] for r in results.values()) else EXIT_PROPERTY_FAILED


def _add_common(sub):
    sub.add_argument("--config", required=True, help="path to the JSON system config")
    sub.add_argument("--out", required=True, help="output directory for artifacts")


def _grid_arg(sub, flag, default, helptext):
    sub.add_argument(flag, default=default, metavar="lo:hi:count[:log]", help=helptext)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sensorlqg",
        description="Strategic-sensor LQG experiments: cost decomposition, "
        "Monte Carlo validation, and payment audits.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    fig2 = subs.add_parser("fig2", help="tabulate the decomposition terms over a report grid")
    _add_common(fig2)
    _grid_arg(fig2, "--ehat-grid", "0.1:10:64:log", "reported-effort grid")
    fig2.set_defaults(func=cmd_fig2)

    fig3 = subs.add_parser("fig3", help="tabulate expected cost curves and the truthful cost")
    _add_common(fig3)
    _grid_arg(fig3, "--e-grid", "0.5:2:3:log", "true-effort values (one curve each)")
    _grid_arg(fig3, "--ehat-grid", "0.1:10:64:log", "reported-effort grid")
    fig3.set_defaults(func=cmd_fig3)

    mcv = subs.add_parser("mc-validate", help="compare sampled cost moments to the exact ones")
    _add_common(mcv)
    mcv.add_argument("--e", type=float, default=1.0, help="true effort")
    mcv.add_argument("--ehat", type=float, default=1.0, help="reported effort")
    mcv.add_argument("--samples", type=int, default=100_000, help="sample count")
    mcv.add_argument("--seed", type=int, default=0, help="base seed (64-bit)")
    mcv.add_argument("--horizon", type=int, default=50,
                     help="horizon override for the run; 0 keeps the config horizon")
    mcv.set_defaults(func=cmd_mc_validate)

    audit = subs.add_parser("audit", help="audit a payment scheme for local truthfulness")
    _add_common(audit)
    audit.add_argument("--scheme", choices=("p0", "p"), required=True)
    audit.add_argument("--anchor-e", type=float, default=1.0, help="effort anchor for the audit")
    audit.add_argument("--a", type=float, default=1e3, help="base payment")
    audit.add_argument("--b-e", type=float, default=1.0, help="cost-internalization weight")
    audit.add_argument("--b-j", type=float, default=1.0, help="penalty weight (p0 only)")
    audit.add_argument("--curvature-margin", type=float, default=1e-3,
                       help="required negative curvature at the anchor (p only)")
    audit.add_argument("--fd-step", type=float, default=None, help="finite-difference step")
    audit.add_argument("--window", type=float, default=0.2, help="audit window halfwidth")
    audit.set_defaults(func=cmd_audit)

    props = subs.add_parser("props", help="run the monotonicity/shape property suite")
    _add_common(props)
    _grid_arg(props, "--e-grid", "0.2:5:32", "true-effort grid for the fixed-report check")
    _grid_arg(props, "--ehat-grid", "0.1:10:64:log", "report grid for the truthful-cost check")
    _grid_arg(props, "--curvature-grid", "0.4:2.8:9", "uniform grid for the curvature sign scan")
    props.set_defaults(func=cmd_props)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for name in ("e_grid", "ehat_grid", "curvature_grid"):
            if hasattr(args, name):
                raw = getattr(args, name)
                setattr(args, name + "_raw", raw)
                setattr(args, name, _parse_grid(raw))
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        return args.func(args)
    except (ConfigError, EffortDomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except DesignConvergenceError as exc:
        print(f"design failed: {exc}", file=sys.stderr)
        return EXIT_DESIGN_FAILED


if __name__ == "__main__":
    sys.exit(main())
