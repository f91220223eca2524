"""Config-driven experiment runner.

Usage::

    gradflows euclidean --config run.json [--out-dir DIR] [--seed N] [--dt DT] [--t-final T]
    gradflows verify [--quick] [--out-dir DIR]

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a tracked identity misses its tolerance.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import euclidean as eu
from . import product as pr
from . import verify as vf
from . import wasserstein as ws
from ._backend import BACKEND
from .density import Grid, GridDensity, check_support, gaussian_density, relative_entropy
from .io import write_csv, write_density, write_json
from .objectives import boltzmann_density, objective_from_spec, potential_from_spec

KINDS = ("euclidean", "newton", "sgd", "fokker_planck", "product", "verify")
SUBCOMMANDS = {k.replace("_", "-"): k for k in KINDS}
DEFAULT_HALF_WIDTH = 10.0


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- parsing


def _number(cfg, key, diags, positive=True, default=None):
    if key not in cfg:
        if default is None:
            diags.append(f"{key}: missing")
        return default
    try:
        v = float(cfg[key])
    except (TypeError, ValueError):
        diags.append(f"{key}: not a number ({cfg[key]!r})")
        return None
    if not math.isfinite(v):
        diags.append(f"{key}: must be finite, got {v}")
        return None
    if positive and v <= 0:
        diags.append(f"{key}: must be positive, got {v}")
        return None
    return v


def build_grid(spec: dict, dimension: int = 1) -> Grid:
    """Grid from ``{"lower", "upper", "nodes"}`` or ``{"half_width", "nodes"}``."""
    nodes = spec.get("nodes")
    if nodes is None:
        raise ConfigError("grid.nodes: missing")
    nodes = list(np.atleast_1d(nodes))
    if len(nodes) == 1 and dimension > 1:
        nodes = nodes * dimension
    if "lower" in spec or "upper" in spec:
        lower, upper = spec.get("lower"), spec.get("upper")
    else:
        hw = float(spec.get("half_width", DEFAULT_HALF_WIDTH))
        lower, upper = [-hw] * len(nodes), [hw] * len(nodes)
    return Grid(lower, upper, nodes)


def build_density(spec: dict, grid: Grid, field: str) -> GridDensity:
    kind = spec.get("kind", "gaussian")
    if kind != "gaussian":
        raise ConfigError(f"{field}.kind: unknown density kind {kind!r}; choose from gaussian")
    if "mean" not in spec or "variance" not in spec:
        raise ConfigError(f"{field}: gaussian needs mean and variance")
    var = np.asarray(spec["variance"], dtype=float)
    if var.ndim == 0 and not var > 0:
        raise ConfigError(f"{field}.variance: must be positive")
    return gaussian_density(grid, spec["mean"], var)


def _perturbation(cfg, diags):
    block = cfg.get("perturbation")
    if block is None:
        return None
    m = block.get("m", 0)
    eps = block.get("epsilon", 0.0)
    if not isinstance(m, int) or m < 0:
        diags.append(f"perturbation.m: must be a nonnegative integer, got {m!r}")
    try:
        eps = float(eps)
        if not (math.isfinite(eps) and eps >= 0):
            raise ValueError
    except (TypeError, ValueError):
        diags.append(f"perturbation.epsilon: must be finite and >= 0, got {block.get('epsilon')!r}")
    return block


def _parse(config: dict, kind: str):
    """Build run objects; returns ``(objects, diagnostics)``."""
    diags: list[str] = []
    obj = {}
    if kind not in KINDS:
        return obj, [f"kind: unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}"]
    declared = config.get("kind")
    if declared is not None and str(declared).replace("-", "_") != kind:
        diags.append(f"kind: config declares {declared!r} but subcommand is {kind!r}")
    seed = config.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        diags.append(f"seed: must be an integer in [0, 2^64), got {seed!r}")
    obj["seed"] = seed
    if kind == "verify":
        return obj, diags
    T = _number(config, "T", diags)
    dt = _number(config, "dt", diags)
    if T is not None and dt is not None and dt > T:
        diags.append(f"dt: {dt} exceeds T={T}")
    obj.update(T=T, dt=dt, perturbation=_perturbation(config, diags))

    if kind in ("euclidean", "newton", "sgd"):
        try:
            f = objective_from_spec(config.get("objective", {}))
            obj["f"] = f
        except KeyError as exc:
            diags.append(f"objective.name: {exc.args[0]}")
            return obj, diags
        except (ValueError, TypeError) as exc:
            diags.append(f"objective: {exc}")
            return obj, diags
        x0 = np.asarray(config.get("x0", []), dtype=float).reshape(-1)
        if x0.shape != (f.dimension,) or not np.all(np.isfinite(x0)):
            diags.append(f"x0: need {f.dimension} finite values, got {config.get('x0')!r}")
        obj["x0"] = x0
        if kind == "newton" and f.hessian is None:
            diags.append("objective: Newton flow needs a Hessian")
        if kind == "sgd":
            block = config.get("projection", {})
            k = block.get("batch_size")
            if not isinstance(k, int) or not 1 <= k <= f.dimension:
                diags.append(f"projection.batch_size: must be an integer in [1, {f.dimension}], "
                             f"got {k!r}")
            interval = _number(block, "resample_interval", [], default=dt)
            if interval is None or (dt is not None and interval < dt):
                diags.append("projection.resample_interval: must be >= dt")
            obj["projection"] = (k, interval)
        return obj, diags

    if kind == "fokker_planck":
        try:
            pot = potential_from_spec(config.get("potential", {}))
            obj["potential"] = pot
        except KeyError as exc:
            diags.append(f"potential.name: {exc.args[0]}")
            return obj, diags
        except (ValueError, TypeError) as exc:
            diags.append(f"potential: {exc}")
            return obj, diags
        dim = pot.dimension
    else:
        dim = len(np.atleast_1d(config.get("initial", {}).get("mean", [0.0])))
    try:
        grid = build_grid(config.get("grid", {}), dim)
        obj["grid"] = grid
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        diags.append(msg if msg.startswith("grid") else f"grid: {msg}")
        return obj, diags
    if kind == "fokker_planck" and grid.dim != dim:
        diags.append(f"grid: dimension {grid.dim} does not match potential dimension {dim}")
        return obj, diags
    scheme = config.get("scheme", "sg")
    if kind == "fokker_planck" and scheme not in ws.SCHEMES:
        diags.append(f"scheme: unknown scheme {scheme!r}; choose from {', '.join(ws.SCHEMES)}")
    obj["scheme"] = scheme
    try:
        if kind == "fokker_planck":
            obj["rho0"] = build_density(config.get("initial", {}), grid, "initial")
            boltzmann_density(obj["potential"], grid)
            if dt is not None and T is not None:
                ws.check_stability(obj["potential"], grid, dt)
        else:
            rt = build_density(config.get("initial_tilde", {}), grid, "initial_tilde")
            r = build_density(config.get("initial", {}), grid, "initial")
            check_support(rt, r)
            obj["state0"] = pr.ProductState(rt, r)
    except ws.StabilityError as exc:
        diags.append(f"dt: {exc}")
    except (ValueError, TypeError) as exc:
        diags.append(str(exc))
    if kind == "product":
        obj["stop_fisher"] = _number(config, "stop_fisher", [], default=None) \
            if "stop_fisher" in config else None
        obj["eta"] = _number(config, "max_rel_decrease", diags, default=1e-3)
        method = config.get("method", "implicit")
        if method not in ("implicit", "explicit"):
            diags.append(f"method: unknown method {method!r}; choose from implicit, explicit")
        obj["method"] = method
    return obj, diags


def validate(config: dict, kind: str | None = None) -> list[str]:
    """Return configuration diagnostics; empty iff :func:`run` would not exit 1 for the config."""
    if not isinstance(config, dict):
        return ["config: must be a JSON object"]
    kind = kind or str(config.get("kind", "")).replace("-", "_")
    _, diags = _parse(config, kind)
    return diags


# ---------------------------------------------------------------- runners


def _check(name, residual, tol):
    residual = float(residual)
    return {"name": name, "residual": residual, "tolerance": tol,
            "passed": bool(math.isfinite(residual) and residual <= tol)}


def _run_euclidean(kind, obj, out: Path):
    f, x0, T, dt = obj["f"], obj["x0"], obj["T"], obj["dt"]
    proj = None
    if kind == "euclidean":
        traj, weighting = eu.gradient_flow(f, x0, T, dt), "identity"
    elif kind == "newton":
        traj, weighting = eu.newton_flow(f, x0, T, dt), "inverse_hessian"
    else:
        k, interval = obj["projection"]
        proj = eu.ProjectionProcess(f.dimension, k, interval, seed=obj["seed"])
        traj, weighting = eu.sgd_flow(f, x0, T, dt, proj), "projection"
    steps = eu.running_cost_steps(traj, f, weighting)
    running = np.concatenate([[0.0], np.cumsum(steps)])
    fx = f.evaluate(traj.states)
    g = f.gradient(traj.states)
    masks = traj.masks
    if masks is not None:
        masks = np.vstack([masks, masks[-1:]])
    gsq = eu._weighted_sq(f, weighting, traj.states, g, masks)
    n = f.dimension
    header = ["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)] \
        + ["f", "grad_norm_sq", "running_action"]
    rows = []
    for i, t in enumerate(traj.times):
        u = list(traj.controls[i]) if i < len(traj.controls) else [None] * n
        rows.append([t, *traj.states[i], *u, fx[i], gsq[i], running[i]])
    files = [write_csv(out / "trajectory.csv", header, rows)]
    cost = eu.AccountedCost(float(running[-1]), float(fx[-1]))
    f0 = float(fx[0])
    tol = 1e-6 + 10 * dt ** 2 * T * max(1.0, abs(f0))
    slack = 1e-12 if kind != "sgd" else 10 * dt ** 2
    checks = [_check("action = f(x0)", abs(cost.total - f0), tol),
              _check("f nonincreasing", max(np.max(np.diff(fx), initial=0.0) - slack, 0.0), 0.0)]
    summary = {"kind": kind, "weighting": weighting, "f_x0": f0, "f_xT": float(fx[-1]),
               "running": cost.running, "terminal": cost.terminal, "total": cost.total,
               "lagrange": eu.lagrange_functional(traj, f) if masks is None else None,
               "steps": len(traj.times) - 1}
    block = obj["perturbation"]
    if block is not None:
        rep = eu.optimality_gap(f, x0, T, dt, weighting, int(block.get("m", 0)),
                                float(block.get("epsilon", 0.0)), obj["seed"], proj)
        files.append(write_json(out / "gap.json", rep.to_json()))
        checks.append(_check("perturbed totals >= optimal", max(-rep.gap, 0.0)
                             if rep.samples.size else 0.0, rep.tolerance))
    return files, summary, checks


def _run_fp(obj, out: Path):
    rho0, pot, T, dt = obj["rho0"], obj["potential"], obj["T"], obj["dt"]
    snaps, rep = ws.fokker_planck_flow(rho0, pot, T, dt, obj["scheme"])
    rows = zip(rep.times, rep.divergence_series, rep.fisher_series, rep.mass_series,
               rep.action_running)
    files = [write_csv(out / "report.csv",
                       ["t", "divergence", "fisher", "mass", "running_action"], rows)]
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    for i, s in enumerate(snaps):
        files += list(write_density(snapdir / f"{i:03d}", s))
    rho_bar = boltzmann_density(pot, rho0.grid)
    D0 = relative_entropy(rho0, rho_bar)
    t, lhs, rhs = ws.dissipation_check_fp(rep) if len(rep.times) >= 3 else ([], [], [])
    t = np.asarray(t)
    win = (t >= 0.1 * T) & (t <= 0.9 * T)
    mismatch = float(np.max(np.abs(np.asarray(lhs) - np.asarray(rhs))[win], initial=0.0))
    checks = [
        _check("mass conservation", np.max(np.abs(rep.mass_series - rep.mass_series[0])), 1e-9),
        _check("divergence nonincreasing", max(np.max(np.diff(rep.divergence_series)), 0.0), 1e-8),
        _check("fluid action = D(rho0||rho_bar)", abs(rep.action.total - D0), 2e-2),
        _check("dD/dt = -fisher on [0.1T, 0.9T]", mismatch, 5e-3),
    ]
    last = snaps[-1]
    summary = {"kind": "fokker_planck", "scheme": rep.scheme, "dt": rep.dt,
               "terminal_mean": last.mean(), "terminal_covariance": last.covariance(),
               "initial_divergence": D0, "terminal_divergence": rep.terminal_divergence,
               "running": rep.action.running, "total": rep.action.total,
               "residuals": {c["name"]: c["residual"] for c in checks}}
    block = obj["perturbation"]
    if block is not None:
        gap = ws.optimality_gap_fp(rho0, pot, T, dt, int(block.get("m", 0)),
                                   float(block.get("epsilon", 0.0)), obj["seed"], obj["scheme"])
        files.append(write_json(out / "gap.json", gap.to_json()))
        checks.append(_check("perturbed totals >= optimal", max(-gap.gap, 0.0)
                             if gap.samples.size else 0.0, gap.tolerance))
    return files, summary, checks


def _run_product(obj, out: Path):
    s0, T, dt = obj["state0"], obj["T"], obj["dt"]
    snaps, rep = pr.product_flow_run(s0, T, dt, obj["method"], obj["stop_fisher"], obj["eta"])
    rows = zip(rep.times, rep.divergence_series, rep.reff_rate_series, rep.sum_drift_series,
               rep.mass_tilde_series, rep.mass_series, rep.action_running)
    files = [write_csv(out / "report.csv", ["t", "divergence", "reff_rate", "sum_drift",
                                            "mass_tilde", "mass", "running_action"], rows)]
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    for i, s in enumerate(snaps):
        files += list(write_density(snapdir / f"{i:03d}_tilde", s.rho_tilde))
        files += list(write_density(snapdir / f"{i:03d}_rho", s.rho))
    D0 = rep.divergence_series[0]
    checks = [
        _check("sum conservation", np.max(rep.sum_drift_series), 1e-12),
        _check("antisymmetric updates", rep.max_antisymmetry, 1e-12),
        _check("divergence nonincreasing", max(rep.max_divergence_increase, 0.0), 1e-8),
        _check("mass conservation", max(np.max(np.abs(rep.mass_series - 1)),
                                        np.max(np.abs(rep.mass_tilde_series - 1))), 1e-9),
        _check("product action = D(rho_tilde0||rho0)", abs(rep.action.total - D0), 2e-2),
    ]
    summary = {"kind": "product", "stop_time": rep.stop_time, "steps": len(rep.step_times) - 1,
               "halvings": rep.halvings, "initial_divergence": D0,
               "terminal_divergence": rep.terminal_divergence,
               "limit_distance": pr.barycenter_distance(s0, snaps[-1]),
               "running": rep.action.running, "total": rep.action.total,
               "residuals": {c["name"]: c["residual"] for c in checks}}
    block = obj["perturbation"]
    if block is not None:
        gap = pr.optimality_gap_product(s0, T, dt, int(block.get("m", 0)),
                                        float(block.get("epsilon", 0.0)), obj["seed"], obj["eta"])
        files.append(write_json(out / "gap.json", gap.to_json()))
        checks.append(_check("perturbed totals >= optimal", max(-gap.gap, 0.0)
                             if gap.samples.size else 0.0, gap.tolerance))
    return files, summary, checks


def _execute(kind, obj, out, quick, stream):
    if kind == "verify":
        results = vf.run_suite(quick=quick)
        print(vf.format_table(results), file=stream)
        checks = [{"name": r.name, "residual": r.residual, "tolerance": r.tolerance,
                   "passed": r.passed} for r in results]
        return [write_json(out / "summary.json", {"kind": "verify", "checks": checks})], None, checks
    if kind in ("euclidean", "newton", "sgd"):
        return _run_euclidean(kind, obj, out)
    if kind == "fokker_planck":
        return _run_fp(obj, out)
    return _run_product(obj, out)


def run(config: dict, kind: str | None = None, out_dir=None, quick: bool = False,
        stream=None) -> int:
    """Execute one experiment; returns the exit status."""
    stream = stream or sys.stdout
    kind = kind or str(config.get("kind", "")).replace("-", "_")
    diags = validate(config, kind)
    if diags:
        for d in diags:
            print(f"config error: {d}", file=sys.stderr)
        return 1
    obj, _ = _parse(config, kind)
    out = Path(out_dir or config.get("out_dir") or f"runs/{kind}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"config error: out_dir: cannot write to {out}: {exc}", file=sys.stderr)
        return 1

    try:
        files, summary, checks = _execute(kind, obj, out, quick, stream)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        # a numerical abort is a failed run, not a usage error
        files, summary = [], None
        checks = [{"name": f"run completed ({exc})", "residual": float("inf"),
                   "tolerance": 0.0, "passed": False}]
    if summary is not None:
        summary["checks"] = checks
        files.append(write_json(out / "summary.json", summary))
    echoed = dict(config)
    echoed["kind"] = kind
    manifest = {"tool": "gradflows", "version": __version__, "backend": BACKEND,
                "config": echoed, "files": sorted(str(Path(f).relative_to(out)) for f in files),
                "checks": checks, "passed": all(c["passed"] for c in checks)}
    write_json(out / "manifest.json", manifest)
    if kind != "verify":
        for c in checks:
            verdict = "PASS" if c["passed"] else "FAIL"
            print(f"{verdict}  {c['name']:<40s} residual={c['residual']:.3e}  "
                  f"tol={c['tolerance']:.1e}", file=stream)
    return 0 if manifest["passed"] else 2


def load_config(path) -> dict:
    """Read a JSON config; a manifest written by :func:`run` is accepted too."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and data.get("tool") == "gradflows" and "config" in data:
        data = data["config"]
    return data


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradflows", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "verify", help="JSON config file")
        s.add_argument("--out-dir", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--dt", type=float)
        s.add_argument("--t-final", type=float, dest="t_final")
        if name == "verify":
            s.add_argument("--quick", action="store_true", help="coarse grids, no perturbation studies")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 1
    kind = SUBCOMMANDS[args.command]
    config = {}
    if args.config:
        try:
            config = load_config(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
            return 1
    if not isinstance(config, dict):
        print("config error: config must be a JSON object", file=sys.stderr)
        return 1
    for key, value in (("seed", args.seed), ("dt", args.dt), ("T", args.t_final),
                       ("out_dir", args.out_dir)):
        if value is not None:
            config[key] = value
    return run(config, kind, quick=getattr(args, "quick", False))


if __name__ == "__main__":
    sys.exit(main())
