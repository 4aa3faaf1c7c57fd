"""Command line interface: ``dualmixed <command> --config run.json``.

Exit codes: 0 success (all verdicts hold), 1 a verdict failed, 2 the
configuration is invalid, 3 a numerical routine failed to converge.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from typing import Optional

import jsonschema
import numpy as np
import scipy

from . import __version__
from . import dualvol as dv
from . import dynamics as dyn
from . import finsler as fin
from . import starbody as sb
from . import systole as sy
from .exprlang import ExprError
from .geometry import GeometryError, ManifoldModel, build_grid

COMMANDS = ("volume", "dmv", "legendre", "flow", "systole", "normalform", "check", "report")

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class NumericalFailure(RuntimeError):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("dualmixed").joinpath("schema/config.schema.json").read_text())


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate_config(config) -> None:
    """Schema validation; the first error (by path) is raised with its JSON pointer."""
    validator = jsonschema.Draft7Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _pointer(e.absolute_path))


# ---------------------------------------------------------------------------
# building objects from a validated config


class Workspace:
    """Model, grid, named bodies and metrics of one run; names resolve lazily."""

    def __init__(self, config: dict, seed: int, tolerance_scale: float = 1.0):
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.tolerance_scale = tolerance_scale
        try:
            self.model = ManifoldModel.from_dict(config["model"])
        except GeometryError as exc:
            raise ConfigError(str(exc), "/model") from None
        g = config.get("grid", {})
        try:
            self.grid = build_grid(self.model, base=g.get("base"), fiber=g.get("fiber"))
        except GeometryError as exc:
            raise ConfigError(str(exc), "/grid") from None
        self._bodies = {}
        self._metrics = {}

    def option(self, key, default=None):
        return self.config.get("options", {}).get(key, default)

    def tolerance(self, key, default=None):
        tol = self.config.get("tolerances", {}).get(key, default)
        return None if tol is None else tol * self.tolerance_scale

    def metric(self, name: str, pointer: str) -> fin.FinslerMetric:
        if name not in self._metrics:
            spec = self.config.get("metrics", {}).get(name)
            if spec is None:
                raise ConfigError(f"undefined metric {name!r}", pointer)
            try:
                self._metrics[name] = fin.metric_from_config(spec, self.model)
            except (ExprError, fin.FinslerError) as exc:
                raise ConfigError(str(exc), f"/metrics/{name}") from None
        return self._metrics[name]

    def body(self, name: str, pointer: str, _stack=()) -> sb.StarBody:
        if name in self._bodies:
            return self._bodies[name]
        if name == "U" and "U" not in self.config.get("bodies", {}):
            return sb.model_body(self.grid)
        spec = self.config.get("bodies", {}).get(name)
        if spec is None:
            raise ConfigError(f"undefined body {name!r}", pointer)
        if name in _stack:
            raise ConfigError(f"body {name!r} is defined in terms of itself", f"/bodies/{name}")
        here = f"/bodies/{name}"
        kind = spec["kind"]
        try:
            if kind == "model":
                body = sb.model_body(self.grid)
            elif kind == "hamiltonian":
                H = sb.StarHamiltonian.from_expr(spec["expr"], self.model, name=name)
                body = sb.body_from_hamiltonian(H, self.grid, name=name)
            elif kind == "random":
                rng = np.random.default_rng(spec.get("seed", self.seed))
                H = sb.random_hamiltonian(self.model, rng, spec.get("modes", 3), spec.get("amplitude", 0.3), name)
                body = sb.body_from_hamiltonian(H, self.grid, name=name)
            elif kind == "metric":
                L = self.metric(spec["metric"], here + "/metric")
                H = fin.dual_hamiltonian(L, exact=L.dual is not None)
                body = sb.body_from_hamiltonian(H, self.grid, audit=False, name=name)
            else:
                of = spec["of"]
                if kind == "dilate":
                    body = sb.dilate(self.body(of, here + "/of", _stack + (name,)), spec["factor"])
                else:
                    if isinstance(of, str):
                        raise ConfigError(f"{kind} needs two operands", here + "/of")
                    a = self.body(of[0], here + "/of/0", _stack + (name,))
                    b = self.body(of[1], here + "/of/1", _stack + (name,))
                    body = {"radial_sum": sb.radial_sum, "union": sb.union, "intersection": sb.intersection}[kind](a, b)
        except ExprError as exc:
            raise ConfigError(str(exc), here + "/expr") from None
        except sb.StarBodyError as exc:
            raise ConfigError(str(exc), here) from None
        self._bodies[name] = body
        return body

    def hamiltonian(self, pointer="/options/hamiltonian") -> sb.StarHamiltonian:
        name = self.option("hamiltonian")
        if name is None:
            return sb.StarHamiltonian.model_norm(self.model)
        if name in self.config.get("metrics", {}):
            L = self.metric(name, pointer)
            return fin.dual_hamiltonian(L, exact=L.dual is not None)
        body = self.body(name, pointer)
        if body.hamiltonian is None:
            raise ConfigError(f"body {name!r} has no closed-form Hamiltonian", pointer)
        return body.hamiltonian


# ---------------------------------------------------------------------------
# commands


def _estimate(value, error):
    return {"value": float(value), "error": float(error)}


def cmd_volume(ws: Workspace, args):
    metric = ws.option("metric")
    if metric is not None:
        L = ws.metric(metric, "/options/metric")
        if args.notion == "busemann":
            if not L.reversible or ws.model.dim != 2:
                raise ConfigError("Busemann volume needs a reversible metric on a surface", "/options/metric")
            value = fin.busemann_volume(L, ws.grid)
        else:
            value = fin.holmes_thompson_volume(L, ws.grid, exact=L.dual is not None)
        return {"metric": metric, "notion": args.notion, "volume": value}, True
    name = ws.option("body", "U")
    A = ws.body(name, "/options/body")
    value = dv.volume(A)
    out = {"body": name, "volume": _estimate(value, dv.estimate_error(lambda bs: dv.volume(bs[0]), [A]))}
    out["model_volume"] = ws.model.model_volume
    return out, True


def cmd_dmv(ws: Workspace, args):
    names = ws.option("bodies") or ["U"] * ws.model.dim
    bodies = [ws.body(n, f"/options/bodies/{i}") for i, n in enumerate(names)]
    try:
        rep = dv.dual_mixed_volume(bodies)
    except dv.DualVolumeError as exc:
        raise ConfigError(str(exc), "/options/bodies") from None
    return {"bodies": names, "dmv": _estimate(rep.value, rep.error), "resolution": rep.resolution}, True


def _pair(ws: Workspace):
    names = ws.option("bodies")
    if names is None:
        for key in ("A", "B"):
            if key not in ws.config.get("bodies", {}):
                ws.config.setdefault("bodies", {})[key] = {"kind": "random", "seed": int(ws.rng.integers(2**31))}
        names = ["A", "B"]
    if len(names) != 2:
        raise ConfigError("check needs exactly two bodies", "/options/bodies")
    return [ws.body(n, f"/options/bodies/{i}") for i, n in enumerate(names)]


def cmd_check(ws: Workspace, args):
    A, B = _pair(ws)
    tol = ws.tolerance("verdict")
    verdicts = dv.run_checks(A, B, ws.option("lam", 0.7), ws.option("mu", 1.3), tol)
    if tol is None:
        verdicts = [v.rescaled(ws.tolerance_scale) for v in verdicts]
    out = [v.to_dict() for v in verdicts]
    return out, all(v.holds for v in verdicts)


def cmd_legendre(ws: Workspace, args):
    name = ws.option("metric")
    if name is None:
        raise ConfigError("legendre needs options.metric", "/options")
    L = ws.metric(name, "/options/metric")
    probes = ws.option("probes", 64)
    x, v = sb.probe_points(ws.model, probes, ws.rng)
    err = float(np.max(np.abs(fin.double_dual(L)(x, v) - L(x, v))))
    curv = min(fin.check_quadratic_convexity(L, xi).min_curvature for xi in x[: min(8, probes)])
    out = {
        "metric": name, "probes": probes, "involution_error": err,
        "min_curvature": float(curv), "quadratically_convex": bool(curv > fin.CONVEXITY_FLOOR),
        "holmes_thompson": fin.holmes_thompson_volume(L, ws.grid),
    }
    if L.reversible and ws.model.dim == 2:
        out["busemann"] = fin.busemann_volume(L, ws.grid)
    tol = ws.tolerance("verdict", 1e-5)
    return out, err <= tol


def cmd_flow(ws: Workspace, args):
    H = ws.hamiltonian()
    d = ws.model.ambient_dim
    x0 = np.asarray(ws.option("x0", [0.0] * d if ws.model.kind == "torus" else [1.0, 0.0, 0.0]), dtype=float)
    p0 = np.asarray(ws.option("p0", [1.0] + [0.0] * (d - 1) if ws.model.kind == "torus" else [0.0, 1.0, 0.0]),
                    dtype=float)
    if len(x0) != d or len(p0) != d:
        raise ConfigError(f"x0 and p0 need {d} coordinates", "/options/x0")
    x0, p0 = dyn.project(ws.model, x0[None], p0[None])
    p0 = p0 / H(x0, p0)[:, None]
    tr = dyn.integrate_flow(H, x0[0], p0[0], ws.option("T", 2 * math.pi), ws.option("dt", 1e-3))
    summary = {"samples": len(tr.t), "action": tr.action, "H_drift": tr.H_drift, "closure_error": tr.closure_error()}
    return summary, True, tr.to_csv()


def cmd_systole(ws: Workspace, args):
    name = ws.option("metric")
    L = ws.metric(name, "/options/metric") if name else fin.euclidean(ws.model)
    m = args.m or ws.option("m", 64)
    restarts = args.restarts or ws.option("restarts")
    cls = args.loop_class or ws.option("class")
    if ws.model.kind == "torus" and cls is not None:
        if len(cls) != ws.model.dim or not any(cls):
            raise ConfigError("class must be a nonzero integer vector of the torus dimension", "/options/class")
        est = sy.systole_torus(L, cls, m=m, restarts=restarts or 4, rng=ws.rng)
    else:
        est = sy.systole(L, m=m, restarts=restarts, rng=ws.rng, zmax=ws.option("zmax", 3))
    out = {"metric": name or "euclidean", "systole": est.to_dict()}
    ok = True
    if ws.option("isosystolic", False):
        rec = sy.isosystolic_report(L, ws.grid, m=m, restarts=restarts, rng=ws.rng)
        out["isosystolic"] = rec.to_dict()
        ok = rec.chain_holds
    if not est.converged:
        raise NumericalFailure(json.dumps(out, sort_keys=True))
    return out, ok


def cmd_normalform(ws: Workspace, args):
    if not ws.model.is_spherical:
        raise ConfigError("normalform needs a sphere or rp2 model", "/model/kind")
    H0 = sb.StarHamiltonian.model_norm(ws.model)
    text = ws.option("perturbation")
    if text is None:
        raise ConfigError("normalform needs options.perturbation", "/options")
    try:
        H1 = sb.StarHamiltonian.from_expr(text, ws.model)
    except ExprError as exc:
        raise ConfigError(str(exc), "/options/perturbation") from None
    probes = ws.option("probes", 64)
    x, p = sb.probe_points(ws.model, probes, ws.rng, grid=ws.grid)
    tol = ws.tolerance("residual", dyn.RESIDUAL_TOL)
    try:
        nf = dyn.normal_form_decompose(H0, H1, x, p, steps=ws.option("steps", 128), tol=math.inf)
    except dyn.OrbitNotClosed as exc:
        raise NumericalFailure(str(exc)) from None
    out = nf.to_dict()
    out["tolerance"] = tol
    return out, nf.residual <= tol


def cmd_report(ws: Optional[Workspace], args):
    from . import suite

    only = set(ws.option("criteria", [])) if ws else set()
    seed = args.seed if args.seed is not None else (ws.seed if ws else 0)
    results = suite.run_all(seed=seed, scale=args.tolerance_scale, only=only or None,
                            progress=lambda r: print(r.line(), file=sys.stderr, flush=True))
    out = [r.to_dict(timing=args.timing) for r in results]
    return out, all(r.passed for r in results)


HANDLERS = {
    "volume": cmd_volume, "dmv": cmd_dmv, "legendre": cmd_legendre, "flow": cmd_flow, "systole": cmd_systole,
    "normalform": cmd_normalform, "check": cmd_check, "report": cmd_report,
}


# ---------------------------------------------------------------------------


def _versions():
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = __version__
    return {"dualmixed": pkg, "numpy": np.__version__, "scipy": scipy.__version__}


def _class_arg(text):
    try:
        return [int(c) for c in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualmixed", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration (optional for report)")
    p.add_argument("--out", help="write the report (or the flow CSV) here instead of stdout")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="accepted for compatibility; runs are single-threaded")
    p.add_argument("--tolerance-scale", type=float, default=1.0, help="multiply verdict tolerances (and report time budgets)")
    p.add_argument("--class", dest="loop_class", type=_class_arg, help='torus class for systole, e.g. "1,0"')
    p.add_argument("--m", type=int, help="polygon vertices for systole")
    p.add_argument("--restarts", type=int, help="random restarts for systole")
    p.add_argument("--notion", choices=("ht", "busemann"), default="ht", help="volume notion for metrics")
    p.add_argument("--timing", action="store_true", help="include wall-clock timings (breaks byte-identical reports)")
    return p


def _emit(text: str, path: Optional[str]):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.tolerance_scale <= 0:
        print("error: --tolerance-scale must be positive", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    config = None
    try:
        if args.config:
            try:
                with open(args.config) as fh:
                    config = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            validate_config(config)
        elif args.command != "report":
            raise ConfigError("--config is required for this command")
        ws = None
        if config is not None:
            seed = args.seed if args.seed is not None else config.get("seed", 0)
            ws = Workspace(json.loads(json.dumps(config)), seed, args.tolerance_scale)
        result = HANDLERS[args.command](ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dyn.DynamicsError, fin.DualityNotConverged, sy.SystoleError, dv.DualVolumeError,
            sb.StarBodyError, ExprError, FloatingPointError) as exc:
        print(f"numerical failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    csv_text = None
    if len(result) == 3:
        results, ok, csv_text = result
    else:
        results, ok = result
    report = {
        "command": args.command,
        "config": config,
        "seed": args.seed if args.seed is not None else (config or {}).get("seed", 0),
        "results": results,
        "ok": bool(ok),
        "versions": _versions(),
    }
    if args.timing:
        report["timing"] = {"seconds": time.perf_counter() - t0}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if csv_text is not None:
        _emit(csv_text, args.out)
        print(json.dumps(results, sort_keys=True), file=sys.stderr)
    else:
        _emit(text, args.out)
    return EXIT_OK if ok else EXIT_VERDICT


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
