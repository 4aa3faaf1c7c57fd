"""The twelve acceptance criteria as callable checks.

Each criterion returns a :class:`CriterionResult` carrying the individual
checks (measured value, target, pass flag) and the elapsed time against its
budget.  ``run_all`` is what ``dualmixed report`` executes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import dynamics as dyn
from . import finsler as fin
from . import systole as sy
from .dualvol import (
    check_dual_bm,
    check_dual_minkowski,
    check_invariance,
    check_main_inequality,
    check_polynomial_expansion,
    volume,
)
from .geometry import ManifoldModel, build_grid, euclidean_ball_volume, torus_shear, translation
from .starbody import StarHamiltonian, base_field, body_from_hamiltonian, dilate, model_body, random_hamiltonian


@dataclass
class Check:
    label: str
    value: float
    target: str
    ok: bool

    def to_dict(self):
        return {"label": self.label, "value": float(self.value), "target": self.target, "ok": bool(self.ok)}


@dataclass
class CriterionResult:
    number: int
    title: str
    budget: Optional[float]
    checks: List[Check] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.elapsed <= self.budget

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks) and self.within_budget

    def add(self, label, value, target, ok):
        self.checks.append(Check(label, float(value), target, bool(ok)))

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [c.label for c in self.checks if not c.ok]
        extra = f"; failed: {', '.join(failed[:3])}" if failed else ""
        if not self.within_budget:
            extra += f"; over budget ({self.elapsed:.1f}s > {self.budget:g}s)"
        return f"[{status}] criterion {self.number:2d}: {self.title} ({len(self.checks)} checks, {self.elapsed:.1f}s{extra})"

    def to_dict(self, timing=False):
        d = {"number": self.number, "title": self.title, "passed": self.passed,
             "checks": [c.to_dict() for c in self.checks]}
        if timing:
            d["elapsed"] = self.elapsed
            d["budget"] = self.budget
        return d


def _timed(number, title, budget):
    def wrap(fn):
        def run(seed: int = 0, scale: float = 1.0) -> CriterionResult:
            res = CriterionResult(number, title, None if budget is None else budget * scale)
            t0 = time.perf_counter()
            fn(res, np.random.default_rng(seed))
            res.elapsed = time.perf_counter() - t0
            return res

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.number = number
        return run

    return wrap


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


T2 = ManifoldModel.torus(2, (1.0, 1.0))
T3 = ManifoldModel.torus(3, (1.0, 1.0, 1.0))
S2 = ManifoldModel.sphere()
RP2 = ManifoldModel.rp2()

TORUS_FACTORS = [
    "1 + 0.3*sin(2*pi*y)",
    "1 + 0.2*cos(2*pi*x)*cos(2*pi*y)",
    "exp(0.3*sin(2*pi*(x + y)))",
    "1.5 + 0.4*sin(2*pi*x) + 0.3*cos(4*pi*y)",
    "2",
]
RP2_FACTORS = [
    "1 + 0.2*(x^2 - 1/3)",
    "1",
    "1 + 0.3*z^2",
    "exp(0.2*x*y)",
    "1 + 0.1*(x*y + y*z)",
]


# ---------------------------------------------------------------------------


@_timed(1, "model volumes V(U) = vol(M) eps_n", 5.0 * 4)
def model_volumes(res, rng):
    for model, tol in ((T2, 1e-12), (T3, 1e-10), (S2, 1e-3), (RP2, 1e-3)):
        t0 = time.perf_counter()
        v = volume(model_body(build_grid(model)))
        exact = model.volume * euclidean_ball_volume(model.dim)
        dt = time.perf_counter() - t0
        res.add(f"{model.kind}{model.dim} volume", _rel(v, exact), f"<= {tol:g}", _rel(v, exact) <= tol)
        res.add(f"{model.kind}{model.dim} runtime", dt, "< 5 s", dt < 5.0)


@_timed(2, "volume polynomial of radial sums", 10.0)
def polynomial_identity(res, rng):
    grid = build_grid(T2)
    for i in range(20):
        A = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, name="A")
        B = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, name="B")
        lam, mu = rng.uniform(0.1, 2.0, size=2)
        v = check_polynomial_expansion(A, B, lam, mu, tol=1e-12)
        res.add(f"pair {i}", abs(v.relative_slack), "<= 1e-12", v.holds)


@_timed(3, "main, dual Minkowski and dual Brunn-Minkowski inequalities", 60.0)
def inequality_suite(res, rng):
    grid = build_grid(T2)
    worst = {"main": np.inf, "mink": np.inf, "bm": np.inf}
    ok = {"main": True, "mink": True, "bm": True}
    for _ in range(100):
        A = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, audit=False)
        B = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, audit=False)
        checks = {"main": [check_main_inequality([A, B])], "mink": check_dual_minkowski(A, B),
                  "bm": [check_dual_bm(A, B)]}
        for key, vs in checks.items():
            for v in vs:
                worst[key] = min(worst[key], v.relative_slack)
                ok[key] &= v.holds
    res.add("main inequality, worst relative slack", worst["main"], ">= -3x est. error", ok["main"])
    res.add("dual Minkowski, worst relative slack", worst["mink"], ">= -3x est. error", ok["mink"])
    res.add("dual Brunn-Minkowski, worst relative slack", worst["bm"], ">= -3x est. error", ok["bm"])
    for i in range(5):
        A = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, audit=False)
        B = dilate(A, float(rng.uniform(0.3, 3.0)))
        verdicts = [check_main_inequality([A, B])] + check_dual_minkowski(A, B) + [check_dual_bm(A, B)]
        gap = max(abs(v.relative_slack) for v in verdicts)
        res.add(f"dilation tuple {i}: equality", gap, "<= 1e-10",
                gap <= 1e-10 and all(v.equality_case_detected for v in verdicts))


@_timed(4, "invariance under lifted base maps", 30.0)
def invariance(res, rng):
    grid = build_grid(T2, base=32, fiber=64)
    shear = torus_shear(0.1)
    N = grid.resolution.base[0]
    for i in range(10):
        A = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, audit=False)
        B = body_from_hamiltonian(random_hamiltonian(T2, rng), grid, audit=False)
        v = check_invariance([A, B], shear)
        res.add(f"shear pair {i}", abs(v.relative_slack), f"<= {v.tol:.2g}", v.holds)
        shift = rng.integers(0, N, size=2) / N
        w = check_invariance([A, B], translation(shift), tol=1e-12)
        res.add(f"lattice translation pair {i}", abs(w.relative_slack), "<= 1e-12", w.holds)


@_timed(5, "Legendre involution (L*)* = L", 10.0)
def legendre_involution(res, rng):
    for L in (fin.euclidean(T2), fin.quadratic(T2, 2.0, 0.5), fin.randers(T2, [0.3, 0.0])):
        x = rng.uniform(0, 1, size=(64, 2))
        v = rng.standard_normal((64, 2))
        err = float(np.max(np.abs(fin.double_dual(L)(x, v) - L(x, v))))
        res.add(L.name, err, "<= 1e-5", err <= 1e-5)


@_timed(6, "Holmes-Thompson vs Busemann volume", 10.0)
def duran(res, rng):
    grid = build_grid(T2, base=16, fiber=128)
    riemannian = [fin.euclidean(T2), fin.quadratic(T2, 2.0, 0.5), fin.conformal(T2, "1 + 0.3*sin(2*pi*y)")]
    for L in riemannian:
        ht = fin.holmes_thompson_volume(L, grid)
        bu = fin.busemann_volume(L, grid)
        res.add(f"{L.name}: |HT - Bus|/Bus", _rel(ht, bu), "<= 1e-6", _rel(ht, bu) <= 1e-6)
    Q = fin.quartic(T2)
    ht = fin.holmes_thompson_volume(Q, grid)
    bu = fin.busemann_volume(Q, grid)
    res.add("quartic: (Bus - HT)/Bus", (bu - ht) / bu, "> 1e-5", (bu - ht) / bu > 10 * 1e-6)


@_timed(7, "W~_{n-1} of a conformal metric is the mean of its factor", None)
def averaging_identity(res, rng):
    grid = build_grid(T2, base=32, fiber=16)
    s = (np.arange(512) + 0.5) / 512
    X = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    for text in TORUS_FACTORS:
        w = fin.emv_metric(fin.conformal(T2, text), grid, 1)
        mean = float(np.mean(base_field(text, T2)(X)))
        res.add(text, _rel(w, mean), "<= 1e-6", _rel(w, mean) <= 1e-6)


@_timed(8, "conformal isosystolic chain on T^2 and RP^2", 300.0)
def conformal_chain(res, rng):
    for model, factors, m in ((T2, TORUS_FACTORS, 128), (RP2, RP2_FACTORS, 64)):
        grid = build_grid(model)
        for text in factors:
            rec = sy.isosystolic_report(fin.conformal(model, text), grid, m=m, rng=rng)
            tag = f"{model.kind} {text}"
            res.add(f"{tag}: chain", rec.verdicts[0].relative_slack, "sys <= W~ <= vol root", rec.chain_holds)
            res.add(f"{tag}: m-refinement change", rec.refinement_change, "< 1e-4", rec.refinement_change < 1e-4)
            if rec.pu_ratio is not None:
                res.add(f"{tag}: (2/pi) sys^2/vol", rec.pu_ratio, "<= 1 + 1e-3", rec.pu_ratio <= 1 + 1e-3)


@_timed(9, "periodic-flow constant on round RP^2", 30.0)
def periodic_flow_constant(res, rng):
    grid = build_grid(RP2)
    L0 = fin.euclidean(RP2)
    est = sy.systole_rp2(L0, rng=rng)
    cc = dyn.find_closed_characteristic(StarHamiltonian.model_norm(RP2), grid, cross_check=False)
    vol = fin.holmes_thompson_volume(L0, grid, exact=True)
    n = 2
    constant = 2 * math.pi**n / ((n + 1) * euclidean_ball_volume(n + 1))
    for label, s in (("loop systole", est.length), ("closed characteristic action", cc.action)):
        r = s**2 / vol
        res.add(f"{label}: sys^2/vol vs pi/2", _rel(r, math.pi / 2), "<= 1e-3", _rel(r, math.pi / 2) <= 1e-3)
    res.add("2 pi^n/((n+1) eps_{n+1}) vs pi/2", _rel(constant, math.pi / 2), "<= 1e-12",
            _rel(constant, math.pi / 2) <= 1e-12)


def angular_bump(x, p):
    """(L^ . e3)^2 with L = x cross p: invariant under the round geodesic flow."""
    Lm = np.cross(x, p)
    return (Lm[..., 2] / np.linalg.norm(Lm, axis=-1)) ** 2


@_timed(10, "closed characteristic of a commuting Hamiltonian", 60.0)
def commuting_construction(res, rng):
    grid = build_grid(RP2)
    H = StarHamiltonian(lambda x, p: np.linalg.norm(p, axis=-1) * (1 + 0.2 * angular_bump(x, p)), RP2,
                        name="H0(1+0.2u)")
    cc = dyn.find_closed_characteristic(H, grid)
    lam = 1 / 1.2
    res.add("Hamilton residual", cc.residual, "<= 1e-4", cc.residual <= 1e-4)
    res.add("action vs (min rho) pi", abs(cc.action - lam * math.pi), "<= 1e-3",
            abs(cc.action - lam * math.pi) <= 1e-3)
    res.add("min rho vs 1/max(1+0.2u)", abs(cc.scale - lam), "<= 1e-6", abs(cc.scale - lam) <= 1e-6)
    res.add("direct flow: closure", cc.direct_closure, "<= 1e-6", cc.direct_closure <= 1e-6)
    res.add("direct flow: action", abs(cc.direct_action - cc.action), "<= 1e-3",
            abs(cc.direct_action - cc.action) <= 1e-3)
    L = fin.metric_from_hamiltonian(H)
    x0 = cc.start[0]
    est = sy.systole_rp2(L, m=32, restarts=3, rng=rng, starts=[(x0, cc.trajectory.x[4] - x0)])
    bound = est.length / sy.reference_systole(RP2) - 1e-3
    res.add("min rho >= sys(H)/sys(H0) - 1e-3", cc.scale - bound, ">= 0", cc.scale >= bound)


def normal_form_perturbations():
    H0 = StarHamiltonian.model_norm(RP2)
    norm = lambda p: np.linalg.norm(p, axis=-1)  # noqa: E731
    return [
        ("(1 + 0.3 x y) H0", lambda x, p: (1 + 0.3 * x[..., 0] * x[..., 1]) * norm(p)),
        ("(1 + 0.2 (z^2 - 1/3)) H0", lambda x, p: (1 + 0.2 * (x[..., 2] ** 2 - 1 / 3)) * norm(p)),
        ("H0 + 0.2 (p.e1)^2/|p|", lambda x, p: norm(p) + 0.2 * p[..., 0] ** 2 / norm(p)),
    ], H0


@_timed(11, "averaging normal form on round RP^2", 120.0)
def normal_form(res, rng):
    perts, H0 = normal_form_perturbations()
    grid = build_grid(RP2)
    idx = rng.choice(len(grid), 64, replace=False)
    x, p = grid.base[idx], grid.momentum[idx] * rng.uniform(0.5, 2.0, size=(64, 1))
    for label, H1 in perts:
        nf = dyn.normal_form_decompose(H0, H1, x, p, steps=128)
        res.add(f"{label}: residual", nf.residual, "<= 1e-3", nf.residual <= 1e-3)
        res.add(f"{label}: |{{H0,E}}|", nf.invariance_defect, "<= 1e-4", nf.invariance_defect <= 1e-4)
        e = nf.E(x, p)
        ee = dyn.flow_average(H0, nf.E, x, p, math.pi, steps=64)
        idem = float(np.max(np.abs(ee - e)))
        res.add(f"{label}: idempotence", idem, "<= 1e-5", idem <= 1e-5)


@_timed(12, "flow quality: action-time, RK4 order, energy drift", None)
def dynamics_quality(res, rng):
    conf = fin.dual_hamiltonian(fin.conformal(T2, "1 + 0.3*sin(2*pi*y)"), exact=True)
    sphere = StarHamiltonian.model_norm(S2)
    rand = random_hamiltonian(T2, rng)
    x0t, p0t = np.array([0.1, 0.2]), np.array([0.6, 0.8])
    starts = {
        "conformal T2": (conf, x0t, p0t / conf(x0t[None], p0t[None])[0]),
        "round S2": (sphere, np.array([1.0, 0, 0]), np.array([0, 0.6, 0.8])),
        "random T2": (rand, x0t, p0t / rand(x0t[None], p0t[None])[0]),
    }
    for label, (H, x0, p0) in starts.items():
        tr = dyn.integrate_flow(H, x0, p0, 20.0, dt=1e-3)
        res.add(f"{label}: |action - T|/T", abs(tr.action - 20.0) / 20.0, "<= 1e-6",
                abs(tr.action - 20.0) / 20.0 <= 1e-6)
        res.add(f"{label}: drift over T=20", tr.H_drift, "<= 1e-6", tr.H_drift <= 1e-6)
    errs = []
    for dt in (0.04, 0.02):
        tr = dyn.integrate_flow(sphere, [1.0, 0, 0], [0, 1.0, 0], 2 * math.pi, dt=dt)
        errs.append(tr.closure_error())
    order = math.log2(errs[0] / errs[1])
    res.add("RK4 observed order on a great circle", order, ">= 3.8", order >= 3.8)


CRITERIA: List[Callable[..., CriterionResult]] = [
    model_volumes, polynomial_identity, inequality_suite, invariance, legendre_involution, duran,
    averaging_identity, conformal_chain, periodic_flow_constant, commuting_construction, normal_form,
    dynamics_quality,
]


def run_all(seed: int = 0, scale: float = 1.0, only=None, progress=None) -> List[CriterionResult]:
    out = []
    for crit in CRITERIA:
        if only and crit.number not in only:
            continue
        r = crit(seed=seed, scale=scale)
        if progress:
            progress(r)
        out.append(r)
    return out
