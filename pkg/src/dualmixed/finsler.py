"""Finsler metrics, optical Hamiltonians and the Legendre duality between them.

Duality is computed numerically as a support function,

    H(x, p) = max { p(v) : L(x, v) <= 1 } = max_u  p.u / L(x, u),

over Euclidean unit directions u of the fiber.  On two-dimensional fibers
the maximum is bracketed on a dense angle sample, polished by golden-section
search and finished with a few Newton steps.  Higher-dimensional fibers use a
multistart quasi-Newton search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .dualvol import dmv_k
from .dualvol import volume as body_volume
from .exprlang import Compiled
from .geometry import TORUS, CosphereGrid, ManifoldModel, euclidean_ball_volume, tangent_frame
from .starbody import (
    StarHamiltonian,
    base_field,
    base_variables,
    body_from_hamiltonian,
    columns,
    fd_field_gradient,
    momentum_norm,
)

COARSE_ANGLES = 256
GOLDEN_ITERS = 80
NEWTON_STEPS = 3
MAX_ITER = 200
CONVEXITY_FLOOR = 1e-6
_INVPHI = (math.sqrt(5) - 1) / 2


class FinslerError(ValueError):
    pass


class DualityNotConverged(FinslerError):
    def __init__(self, best):
        super().__init__("Legendre dual optimizer did not converge")
        self.best = best


class FinslerMetric:
    """A fiberwise positively homogeneous function L(x, v) on the tangent bundle.

    ``func`` is vectorized over leading axes of x and v.  Optional extras:
    ``dual`` is a closed-form dual Hamiltonian H(x, p); ``rho`` marks the
    metric as rho(x) times the reference metric.
    """

    def __init__(self, func, model: ManifoldModel, *, reversible=False, smooth=True, name="L",
                 dual=None, rho=None, rho_grad=None, riemannian=False):
        self.func = func
        self.model = model
        self.reversible = reversible
        self.smooth = smooth
        self.name = name
        self.dual = dual
        self.rho = rho
        self.rho_grad = rho_grad
        self.riemannian = riemannian

    def __call__(self, x, v):
        return self.func(np.asarray(x, dtype=float), np.asarray(v, dtype=float))

    def __repr__(self):
        return f"FinslerMetric({self.name!r}, {self.model.kind})"

    @property
    def is_conformal(self) -> bool:
        return self.rho is not None

    def scaled(self, c: float) -> "FinslerMetric":
        rho = None if self.rho is None else (lambda x: c * self.rho(x))
        rho_grad = None if self.rho_grad is None else (lambda x: c * self.rho_grad(x))
        dual = None if self.dual is None else (lambda x, p: self.dual(x, p) / c)
        return FinslerMetric(lambda x, v: c * self.func(x, v), self.model, reversible=self.reversible,
                             smooth=self.smooth, name=f"{c:g}*{self.name}", dual=dual, rho=rho,
                             rho_grad=rho_grad, riemannian=self.riemannian)

    def audit(self, rng=None, probes=64):
        """Homogeneity, positivity and (if flagged) reversibility at random probes."""
        rng = np.random.default_rng(0) if rng is None else rng
        from .starbody import probe_points

        x, v = probe_points(self.model, probes, rng)
        l = self(x, v)
        if not np.all(l > 0):
            raise FinslerError(f"{self.name} is not positive off the zero section")
        for t in (0.5, 2.0):
            if np.max(np.abs(self(x, t * v) - t * l) / (t * l)) > 1e-8:
                raise FinslerError(f"{self.name} is not positively homogeneous of degree one")
        if self.reversible and np.max(np.abs(self(x, -v) - l) / l) > 1e-9:
            raise FinslerError(f"{self.name} is flagged reversible but L(v) != L(-v)")


# ---------------------------------------------------------------------------
# metric families


def euclidean(model: ManifoldModel) -> FinslerMetric:
    return FinslerMetric(lambda x, v: momentum_norm(v), model, reversible=True, name="euclidean",
                         dual=lambda x, p: momentum_norm(p), rho=lambda x: np.ones(np.shape(x)[:-1]),
                         rho_grad=lambda x: np.zeros_like(x), riemannian=True)


def quadratic(model: ManifoldModel, a: float, b: float) -> FinslerMetric:
    """sqrt((v1/a)^2 + (v2/b)^2) on a flat 2-torus."""
    if model.kind != TORUS or model.dim != 2:
        raise FinslerError("quadratic(a, b) is defined on T^2")
    return FinslerMetric(
        lambda x, v: np.sqrt((v[..., 0] / a) ** 2 + (v[..., 1] / b) ** 2), model, reversible=True,
        name=f"quadratic({a:g},{b:g})", dual=lambda x, p: np.sqrt((a * p[..., 0]) ** 2 + (b * p[..., 1]) ** 2),
        riemannian=True,
    )


def randers(model: ManifoldModel, b) -> FinslerMetric:
    """|v| + <b, v> with a constant covector |b| < 1 (flat tori)."""
    b = np.asarray(b, dtype=float)
    if model.kind != TORUS or b.shape != (model.dim,):
        raise FinslerError("randers(b) needs a flat torus and a constant b of matching dimension")
    nb2 = float(b @ b)
    if nb2 >= 1:
        raise FinslerError("Randers drift must satisfy |b| < 1")

    def dual(x, p):
        bp = p @ b
        return (np.sqrt((1 - nb2) * np.sum(p * p, axis=-1) + bp**2) - bp) / (1 - nb2)

    return FinslerMetric(lambda x, v: momentum_norm(v) + v @ b, model, reversible=False,
                         name=f"randers({','.join(f'{c:g}' for c in b)})", dual=dual)


def conformal(model: ManifoldModel, rho, rho_grad=None, name=None) -> FinslerMetric:
    """rho(x) times the reference metric; ``rho`` is an expression or a callable."""
    if isinstance(rho, str):
        name = name or f"conformal({rho})"
        rho = base_field(rho, model)
    if rho_grad is None:
        rho_grad = fd_field_gradient(rho)
    return FinslerMetric(lambda x, v: rho(x) * momentum_norm(v), model, reversible=True,
                         name=name or "conformal", dual=lambda x, p: momentum_norm(p) / rho(x),
                         rho=rho, rho_grad=rho_grad, riemannian=True)


def quartic(model: ManifoldModel) -> FinslerMetric:
    """(v1^4 + v2^4)^(1/4): reversible, strictly convex, not Riemannian."""
    if model.kind != TORUS or model.dim != 2:
        raise FinslerError("quartic is defined on T^2")
    return FinslerMetric(lambda x, v: (v[..., 0] ** 4 + v[..., 1] ** 4) ** 0.25, model, reversible=True,
                         name="quartic")


def custom(model: ManifoldModel, text: str, reversible=False) -> FinslerMetric:
    """Lagrangian given as an expression in base variables and v1..vd."""
    base, fiber, aliases = base_variables(model, prefix="v")
    compiled = Compiled(text, base + fiber, aliases)

    def func(x, v):
        val = compiled(columns(model, x, v, prefix="v"))
        return np.broadcast_to(np.asarray(val, dtype=float), np.shape(x)[:-1]).copy()

    return FinslerMetric(func, model, reversible=reversible, name=text)


def metric_from_config(spec: dict, model: ManifoldModel) -> FinslerMetric:
    kind = spec.get("kind", "euclidean")
    if kind == "euclidean":
        return euclidean(model)
    if kind == "quadratic":
        return quadratic(model, float(spec["a"]), float(spec["b"]))
    if kind == "conformal":
        return conformal(model, spec["rho"])
    if kind == "randers":
        return randers(model, spec["b"])
    if kind == "quartic":
        return quartic(model)
    if kind == "custom":
        return custom(model, spec["lagrangian"], bool(spec.get("reversible", False)))
    raise FinslerError(f"unknown metric kind {kind!r}")


# ---------------------------------------------------------------------------
# support functions


def fiber_frames(model: ManifoldModel, x: np.ndarray) -> np.ndarray:
    """Orthonormal frames of 2-dimensional fibers, shape (N, 2, d)."""
    x = np.atleast_2d(x)
    if model.kind == TORUS:
        if model.dim != 2:
            raise FinslerError("fiber frames are for two-dimensional fibers")
        return np.broadcast_to(np.eye(2), (len(x), 2, 2))
    return tangent_frame(x)


def _directions(frames, t):
    """u(t) = cos t e1 + sin t e2 for angles t of shape (N, K)."""
    return np.cos(t)[..., None] * frames[:, None, 0, :] + np.sin(t)[..., None] * frames[:, None, 1, :]


def maximize_angle(objective: Callable[[np.ndarray], np.ndarray], rows: int, coarse: int = COARSE_ANGLES):
    """Row-wise maximum of a smooth periodic function of one angle.

    ``objective(t)`` maps angles of shape (rows, K) to values of the same
    shape.  Returns (max values, argmax angles).
    """
    grid = np.broadcast_to(2 * np.pi * np.arange(coarse) / coarse, (rows, coarse))
    vals = objective(grid)
    j = np.argmax(vals, axis=1)
    t0 = grid[np.arange(rows), j]
    step = 2 * np.pi / coarse
    lo, hi = t0 - step, t0 + step
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc = objective(c[:, None])[:, 0]
    fd = objective(d[:, None])[:, 0]
    for _ in range(GOLDEN_ITERS):
        left = fc > fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - _INVPHI * (hi - lo)
        new_d = lo + _INVPHI * (hi - lo)
        c2 = np.where(left, new_c, d)
        d2 = np.where(left, c, new_d)
        f_new = objective(np.where(left, new_c, new_d)[:, None])[:, 0]
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = c2, d2
        if np.max(hi - lo) < 1e-12:
            break
    t = 0.5 * (lo + hi)
    best = objective(t[:, None])[:, 0]
    h = 1e-4
    for _ in range(NEWTON_STEPS):
        f3 = objective(np.stack([t - h, t, t + h], axis=1))
        d1 = (f3[:, 2] - f3[:, 0]) / (2 * h)
        d2 = (f3[:, 2] - 2 * f3[:, 1] + f3[:, 0]) / h**2
        ok = d2 < 0
        cand = np.where(ok, t - d1 / np.where(ok, d2, -1.0), t)
        fcand = objective(cand[:, None])[:, 0]
        better = fcand > best
        t = np.where(better, cand, t)
        best = np.where(better, fcand, best)
    return best, t


def _support_2d(norm, model, x, p, coarse=COARSE_ANGLES):
    frames = fiber_frames(model, x)
    xx = x[:, None, :]

    def objective(t):
        u = _directions(frames, t)
        return np.einsum("nkd,nd->nk", u, p) / norm(np.broadcast_to(xx, u.shape), u)

    return maximize_angle(objective, len(x), coarse)[0]


def _support_nd(norm, x, p, rng, starts=8):
    d = x.shape[-1]
    out = np.empty(len(x))
    for i in range(len(x)):
        xi, pi = x[i], p[i]

        def f(w):
            u = w / np.linalg.norm(w)
            return -(pi @ u) / float(norm(xi[None, :], u[None, :])[0])

        inits = [pi / np.linalg.norm(pi)] + list(rng.normal(size=(starts - 1, d)))
        best = None
        for w0 in inits:
            res = minimize(f, w0, method="BFGS", options={"maxiter": MAX_ITER, "gtol": 1e-10})
            if best is None or res.fun < best.fun:
                best = res
        if not np.isfinite(best.fun):
            raise DualityNotConverged(best.fun)
        out[i] = -best.fun
    return out


def support(norm, model: ManifoldModel, x, p, rng=None) -> np.ndarray:
    """max over Euclidean unit u in the fiber of p.u / norm(x, u)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    single = x.ndim == 1
    x2, p2 = np.atleast_2d(x), np.atleast_2d(p)
    x2, p2 = np.broadcast_arrays(x2, p2)
    if model.dim == 2:
        out = _support_2d(norm, model, np.ascontiguousarray(x2), np.ascontiguousarray(p2))
    else:
        out = _support_nd(norm, x2, p2, np.random.default_rng(0) if rng is None else rng)
    return out[0] if single else out


def legendre_dual(L: FinslerMetric, x, p) -> np.ndarray:
    """H(x, p) = max { p(v) : L(x, v) <= 1 }."""
    return support(L, L.model, x, p)


def legendre_inverse(H, x, v, model: Optional[ManifoldModel] = None) -> np.ndarray:
    """L(x, v) = max { p(v) : H(x, p) <= 1 }; ``H`` is a StarHamiltonian or callable."""
    model = model or H.model
    return support(H, model, x, v)


class _Memo:
    """Per-array memo for repeated evaluations on the same grid nodes."""

    def __init__(self, fn):
        self.fn = fn
        self.store = {}

    def __call__(self, x, p):
        key = (x.shape, x.tobytes(), p.tobytes())
        if key not in self.store:
            if len(self.store) > 32:
                self.store.clear()
            self.store[key] = self.fn(x, p)
        return self.store[key]


def dual_hamiltonian(L: FinslerMetric, exact: bool = False) -> StarHamiltonian:
    """The optical Hamiltonian of L, numerically (default) or from the closed form."""
    if exact:
        if L.dual is None:
            raise FinslerError(f"{L.name} has no closed-form dual")
        fn = L.dual
        if L.rho is not None:
            return StarHamiltonian.conformal(L.model, L.rho, L.rho_grad, name=f"H[{L.name}]")
    else:

        def fn(x, p):
            shape = np.shape(x)[:-1]
            d = np.shape(x)[-1]
            return support(L, L.model, np.reshape(x, (-1, d)), np.reshape(p, (-1, d))).reshape(shape)

    return StarHamiltonian(_Memo(fn), L.model, reversible=L.reversible, smooth=L.smooth, name=f"H[{L.name}]")


def metric_from_hamiltonian(H: StarHamiltonian) -> FinslerMetric:
    def fn(x, v):
        shape = np.shape(x)[:-1]
        d = np.shape(x)[-1]
        return support(H, H.model, np.reshape(x, (-1, d)), np.reshape(v, (-1, d))).reshape(shape)

    return FinslerMetric(fn, H.model, reversible=H.reversible, smooth=H.smooth, name=f"L[{H.name}]")


def double_dual(L: FinslerMetric) -> FinslerMetric:
    """(L*)*, fully numerical."""
    return metric_from_hamiltonian(dual_hamiltonian(L))


# ---------------------------------------------------------------------------
# convexity


@dataclass
class ConvexityCertificate:
    min_curvature: float
    positive: bool


def check_quadratic_convexity(L: FinslerMetric, x, samples: int = 256, h: float = 1e-3) -> ConvexityCertificate:
    """Minimum curvature of the unit tangent sphere of L at x (auxiliary Euclidean structure)."""
    if not L.smooth:
        raise FinslerError(f"{L.name} is not flagged smooth")
    x = np.asarray(x, dtype=float)
    if L.model.dim == 2:
        frames = fiber_frames(L.model, x[None, :])
        t = 2 * np.pi * np.arange(samples) / samples
        ts = np.stack([t - h, t, t + h])
        u = _directions(np.broadcast_to(frames, (3, 2, frames.shape[-1])), ts)
        r = 1.0 / L(np.broadcast_to(x, u.shape), u)
        r0 = r[1]
        r1 = (r[2] - r[0]) / (2 * h)
        r2 = (r[2] - 2 * r[1] + r[0]) / h**2
        kappa = (r0**2 + 2 * r1**2 - r0 * r2) / (r0**2 + r1**2) ** 1.5
    else:
        kappa = _curvature_nd(L, x, samples, h)
    if not np.all(np.isfinite(kappa)):
        raise FinslerError(f"finite differences of {L.name} blew up; the unit sphere is not smooth")
    kmin = float(np.min(kappa))
    return ConvexityCertificate(kmin, kmin > CONVEXITY_FLOOR)


def _curvature_nd(L, x, samples, h):
    rng = np.random.default_rng(0)
    d = len(x)
    dirs = rng.normal(size=(samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    f = lambda v: float(L(x[None, :], v[None, :])[0])  # noqa: E731
    out = []
    for u in dirs:
        v = u / f(u)
        g = np.array([(f(v + h * e) - f(v - h * e)) / (2 * h) for e in np.eye(d)])
        Hm = np.empty((d, d))
        for i, ei in enumerate(np.eye(d)):
            for j, ej in enumerate(np.eye(d)):
                Hm[i, j] = (f(v + h * ei + h * ej) - f(v + h * ei - h * ej) - f(v - h * ei + h * ej)
                            + f(v - h * ei - h * ej)) / (4 * h * h)
        # orthonormal basis of the tangent space of the unit sphere at v
        Q = np.linalg.svd(g[None, :])[2][1:].T
        w = np.linalg.eigvalsh(Q.T @ Hm @ Q)
        out.append(np.min(w) / np.linalg.norm(g))
    return np.array(out)


# ---------------------------------------------------------------------------
# volumes and relative invariants


def holmes_thompson_volume(L: FinslerMetric, grid: CosphereGrid, exact: bool = False) -> float:
    """Symplectic volume of the unit codisc bundle divided by eps_n."""
    body = body_from_hamiltonian(dual_hamiltonian(L, exact), grid, audit=False)
    return body_volume(body) / euclidean_ball_volume(grid.model.dim)


def busemann_volume(L: FinslerMetric, grid: CosphereGrid, angles: int = 512) -> float:
    """Integral over M of eps_2 / Lebesgue area of the unit tangent ball."""
    if grid.model.dim != 2:
        raise FinslerError("Busemann volume is implemented for surfaces")
    if not L.reversible:
        raise FinslerError("Busemann volume is defined here for reversible metrics only")
    x = grid.base_points
    frames = fiber_frames(grid.model, x)
    t = np.broadcast_to(2 * np.pi * np.arange(angles) / angles, (len(x), angles))
    u = _directions(frames, t)
    r = 1.0 / L(np.broadcast_to(x[:, None, :], u.shape), u)
    area = 0.5 * np.sum(r**2, axis=1) * (2 * np.pi / angles)
    return float(np.sum(grid.base_weights * math.pi / area))


def dual_body(L: FinslerMetric, grid: CosphereGrid, exact: bool = False):
    return body_from_hamiltonian(dual_hamiltonian(L, exact), grid, audit=False, name=f"D*[{L.name}]")


def dmv_metrics(L1: FinslerMetric, L2: FinslerMetric, grid: CosphereGrid, k: int, exact: bool = False) -> float:
    """V~_k of the unit codisc bundles of L1 and L2."""
    return dmv_k(dual_body(L1, grid, exact), dual_body(L2, grid, exact), k)


def emv_metric(L: FinslerMetric, grid: CosphereGrid, k: int, L0: Optional[FinslerMetric] = None,
               exact: bool = False) -> float:
    """W~_k(M, L) = V~_k(D*L, D*L0) / V(D*L0); L0 defaults to the reference metric."""
    n = grid.model.dim
    if not 1 <= k <= n - 1:
        raise FinslerError(f"k must be in [1, {n - 1}]")
    L0 = L0 or euclidean(grid.model)
    B = dual_body(L0, grid, exact=L0.dual is not None)
    return dmv_k(dual_body(L, grid, exact), B, k) / body_volume(B)
