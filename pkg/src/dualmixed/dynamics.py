"""Characteristic flows on energy levels, Poisson brackets and orbit averaging.

Conventions: X_H = (dH/dp, -dH/dx) and {f, g} = f_x . g_p - f_p . g_x, so
{x1, p1} = 1 and {H, F} = -dF/dt along the flow of H.

Spherical models run in ambient coordinates.  A function f on T*S^2 is
extended to T*(R^3 - 0) by

    f~(x, p) = f(x/|x|, |x| p - (x.p) x/|x|),

which is invariant under the flows of |x|^2 and x.p.  Hamiltonian flows of
such extensions preserve {|x| = 1, x.p = 0} and restrict to the intrinsic
flow on T*S^2; brackets of extensions restrict to intrinsic brackets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson

from .geometry import RP2, SPHERE, TORUS, CosphereGrid, CotangentPoint, ManifoldModel
from .starbody import StarHamiltonian

MAX_DRIFT = 1e-6
CLOSURE_TOL = 1e-6
RESIDUAL_TOL = 1e-3


class DynamicsError(RuntimeError):
    pass


class FlowError(DynamicsError):
    pass


class OrbitNotClosed(DynamicsError):
    pass


class NotFlowInvariant(DynamicsError):
    pass


class ResidualTooLarge(DynamicsError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def pair_distance(model: ManifoldModel, x0, p0, x1, p1):
    """Row-wise sup distance between cotangent points on the model (p relative to max(1, |p0|))."""
    x0, p0, x1, p1 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x0, p0, x1, p1))
    scale = np.maximum(1.0, np.linalg.norm(p0, axis=-1))

    def dist(sign):
        dx = x1 - sign * x0
        if model.kind == TORUS:
            per = np.asarray(model.periods)
            dx = dx - per * np.round(dx / per)
        dp = (p1 - sign * p0) / scale[:, None]
        return np.maximum(np.max(np.abs(dx), axis=-1), np.max(np.abs(dp), axis=-1))

    d = dist(1.0)
    if model.kind == RP2:
        d = np.minimum(d, dist(-1.0))
    return d


def model_period(model: ManifoldModel) -> float:
    """Period of the unit-speed reference geodesic flow (spherical models)."""
    if model.kind == SPHERE:
        return 2 * np.pi
    if model.kind == RP2:
        return np.pi
    raise DynamicsError("the flat torus flow is not periodic")


# ---------------------------------------------------------------------------
# extensions and gradients


def _to_surface(x, p):
    """(x, p) -> (x/|x|, |x| p - (x.p) x/|x|)."""
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    s = np.sum(x * p, axis=-1, keepdims=True)
    return x / r, r * p - s * x / r


def project(model: ManifoldModel, x, p):
    """Retract onto the cotangent bundle of the model (identity on tori)."""
    if model.kind == TORUS:
        return x, p
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    x = x / r
    return x, p - np.sum(x * p, axis=-1, keepdims=True) * x


def _chain(gx, gp, x, p):
    """Gradient of the extension from the surface gradient (gx, gp) at (x^, q)."""
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    s = np.sum(x * p, axis=-1, keepdims=True)
    xh = x / r
    gpx = np.sum(gp * x, axis=-1, keepdims=True)
    gpp = np.sum(gp * p, axis=-1, keepdims=True)
    dx = (gx - np.sum(gx * xh, axis=-1, keepdims=True) * xh) / r
    dx = dx + gpp * x / r - gpx * p / r - s * gp / r + s * gpx * x / r**3
    dp = r * gp - gpx * x / r
    return dx, dp


def _fd_ext_gradient(f, model, x, p, h):
    """Central differences of the extension of a scalar field f(x, p)."""

    def ext(a, b):
        if model.kind == TORUS:
            return f(a, b)
        return f(*_to_surface(a, b))

    gx = np.empty_like(x)
    gp = np.empty_like(p)
    for arr, out, which in ((x, gx, 0), (p, gp, 1)):
        for i in range(arr.shape[-1]):
            step = h * np.maximum(1.0, np.abs(arr[..., i]))
            hi = arr.copy()
            lo = arr.copy()
            hi[..., i] += step
            lo[..., i] -= step
            if which == 0:
                out[..., i] = (ext(hi, p) - ext(lo, p)) / (2 * step)
            else:
                out[..., i] = (ext(x, hi) - ext(x, lo)) / (2 * step)
    return gx, gp


def ext_gradient(f, model: ManifoldModel, x, p, h: float = 1e-5):
    """Gradient (d/dx, d/dp) of a scalar field (or its spherical extension)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if isinstance(f, StarHamiltonian):
        if model.kind == TORUS:
            return f.gradient(x, p)
        xs, q = _to_surface(x, p)
        gx, gp = f.gradient(xs, q)
        return _chain(gx, gp, x, p)
    return _fd_ext_gradient(f, model, x, p, h)


def hamiltonian_vector_field(H: StarHamiltonian, x, p):
    """(dx/dt, dp/dt) = (dH/dp, -dH/dx), computed on the extension for spheres."""
    if not H.smooth:
        raise DynamicsError(f"{H.name} is not flagged smooth; its flow is undefined")
    gx, gp = ext_gradient(H, H.model, x, p)
    return gp, -gx


def poisson_bracket(f, g, model: ManifoldModel, x, p, h: float = 1e-5):
    """{f, g} = f_x . g_p - f_p . g_x with central-difference gradients."""
    fx, fp = ext_gradient(f, model, x, p, h)
    gx, gp = ext_gradient(g, model, x, p, h)
    return np.sum(fx * gp - fp * gx, axis=-1)


# ---------------------------------------------------------------------------
# integration


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    action: float
    dt: float
    H_drift: float
    model: Optional[ManifoldModel] = None
    cumulative_action: Optional[np.ndarray] = None

    @property
    def samples(self):
        """The trajectory as a list of (t, CotangentPoint)."""
        return [(float(t), CotangentPoint(x, p)) for t, x, p in zip(self.t, self.x, self.p)]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def closure_error(self) -> float:
        """Distance between the end point and the start point on the model."""
        model = self.model or ManifoldModel.sphere()
        return float(pair_distance(model, self.x[0], self.p[0], self.x[-1], self.p[-1])[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.x.shape[-1]
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)] + ["H", "action"])
        cum = self.cumulative_action if self.cumulative_action is not None else np.full(len(self.t), np.nan)
        for row in zip(self.t, self.x, self.p, self.H, cum):
            w.writerow([repr(float(row[0]))] + [repr(float(v)) for v in row[1]] + [repr(float(v)) for v in row[2]]
                       + [repr(float(row[3])), repr(float(row[4]))])
        return buf.getvalue()


def flow_batch(H: StarHamiltonian, x0, p0, T: float, steps: int, *, max_drift: float = MAX_DRIFT):
    """RK4 with per-step retraction and momentum rescaling onto the initial level.

    x0, p0 have shape (m, d).  Returns (xs, ps, drift) with xs, ps of shape
    (steps + 1, m, d); ``drift`` is the largest relative level defect seen
    before rescaling.
    """
    model = H.model
    x, p = project(model, np.array(x0, dtype=float), np.array(p0, dtype=float))
    level = H(x, p)
    dt = T / steps
    xs = np.empty((steps + 1,) + x.shape)
    ps = np.empty_like(xs)
    xs[0], ps[0] = x, p
    drift = 0.0

    def field(a, b):
        return hamiltonian_vector_field(H, a, b)

    for k in range(steps):
        k1x, k1p = field(x, p)
        k2x, k2p = field(x + 0.5 * dt * k1x, p + 0.5 * dt * k1p)
        k3x, k3p = field(x + 0.5 * dt * k2x, p + 0.5 * dt * k2p)
        k4x, k4p = field(x + dt * k3x, p + dt * k3p)
        x = x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        p = p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        x, p = project(model, x, p)
        h = H(x, p)
        drift = max(drift, float(np.max(np.abs(h / level - 1))))
        if drift > max_drift:
            raise FlowError(f"level drift {drift:.3g} exceeds {max_drift:g} at step {k + 1}; reduce dt")
        p = p * (level / h)[..., None]
        xs[k + 1], ps[k + 1] = x, p
    return xs, ps, drift


def integrate_flow(H: StarHamiltonian, x0, p0, T: float, dt: float = 1e-3, *, max_drift: float = MAX_DRIFT) -> Trajectory:
    """Characteristic of {H = 1} through (x0, p0) over [0, T]."""
    x0 = np.asarray(x0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    h0 = float(H(x0[None, :], p0[None, :])[0])
    if abs(h0 - 1) > 1e-9:
        raise FlowError(f"initial point is not on the level H = 1 (H = {h0!r})")
    if dt <= 1e-12 or T / dt > 1e8:
        raise FlowError("step size underflow")
    steps = max(2, int(np.ceil(T / dt - 1e-9)))
    xs, ps, drift = flow_batch(H, x0[None, :], p0[None, :], T, steps, max_drift=max_drift)
    return _trajectory(H, xs[:, 0], ps[:, 0], T, steps, drift)


def _trajectory(H, x, p, T, steps, drift):
    t = np.linspace(0.0, T, steps + 1)
    xdot, _ = hamiltonian_vector_field(H, x, p)
    integrand = np.sum(p * xdot, axis=-1)
    return Trajectory(
        t=t, x=x, p=p, H=H(x, p), action=float(simpson(integrand, x=t)), dt=T / steps, H_drift=drift,
        model=H.model, cumulative_action=cumulative_trapezoid(integrand, t, initial=0.0),
    )


# ---------------------------------------------------------------------------
# averaging and the normal form


def _orbits(H0, x, p, period, steps, check_closure=True):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    xs, ps, _ = flow_batch(H0, x, p, period, steps)
    if check_closure:
        err = float(np.max(pair_distance(H0.model, xs[0], ps[0], xs[-1], ps[-1])))
        if err > CLOSURE_TOL:
            raise OrbitNotClosed(f"orbit does not close after T = {period:g} (error {err:.3g})")
    return xs, ps


def flow_average(H0: StarHamiltonian, G: Callable, x, p, period: float, steps: int = 256) -> np.ndarray:
    """(1/T) int_0^T G(phi_t z) dt along the periodic flow of H0 (batched)."""
    xs, ps = _orbits(H0, x, p, period, steps)
    vals = G(xs, ps)
    t = np.linspace(0.0, period, steps + 1)
    return simpson(vals, x=t, axis=0) / period


def averaged(H0: StarHamiltonian, G: Callable, period: float, steps: int = 256) -> Callable:
    """The flow-invariant field z -> flow_average(H0, G, z)."""

    def E(x, p):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        d = x.shape[-1]
        return flow_average(H0, G, x.reshape(-1, d), np.reshape(p, (-1, d)), period, steps).reshape(shape)

    return E


def orbit_moments(H0: StarHamiltonian, H1: Callable, x, p, period: float, steps: int = 256):
    """(E, F) at z: E = orbit average of H1, F = -(1/T) int_0^T t (H1 - E)(phi_t z) dt."""
    xs, ps = _orbits(H0, x, p, period, steps)
    vals = H1(xs, ps)
    t = np.linspace(0.0, period, steps + 1)
    E = simpson(vals, x=t, axis=0) / period
    F = -simpson(t[:, None] * (vals - E[None, :]), x=t, axis=0) / period
    return E, F


@dataclass
class NormalFormPair:
    E: Callable
    F: Callable
    residual: float
    invariance_defect: float
    probes: int
    homogeneity_defect: float = 0.0

    def to_dict(self):
        return {"residual": self.residual, "invariance_defect": self.invariance_defect, "probes": self.probes,
                "homogeneity_defect": self.homogeneity_defect}


def normal_form_decompose(H0: StarHamiltonian, H1: Callable, x, p, period: Optional[float] = None,
                          steps: int = 256, h: float = 1e-5, tol: float = RESIDUAL_TOL) -> NormalFormPair:
    """Split H1 = E + {H0, F} with {H0, E} = 0 by averaging along the periodic flow of H0.

    ``x``, ``p`` are probe points where the residual |H1 - E - {H0, F}| and
    the invariance defect |{H0, E}| are measured.
    """
    model = H0.model
    period = model_period(model) if period is None else period

    def E(a, b):
        a = np.asarray(a, dtype=float)
        d = a.shape[-1]
        return orbit_moments(H0, H1, a.reshape(-1, d), np.reshape(b, (-1, d)), period, steps)[0].reshape(a.shape[:-1])

    def F(a, b):
        a = np.asarray(a, dtype=float)
        d = a.shape[-1]
        return orbit_moments(H0, H1, a.reshape(-1, d), np.reshape(b, (-1, d)), period, steps)[1].reshape(a.shape[:-1])

    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    x, p = project(model, x, p)
    e0 = E(x, p)
    rhs = e0 + poisson_bracket(H0, F, model, x, p, h)
    residual = float(np.max(np.abs(H1(x, p) - rhs)))
    defect = float(np.max(np.abs(poisson_bracket(H0, E, model, x, p, h))))
    k = min(len(x), 8)
    homog = float(np.max(np.abs(E(x[:k], 2 * p[:k]) - 2 * e0[:k]) / np.abs(2 * e0[:k])))
    if residual > tol:
        raise ResidualTooLarge(f"normal form residual {residual:.3g} exceeds {tol:g}", residual)
    return NormalFormPair(E, F, residual, defect, len(x), homog)


# ---------------------------------------------------------------------------
# closed characteristics from minima of the radial function


@dataclass
class ClosedCharacteristic:
    trajectory: Trajectory
    scale: float
    action: float
    residual: float
    base_action: float
    start: tuple
    direct_closure: Optional[float] = None
    direct_action: Optional[float] = None

    def to_dict(self):
        return {
            "scale": self.scale, "action": self.action, "residual": self.residual,
            "base_action": self.base_action, "start_base": self.start[0].tolist(),
            "start_momentum": self.start[1].tolist(), "direct_closure": self.direct_closure,
            "direct_action": self.direct_action,
        }


def _retract_unit(model, x, p):
    x, p = project(model, x, p)
    return x, p / np.linalg.norm(p, axis=-1, keepdims=True)


def _descend(rho, model, x, p, iters=50, h=1e-6):
    """Projected gradient descent of rho on the unit cosphere bundle, Armijo backtracking."""
    z = np.concatenate([x, p])
    d = len(x)

    def f(zz):
        a, b = _retract_unit(model, zz[None, :d], zz[None, d:])
        return float(rho(a, b)[0])

    fz = f(z)
    for _ in range(iters):
        g = np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(2 * d)])
        gn = float(g @ g)
        if gn < 1e-22:
            break
        step = 1.0
        while step > 1e-12:
            cand = z - step * g
            a, b = _retract_unit(model, cand[None, :d], cand[None, d:])
            cand = np.concatenate([a[0], b[0]])
            fc = f(cand)
            if fc <= fz - 1e-4 * step * gn:
                z, fz = cand, fc
                break
            step *= 0.5
        else:
            break
    a, b = _retract_unit(model, z[None, :d], z[None, d:])
    return a[0], b[0], fz


def find_closed_characteristic(H: StarHamiltonian, grid: CosphereGrid, H0: Optional[StarHamiltonian] = None,
                               period: Optional[float] = None, steps: int = 512, invariance_tol: float = 1e-5,
                               residual_tol: float = 1e-4, cross_check: bool = True, rng=None) -> ClosedCharacteristic:
    """Closed characteristic of {H = 1} through the minimum of its radial function.

    H must be constant along the orbits of the periodic reference flow H0.
    If sigma is the H0-characteristic through a minimum point of rho = 1/H and
    lambda = min rho, then gamma(s) = lambda sigma(s / lambda) is a closed
    characteristic of H with action lambda * action(sigma).
    """
    model = grid.model
    H0 = H0 or StarHamiltonian.model_norm(model)
    period = model_period(model) if period is None else period
    rng = np.random.default_rng(0) if rng is None else rng

    def rho(a, b):
        return 1.0 / H(a, b)

    r = rho(grid.base, grid.momentum)
    order = np.argsort(r)
    probe = np.concatenate([order[:8], rng.choice(len(grid), 8, replace=False)])
    xs, ps = _orbits(H0, grid.base[probe], grid.momentum[probe], period, 128)
    along = rho(xs, ps)
    variation = float(np.max(np.abs(along - along[0]) / along[0]))
    if variation > invariance_tol:
        raise NotFlowInvariant(f"radial function varies by {variation:.3g} along reference orbits")

    i0 = order[0]
    x0, p0, lam = _descend(rho, model, grid.base[i0], grid.momentum[i0])

    xs, ps, drift = flow_batch(H0, x0[None, :], p0[None, :], period, steps)
    sigma = _trajectory(H0, xs[:, 0], ps[:, 0], period, steps, drift)

    gx, gp = sigma.x, lam * sigma.p
    xdot_s, pdot_s = hamiltonian_vector_field(H0, sigma.x, sigma.p)
    want_x, want_p = xdot_s / lam, pdot_s
    got_x, got_p = hamiltonian_vector_field(H, gx, gp)
    scale = max(np.max(np.abs(got_x)), np.max(np.abs(got_p)))
    residual = float(max(np.max(np.abs(got_x - want_x)), np.max(np.abs(got_p - want_p))) / scale)
    if residual > residual_tol:
        raise ResidualTooLarge(f"scaled characteristic fails Hamilton's equations (residual {residual:.3g})", residual)

    gamma = Trajectory(
        t=lam * sigma.t, x=gx, p=gp, H=H(gx, gp), action=lam * sigma.action, dt=lam * sigma.dt,
        H_drift=float(np.max(np.abs(H(gx, gp) - 1))), model=model,
        cumulative_action=lam * sigma.cumulative_action,
    )
    out = ClosedCharacteristic(gamma, float(lam), gamma.action, residual, sigma.action, (x0, p0 * lam))
    if cross_check:
        direct = integrate_flow(H, gx[0], gp[0] / float(H(gx[:1], gp[:1])[0]), gamma.duration,
                                dt=gamma.duration / steps)
        out.direct_closure = direct.closure_error()
        out.direct_action = direct.action
    return out
