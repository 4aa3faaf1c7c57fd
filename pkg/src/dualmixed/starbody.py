"""Star Hamiltonians and star bodies sampled as radial functions.

A star body A = {H <= 1} is stored through its radial function
rho_A = 1/H restricted to the boundary of the model body, one sample per grid
node.  When the body came from a closed-form Hamiltonian the Hamiltonian is
kept alongside, so the body can be re-sampled on another grid; the lattice and
radial-sum operations keep that closed form too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exprlang import Compiled
from .geometry import TORUS, CosphereGrid, ManifoldModel

HOMOGENEITY_TOL = 1e-8
HOMOGENEITY_PROBES = 64


class StarBodyError(ValueError):
    pass


def momentum_norm(p: np.ndarray) -> np.ndarray:
    return np.linalg.norm(p, axis=-1)


def base_variables(model: ManifoldModel, prefix: str = "p"):
    """Declared names and aliases for expressions on ``model``.

    Returns (base names, fiber names, aliases) where aliases maps extra
    spellings (x, y, z on low-dimensional tori; x1..x3 on spheres) to the
    canonical column names.
    """
    d = model.ambient_dim
    fiber = [f"{prefix}{i + 1}" for i in range(d)]
    if model.kind == TORUS:
        base = [f"x{i + 1}" for i in range(d)]
        aliases = {a: b for a, b in zip("xyz", base)} if d <= 3 else {}
    else:
        base = ["x", "y", "z"]
        aliases = {f"x{i + 1}": b for i, b in enumerate(base)}
    return base, fiber, aliases


def columns(model: ManifoldModel, x: np.ndarray, p: np.ndarray, prefix: str = "p") -> dict:
    base, fiber, _ = base_variables(model, prefix)
    cols = {name: x[..., i] for i, name in enumerate(base)}
    cols.update({name: p[..., i] for i, name in enumerate(fiber)})
    return cols


def fd_gradient(func, x: np.ndarray, p: np.ndarray, h: float = 1e-6):
    """Central-difference gradient of func(x, p) in both arguments."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
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
                fhi, flo = func(hi, p), func(lo, p)
            else:
                fhi, flo = func(x, hi), func(x, lo)
            out[..., i] = (fhi - flo) / (2 * step)
    return gx, gp


class StarHamiltonian:
    """A positive function on the punctured cotangent bundle, homogeneous of degree one.

    ``func(x, p)`` is vectorized over leading axes.  ``grad(x, p)`` returns
    (dH/dx, dH/dp); when omitted, central differences are used.
    """

    def __init__(
        self,
        func: Callable[[np.ndarray, np.ndarray], np.ndarray],
        model: ManifoldModel,
        grad: Optional[Callable] = None,
        *,
        smooth: bool = True,
        reversible: bool = False,
        name: str = "H",
        fd_step: float = 1e-6,
    ):
        self.func = func
        self.model = model
        self._grad = grad
        self.smooth = smooth
        self.reversible = reversible
        self.name = name
        self.fd_step = fd_step

    def __call__(self, x, p):
        return self.func(np.asarray(x, dtype=float), np.asarray(p, dtype=float))

    def gradient(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if self._grad is not None:
            return self._grad(x, p)
        return fd_gradient(self.func, x, p, self.fd_step)

    @property
    def has_analytic_gradient(self) -> bool:
        return self._grad is not None

    def __repr__(self):
        return f"StarHamiltonian({self.name!r}, {self.model.kind})"

    @classmethod
    def model_norm(cls, model: ManifoldModel) -> "StarHamiltonian":
        """H0(p) = |p|, the Hamiltonian of the reference metric."""

        def grad(x, p):
            n = momentum_norm(p)[..., None]
            return np.zeros_like(x), p / n

        return cls(lambda x, p: momentum_norm(p), model, grad, reversible=True, name="H0")

    @classmethod
    def from_expr(cls, text: str, model: ManifoldModel, **kw) -> "StarHamiltonian":
        base, fiber, aliases = base_variables(model)
        compiled = Compiled(text, base + fiber, aliases)

        def func(x, p):
            v = compiled(columns(model, x, p))
            return np.broadcast_to(np.asarray(v, dtype=float), np.shape(x)[:-1]).copy()

        kw.setdefault("name", text)
        return cls(func, model, **kw)

    @classmethod
    def conformal(cls, model: ManifoldModel, rho, rho_grad=None, name="rho*H0") -> "StarHamiltonian":
        """H = |p| / rho(x): the Hamiltonian of the metric rho * L0."""

        def func(x, p):
            return momentum_norm(p) / rho(x)

        grad = None
        if rho_grad is not None:

            def grad(x, p):
                n = momentum_norm(p)
                r = rho(x)
                gx = -(n / r**2)[..., None] * rho_grad(x)
                gp = p / (n * r)[..., None]
                return gx, gp

        return cls(func, model, grad, reversible=True, name=name)

    def scaled(self, c: float) -> "StarHamiltonian":
        g = None
        if self._grad is not None:
            g = lambda x, p: tuple(c * a for a in self._grad(x, p))  # noqa: E731
        return StarHamiltonian(
            lambda x, p: c * self.func(x, p), self.model, g, smooth=self.smooth,
            reversible=self.reversible, name=f"{c}*{self.name}",
        )

    def audit_homogeneity(self, grid: Optional[CosphereGrid] = None, rng=None, probes=HOMOGENEITY_PROBES, tol=HOMOGENEITY_TOL):
        """Check H(tp) = t H(p) for t in {0.5, 2} at random probes.

        Returns the largest relative defect; raises StarBodyError above ``tol``.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        x, p = probe_points(self.model, probes, rng, grid)
        h = self(x, p)
        worst = 0.0
        for t in (0.5, 2.0):
            ht = self(x, t * p)
            worst = max(worst, float(np.max(np.abs(ht - t * h) / np.abs(t * h))))
        if not np.all(h > 0):
            raise StarBodyError(f"{self.name} is not positive off the zero section")
        if worst > tol:
            raise StarBodyError(f"{self.name} is not positively homogeneous of degree one (defect {worst:.3g})")
        return worst


def probe_points(model: ManifoldModel, count: int, rng, grid: Optional[CosphereGrid] = None):
    """Random cotangent points (x, p) with |p| in [0.5, 2]."""
    if grid is not None:
        idx = rng.choice(len(grid), size=min(count, len(grid)), replace=False)
        scale = rng.uniform(0.5, 2.0, size=len(idx))[:, None]
        return grid.base[idx], grid.momentum[idx] * scale
    d = model.ambient_dim
    if model.kind == TORUS:
        x = rng.uniform(0, 1, size=(count, d)) * np.asarray(model.periods)
        p = rng.normal(size=(count, d))
    else:
        x = rng.normal(size=(count, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        p = rng.normal(size=(count, 3))
        p -= np.sum(p * x, axis=1, keepdims=True) * x
    p *= (rng.uniform(0.5, 2.0, size=count) / np.linalg.norm(p, axis=1))[:, None]
    return x, p


def random_hamiltonian(model: ManifoldModel, rng, modes: int = 3, amplitude: float = 0.3, name="random") -> StarHamiltonian:
    """Smooth random star Hamiltonian |p| * exp(-s(x, p/|p|)).

    ``s`` is a short trigonometric sum; it is even under (x, p) -> (-x, -p)
    on spherical models, so the result descends to RP^2.
    """
    d = model.ambient_dim
    a = amplitude * rng.uniform(-1, 1, size=modes) / np.sqrt(modes)
    b = rng.normal(size=(modes, d))
    if model.kind == TORUS:
        k = rng.integers(-2, 3, size=(modes, d)) * 2 * np.pi / np.asarray(model.periods)
        c = rng.uniform(0, 2 * np.pi, size=modes)
    else:
        k = 1.5 * rng.normal(size=(modes, d))
        c = np.zeros(modes)

    def func(x, p):
        n = momentum_norm(p)
        u = p / n[..., None]
        s = np.cos(x @ k.T + u @ b.T + c) @ a
        return n * np.exp(-s)

    return StarHamiltonian(func, model, name=name)


@dataclass(frozen=True, eq=False)
class StarBody:
    grid: CosphereGrid
    rho: np.ndarray
    hamiltonian: Optional[StarHamiltonian] = None
    name: str = "A"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (len(self.grid),):
            raise StarBodyError("radial samples do not match the grid")
        if not np.all(np.isfinite(rho)) or not np.all(rho > 0):
            raise StarBodyError(f"radial function of {self.name} must be positive and finite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    def regrid(self, grid: CosphereGrid) -> "StarBody":
        if grid is self.grid:
            return self
        if self.hamiltonian is None:
            raise StarBodyError(f"{self.name} is sampled only and cannot be re-gridded")
        key = id(grid)
        if key not in self._cache:
            self._cache[key] = (grid, body_from_hamiltonian(self.hamiltonian, grid, audit=False, name=self.name))
        return self._cache[key][1]

    @property
    def has_closed_form(self) -> bool:
        return self.hamiltonian is not None


def body_from_hamiltonian(H: StarHamiltonian, grid: CosphereGrid, *, audit: bool = True, name: Optional[str] = None) -> StarBody:
    """Radial function rho = 1/H sampled at the grid nodes."""
    if audit:
        H.audit_homogeneity(grid)
    h = np.asarray(H(grid.base, grid.momentum), dtype=float)
    if not np.all(np.isfinite(h)) or not np.all(h > 0):
        raise StarBodyError(f"{H.name} is not positive and finite at every node")
    return StarBody(grid, 1.0 / h, H, name or H.name)


def model_body(grid: CosphereGrid) -> StarBody:
    return body_from_hamiltonian(StarHamiltonian.model_norm(grid.model), grid, audit=False, name="U")


def _same_grid(A: StarBody, B: StarBody):
    if A.grid is not B.grid:
        raise StarBodyError(f"{A.name} and {B.name} live on different grids")


def _combine(op, A, B, name, smooth=True):
    H = None
    if A.hamiltonian is not None and B.hamiltonian is not None:
        ha, hb = A.hamiltonian, B.hamiltonian
        H = StarHamiltonian(lambda x, p: op(ha(x, p), hb(x, p)), A.grid.model, name=name,
                            smooth=smooth and ha.smooth and hb.smooth,
                            reversible=ha.reversible and hb.reversible)
    return H


def radial_sum(A: StarBody, B: StarBody) -> StarBody:
    """A (+) B, the body with radial function rho_A + rho_B."""
    _same_grid(A, B)
    name = f"({A.name}+{B.name})"
    H = _combine(lambda a, b: 1.0 / (1.0 / a + 1.0 / b), A, B, name)
    return StarBody(A.grid, A.rho + B.rho, H, name)


def dilate(A: StarBody, lam: float) -> StarBody:
    if not lam > 0:
        raise StarBodyError(f"dilation factor must be positive, got {lam}")
    H = A.hamiltonian.scaled(1.0 / lam) if A.hamiltonian is not None else None
    return StarBody(A.grid, lam * A.rho, H, f"{lam:g}{A.name}")


def union(A: StarBody, B: StarBody) -> StarBody:
    _same_grid(A, B)
    name = f"({A.name}|{B.name})"
    # pointwise min/max has kinks, so the result is not smooth
    return StarBody(A.grid, np.maximum(A.rho, B.rho), _combine(np.minimum, A, B, name, smooth=False), name)


def intersection(A: StarBody, B: StarBody) -> StarBody:
    _same_grid(A, B)
    name = f"({A.name}&{B.name})"
    return StarBody(A.grid, np.minimum(A.rho, B.rho), _combine(np.maximum, A, B, name, smooth=False), name)


def radial_distance(A: StarBody, B: StarBody) -> float:
    """max |rho_A - rho_B| over the nodes."""
    _same_grid(A, B)
    return float(np.max(np.abs(A.rho - B.rho)))


def base_field(text: str, model: ManifoldModel) -> Callable[[np.ndarray], np.ndarray]:
    """A scalar function of the base point given as an expression."""
    base, _, aliases = base_variables(model)
    compiled = Compiled(text, base, aliases)

    def field_(x):
        x = np.asarray(x, dtype=float)
        v = compiled({name: x[..., i] for i, name in enumerate(base)})
        return np.broadcast_to(np.asarray(v, dtype=float), x.shape[:-1]).copy()

    field_.text = text
    return field_


def fd_field_gradient(f: Callable[[np.ndarray], np.ndarray], h: float = 1e-6):
    """Central-difference gradient of a scalar base field."""

    def g(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i in range(x.shape[-1]):
            step = h * np.maximum(1.0, np.abs(x[..., i]))
            hi = x.copy()
            lo = x.copy()
            hi[..., i] += step
            lo[..., i] -= step
            out[..., i] = (f(hi) - f(lo)) / (2 * step)
        return out

    return g
