"""Base manifolds, the model codisc bundle and its boundary quadrature.

Three base manifolds are supported: flat tori of any dimension, the unit
round sphere S^2 and the projective plane RP^2 (handled on its double cover).
The model body U is the unit codisc bundle of the reference Riemannian
metric, and the Liouville-type measure on its boundary is realized as
positive node weights whose total mass is V(U) = vol(M) * eps_n.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import roots_jacobi

TORUS = "torus"
SPHERE = "sphere"
RP2 = "rp2"
KINDS = (TORUS, SPHERE, RP2)

_KIND_ALIASES = {
    "torus": TORUS,
    "flattorus": TORUS,
    "sphere": SPHERE,
    "roundsphere2": SPHERE,
    "s2": SPHERE,
    "rp2": RP2,
    "projectiveplane2": RP2,
}


class GeometryError(ValueError):
    """Unsupported model, bad resolution or a singular map."""


def euclidean_ball_volume(k: int) -> float:
    """Volume of the unit ball in R^k."""
    if k < 1:
        raise GeometryError(f"ball dimension must be positive, got {k}")
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


def canonical_sign(x: np.ndarray) -> np.ndarray:
    """Flip rows of ``x`` so that their first nonzero coordinate is positive."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    nz = np.abs(x) > 1e-14
    first = np.argmax(nz, axis=1)
    lead = x[np.arange(len(x)), first]
    s = np.where(lead < 0, -1.0, 1.0)
    out = x * s[:, None]
    return out[0] if single else out


@dataclass(frozen=True)
class ManifoldModel:
    kind: str
    dim: int = 2
    periods: tuple = ()

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower().replace("_", ""))
        if kind is None:
            raise GeometryError(f"unknown manifold kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == TORUS:
            if self.dim < 2:
                raise GeometryError("tori need dim >= 2")
            periods = tuple(float(a) for a in self.periods) or (1.0,) * self.dim
            if len(periods) != self.dim or min(periods) <= 0:
                raise GeometryError(f"bad torus periods {self.periods!r}")
            object.__setattr__(self, "periods", periods)
        else:
            if self.dim != 2:
                raise GeometryError(f"{kind} is implemented for dim 2 only")
            object.__setattr__(self, "periods", ())

    @classmethod
    def torus(cls, dim: int = 2, periods: Sequence[float] = ()) -> "ManifoldModel":
        return cls(TORUS, dim, tuple(periods))

    @classmethod
    def sphere(cls) -> "ManifoldModel":
        return cls(SPHERE, 2)

    @classmethod
    def rp2(cls) -> "ManifoldModel":
        return cls(RP2, 2)

    @property
    def is_spherical(self) -> bool:
        return self.kind in (SPHERE, RP2)

    @property
    def ambient_dim(self) -> int:
        """Number of coordinates used for base points and momenta."""
        return 3 if self.is_spherical else self.dim

    @property
    def volume(self) -> float:
        """Riemannian volume of the reference metric."""
        if self.kind == TORUS:
            return float(np.prod(self.periods))
        return 4 * math.pi if self.kind == SPHERE else 2 * math.pi

    @property
    def model_volume(self) -> float:
        """V(U) = vol(M) * eps_n."""
        return self.volume * euclidean_ball_volume(self.dim)

    def reduce(self, x: np.ndarray) -> np.ndarray:
        """Canonical representative of base points."""
        x = np.asarray(x, dtype=float)
        if self.kind == TORUS:
            per = np.asarray(self.periods)
            return np.mod(x, per)
        x = x / np.linalg.norm(x, axis=-1, keepdims=True)
        if self.kind == RP2:
            x = canonical_sign(x)
        return x

    def reduce_pair(self, x: np.ndarray, p: np.ndarray):
        """Canonical representative of cotangent points (x, p)."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.kind != RP2:
            return self.reduce(x), p
        single = x.ndim == 1
        x2, p2 = np.atleast_2d(x), np.atleast_2d(p)
        x2 = x2 / np.linalg.norm(x2, axis=-1, keepdims=True)
        s = np.sign(np.sum(canonical_sign(x2) * x2, axis=-1))
        x2, p2 = x2 * s[:, None], p2 * s[:, None]
        return (x2[0], p2[0]) if single else (x2, p2)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind == TORUS:
            d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldModel":
        return cls(d["kind"], int(d.get("dim", 2)), tuple(d.get("periods", ())))


@dataclass(frozen=True)
class CotangentPoint:
    base: np.ndarray
    momentum: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "momentum", np.asarray(self.momentum, dtype=float))

    def check(self, model: ManifoldModel) -> None:
        if self.base.shape != (model.ambient_dim,) or self.momentum.shape != self.base.shape:
            raise GeometryError("cotangent point has wrong shape for the model")
        if model.is_spherical:
            if abs(np.linalg.norm(self.base) - 1) > 1e-12:
                raise GeometryError("sphere base point is not a unit vector")
            if abs(self.base @ self.momentum) > 1e-10:
                raise GeometryError("sphere momentum is not tangent to the base point")


def tangent_frame(x: np.ndarray) -> np.ndarray:
    """Orthonormal frames (e1, e2) of T_x S^2, shape (N, 2, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    # cross with the coordinate axis least aligned with x
    axis = np.eye(3)[np.argmin(np.abs(x), axis=1)]
    e1 = np.cross(x, axis)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(x, e1)
    return np.stack([e1, e2], axis=1)


def sphere_rule(n: int, counts: Sequence[int]):
    """Product quadrature on the unit sphere S^{n-1} in R^n.

    ``counts[0]`` is the number of uniform azimuth angles; ``counts[j]`` for
    j >= 1 is the Gauss-Jacobi order of the j-th polar coordinate.
    Returns (points (K, n), weights (K,)) with weights summing to |S^{n-1}|.
    """
    if n == 2:
        k = counts[0]
        t = 2 * np.pi * np.arange(k) / k
        return np.column_stack([np.cos(t), np.sin(t)]), np.full(k, 2 * np.pi / k)
    sub_pts, sub_w = sphere_rule(n - 1, counts[:-1])
    a = (n - 3) / 2
    t, w = roots_jacobi(counts[-1], a, a)
    s = np.sqrt(1 - t**2)
    pts = np.concatenate(
        [
            np.repeat(t, len(sub_pts))[:, None],
            (s[:, None, None] * sub_pts[None, :, :]).reshape(-1, n - 1),
        ],
        axis=1,
    )
    return pts, np.outer(w, sub_w).ravel()


def _icosahedron():
    phi = (1 + 5**0.5) / 2
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def icosphere_triangles(level: int) -> np.ndarray:
    """Spherical triangles of the refined icosahedron, shape (20*4^level, 3, 3)."""
    v, f = _icosahedron()
    tri = v[f]
    for _ in range(level):
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        ab, bc, ca = a + b, b + c, c + a
        ab /= np.linalg.norm(ab, axis=1, keepdims=True)
        bc /= np.linalg.norm(bc, axis=1, keepdims=True)
        ca /= np.linalg.norm(ca, axis=1, keepdims=True)
        tri = np.concatenate(
            [
                np.stack([a, ab, ca], 1),
                np.stack([ab, b, bc], 1),
                np.stack([ca, bc, c], 1),
                np.stack([ab, bc, ca], 1),
            ]
        )
    return tri


def spherical_triangle_area(tri: np.ndarray) -> np.ndarray:
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2 * np.arctan2(num, den)


@dataclass(frozen=True)
class Resolution:
    """Per-dimension node counts.

    Tori: ``base`` holds one count per axis.  Spheres: ``base`` holds the
    icosahedral refinement level.  ``fiber`` holds the azimuth count followed
    by polar orders for fibers of dimension >= 2.
    """

    base: tuple
    fiber: tuple

    def to_dict(self) -> dict:
        return {"base": list(self.base), "fiber": list(self.fiber)}

    @classmethod
    def make(cls, model: ManifoldModel, base, fiber) -> "Resolution":
        base = tuple(int(b) for b in np.atleast_1d(base))
        fiber = tuple(int(f) for f in np.atleast_1d(fiber))
        if model.kind == TORUS:
            if len(base) == 1:
                base = base * model.dim
            if len(fiber) == 1 and model.dim > 2:
                fiber = (fiber[0],) + (max(4, fiber[0] // 2),) * (model.dim - 2)
            if len(base) != model.dim or len(fiber) != model.dim - 1:
                raise GeometryError(f"resolution {base}/{fiber} does not match T^{model.dim}")
            if min(base + fiber) < 4:
                raise GeometryError("resolution counts must be >= 4")
        else:
            if len(base) != 1 or base[0] < 0 or len(fiber) != 1 or fiber[0] < 4:
                raise GeometryError("sphere resolution is (refinement level,), (fiber count >= 4,)")
        return cls(base, fiber)

    def coarsened(self, model: ManifoldModel) -> "Resolution":
        if model.kind == TORUS:
            return Resolution(
                tuple(max(4, b // 2) for b in self.base), tuple(max(4, f // 2) for f in self.fiber)
            )
        return Resolution((max(0, self.base[0] - 1),), (max(4, self.fiber[0] // 2),))


@dataclass(frozen=True, eq=False)
class CosphereGrid:
    """Quadrature on the unit cosphere bundle of the model metric.

    ``base`` and ``momentum`` have shape (N, d) with d the ambient dimension;
    ``weights`` has shape (N,).  ``base_points``/``base_weights`` hold the
    underlying quadrature on M and ``base_index`` maps nodes to base points.
    """

    model: ManifoldModel
    resolution: Resolution
    base: np.ndarray
    momentum: np.ndarray
    weights: np.ndarray
    base_points: np.ndarray
    base_weights: np.ndarray
    base_index: np.ndarray
    rel_tol: float = 1e-12
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))

    def coarsen(self) -> "CosphereGrid":
        """The same rule at roughly half resolution (memoized)."""
        if "coarse" not in self._cache:
            res = self.resolution.coarsened(self.model)
            self._cache["coarse"] = build_grid(self.model, res)
        return self._cache["coarse"]

    def refine(self) -> "CosphereGrid":
        if self.model.kind == TORUS:
            res = Resolution(tuple(2 * b for b in self.resolution.base), tuple(2 * f for f in self.resolution.fiber))
        else:
            res = Resolution((self.resolution.base[0] + 1,), (2 * self.resolution.fiber[0],))
        return build_grid(self.model, res)

    def to_json(self) -> str:
        nodes = [
            [b.tolist(), m.tolist(), float(w)] for b, m, w in zip(self.base, self.momentum, self.weights)
        ]
        return json.dumps(
            {
                "model": self.model.to_dict(),
                "resolution": self.resolution.to_dict(),
                "nodes": nodes,
                "checksum": self.total_weight,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CosphereGrid":
        d = json.loads(text)
        model = ManifoldModel.from_dict(d["model"])
        res = Resolution(tuple(d["resolution"]["base"]), tuple(d["resolution"]["fiber"]))
        base = np.array([n[0] for n in d["nodes"]], dtype=float)
        mom = np.array([n[1] for n in d["nodes"]], dtype=float)
        w = np.array([n[2] for n in d["nodes"]], dtype=float)
        if not math.isclose(float(np.sum(w)), d["checksum"], rel_tol=1e-12):
            raise GeometryError("grid checksum mismatch")
        bp, inv = np.unique(base, axis=0, return_inverse=True)
        bw = np.bincount(inv.ravel(), weights=w) * model.dim / _fiber_area(model.dim)
        return cls(model, res, base, mom, w, bp, bw, inv.ravel())


def _fiber_area(n: int) -> float:
    return n * euclidean_ball_volume(n)


def build_grid(model: ManifoldModel, resolution=None, *, base=None, fiber=None) -> CosphereGrid:
    """Quadrature nodes and weights on the boundary of the model body.

    Either pass a :class:`Resolution` or the raw ``base``/``fiber`` counts.
    Node weight = base cell volume * fiber sphere weight / n.
    """
    if resolution is None:
        if base is None:
            base = 16 if model.kind == TORUS else 3
        if fiber is None:
            fiber = 64 if model.dim == 2 else 16
        resolution = Resolution.make(model, base, fiber)
    elif not isinstance(resolution, Resolution):
        resolution = Resolution.make(model, resolution[0], resolution[1])
    else:
        resolution = Resolution.make(model, resolution.base, resolution.fiber)

    n = model.dim
    if model.kind == TORUS:
        axes = [per * (np.arange(k) + 0.5) / k for per, k in zip(model.periods, resolution.base)]
        mesh = np.meshgrid(*axes, indexing="ij")
        base_pts = np.column_stack([m.ravel() for m in mesh])
        cell = model.volume / len(base_pts)
        base_w = np.full(len(base_pts), cell)
        fib_pts, fib_w = sphere_rule(n, resolution.fiber)
        nb, nf = len(base_pts), len(fib_pts)
        idx = np.repeat(np.arange(nb), nf)
        mom = np.tile(fib_pts, (nb, 1))
        w = np.repeat(base_w, nf) * np.tile(fib_w, nb) / n
        return CosphereGrid(model, resolution, base_pts[idx], mom, w, base_pts, base_w, idx)

    if model.kind not in (SPHERE, RP2):
        raise GeometryError(f"unsupported model {model}")
    tri = icosphere_triangles(resolution.base[0])
    area = spherical_triangle_area(tri)
    cent = tri.sum(axis=1)
    cent /= np.linalg.norm(cent, axis=1, keepdims=True)
    if model.kind == RP2:
        keep = np.all(np.isclose(canonical_sign(cent), cent), axis=1)
        if 2 * keep.sum() != len(cent):
            raise GeometryError("icosahedral grid is not antipodally balanced")
        cent, area = cent[keep], area[keep]
    k = resolution.fiber[0]
    t = 2 * np.pi * np.arange(k) / k
    frames = tangent_frame(cent)
    mom = np.cos(t)[None, :, None] * frames[:, None, 0, :] + np.sin(t)[None, :, None] * frames[:, None, 1, :]
    nb = len(cent)
    idx = np.repeat(np.arange(nb), k)
    w = np.repeat(area, k) * (2 * np.pi / k) / n
    return CosphereGrid(model, resolution, cent[idx], mom.reshape(-1, 3), w, cent, area, idx, rel_tol=1e-12)


@dataclass(frozen=True)
class BaseMap:
    """A diffeomorphism of the base with inverse and Jacobian.

    ``jacobian`` may be omitted, in which case it is approximated by central
    differences.  All callables act on arrays of shape (N, d).
    """

    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fd_step: float = 1e-6

    def jac(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x), dtype=float).reshape(len(x), x.shape[1], x.shape[1])
        d = x.shape[1]
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = self.fd_step
            cols.append((self.forward(x + e) - self.forward(x - e)) / (2 * self.fd_step))
        return np.stack(cols, axis=-1)

    def inverted(self) -> "BaseMap":
        jac = None
        if self.jacobian is not None:
            fwd_jac = self.jacobian
            inv = self.inverse
            jac = lambda y: np.linalg.inv(fwd_jac(inv(y)))  # noqa: E731
        return BaseMap(self.inverse, self.forward, jac, self.fd_step)


def translation(shift: Sequence[float]) -> BaseMap:
    c = np.asarray(shift, dtype=float)
    eye = np.eye(len(c))
    return BaseMap(lambda x: x + c, lambda x: x - c, lambda x: np.broadcast_to(eye, (len(x),) + eye.shape))


def torus_shear(amplitude: float = 0.1, source: int = 1, target: int = 0) -> BaseMap:
    """x_target -> x_target + amplitude * sin(2 pi x_source)."""

    def fwd(x):
        y = np.array(x, dtype=float, copy=True)
        y[..., target] += amplitude * np.sin(2 * np.pi * x[..., source])
        return y

    def inv(y):
        x = np.array(y, dtype=float, copy=True)
        x[..., target] -= amplitude * np.sin(2 * np.pi * y[..., source])
        return x

    def jac(x):
        x = np.atleast_2d(x)
        d = x.shape[1]
        J = np.broadcast_to(np.eye(d), (len(x), d, d)).copy()
        J[:, target, source] = 2 * np.pi * amplitude * np.cos(2 * np.pi * x[:, source])
        return J

    return BaseMap(fwd, inv, jac)


def rotation(matrix: np.ndarray) -> BaseMap:
    R = np.asarray(matrix, dtype=float)
    return BaseMap(lambda x: x @ R.T, lambda x: x @ R, lambda x: np.broadcast_to(R, (len(x), 3, 3)))


def cotangent_lift(phi: BaseMap, base: np.ndarray, momentum: np.ndarray, model: Optional[ManifoldModel] = None):
    """Canonical lift (x, p) -> (phi(x), p o Dphi(x)^-1).

    Works on single points or batches.  On spherical models the Jacobian is
    the ambient one and is restricted to tangent planes.
    """
    x = np.atleast_2d(np.asarray(base, dtype=float))
    p = np.atleast_2d(np.asarray(momentum, dtype=float))
    single = np.ndim(base) == 1
    J = phi.jac(x)
    y = phi.forward(x)
    if model is not None and model.is_spherical:
        fx, fy = tangent_frame(x), tangent_frame(y)
        Jt = np.einsum("nbi,nij,naj->nba", fy, J, fx)  # (N, out, in) in frame coords
        det = np.linalg.det(Jt)
        if np.any(np.abs(det) < 1e-10):
            raise GeometryError("singular Jacobian in cotangent lift")
        pc = np.einsum("nai,ni->na", fx, p)
        qc = np.linalg.solve(np.transpose(Jt, (0, 2, 1)), pc[..., None])[..., 0]
        q = np.einsum("na,nai->ni", qc, fy)
    else:
        det = np.linalg.det(J)
        if np.any(np.abs(det) < 1e-10):
            raise GeometryError("singular Jacobian in cotangent lift")
        q = np.linalg.solve(np.transpose(J, (0, 2, 1)), p[..., None])[..., 0]
    if single:
        return y[0], q[0]
    return y, q
