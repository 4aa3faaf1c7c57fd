"""Volumes, dual mixed volumes and the inequality checks built on them."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from math import comb
from typing import Callable, List, Optional, Sequence

import numpy as np

from .geometry import BaseMap, cotangent_lift
from .starbody import StarBody, StarBodyError, StarHamiltonian, body_from_hamiltonian, dilate, model_body, radial_sum

EQUALITY_THRESHOLD = 1e-8
TOL_FLOOR = 1e-12
ERROR_FACTOR = 3.0


class DualVolumeError(ValueError):
    pass


@dataclass
class DmvReport:
    value: float
    bodies: List[str]
    resolution: dict
    error: float

    def to_dict(self):
        return asdict(self)


@dataclass
class InequalityVerdict:
    """Outcome of one inequality (lhs <= rhs) or identity (lhs == rhs) check."""

    name: str
    lhs: float
    rhs: float
    tol: float
    kind: str = "inequality"
    equality_case_detected: bool = False
    slack: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        self.lhs = float(self.lhs)
        self.rhs = float(self.rhs)
        self.slack = self.rhs - self.lhs
        scale = max(abs(self.lhs), abs(self.rhs))
        if self.kind == "identity":
            self.holds = abs(self.slack) <= self.tol * scale
        else:
            self.holds = self.slack >= -self.tol * scale

    @property
    def relative_slack(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs))
        return self.slack / scale if scale else 0.0

    def rescaled(self, factor: float) -> "InequalityVerdict":
        """The same comparison with the tolerance multiplied by ``factor``."""
        return InequalityVerdict(self.name, self.lhs, self.rhs, self.tol * factor, self.kind,
                                 self.equality_case_detected)

    def to_dict(self):
        d = asdict(self)
        d["holds"] = bool(self.holds)
        d["equality_case_detected"] = bool(self.equality_case_detected)
        return d


def _check_grid(bodies: Sequence[StarBody]):
    grid = bodies[0].grid
    for b in bodies[1:]:
        if b.grid is not grid:
            raise DualVolumeError(f"{b.name} lives on a different grid than {bodies[0].name}")
    return grid


def volume(A: StarBody) -> float:
    """V(A) = sum_i w_i rho_i^n."""
    return A.grid.integrate(A.rho ** A.grid.model.dim)


def _dmv_value(bodies: Sequence[StarBody]) -> float:
    grid = _check_grid(bodies)
    prod = np.ones(len(grid))
    for b in bodies:
        prod = prod * b.rho
    return grid.integrate(prod)


def _coarse(bodies: Sequence[StarBody]):
    """The bodies re-sampled on the coarsened grid, or None for sampled-only input."""
    if not all(b.has_closed_form for b in bodies):
        return None
    coarse = bodies[0].grid.coarsen()
    return [b.regrid(coarse) for b in bodies]


def estimate_error(func: Callable[[Sequence[StarBody]], float], bodies: Sequence[StarBody]) -> float:
    """|func(fine) - func(coarse)|: a one-step refinement error estimate (0 if unavailable)."""
    coarse = _coarse(bodies)
    if coarse is None:
        return 0.0
    return abs(func(bodies) - func(coarse))


def dual_mixed_volume(bodies: Sequence[StarBody]) -> DmvReport:
    """V~(A_1, ..., A_n) = sum_i w_i prod_k rho_{k,i}."""
    bodies = list(bodies)
    if not bodies:
        raise DualVolumeError("need at least one body")
    grid = _check_grid(bodies)
    if len(bodies) != grid.model.dim:
        raise DualVolumeError(f"expected {grid.model.dim} bodies, got {len(bodies)}")
    value = _dmv_value(bodies)
    return DmvReport(value, [b.name for b in bodies], grid.resolution.to_dict(), estimate_error(_dmv_value, bodies))


def dmv_k(A: StarBody, B: StarBody, k: int) -> float:
    """V~_k(A, B): n-k copies of A and k copies of B."""
    _check_grid([A, B])
    n = A.grid.model.dim
    if not 0 <= k <= n:
        raise DualVolumeError(f"k must be in [0, {n}], got {k}")
    return A.grid.integrate(A.rho ** (n - k) * B.rho**k)


def w_tilde_k(A: StarBody, k: int) -> float:
    """Average of rho_A^(n-k) with respect to the boundary measure."""
    n = A.grid.model.dim
    if not 1 <= k <= n - 1:
        raise DualVolumeError(f"k must be in [1, {n - 1}], got {k}")
    return A.grid.integrate(A.rho ** (n - k)) / A.grid.total_weight


def proportional(bodies: Sequence[StarBody], threshold: float = EQUALITY_THRESHOLD) -> bool:
    """True when all radial functions are pointwise multiples of the first."""
    r0 = bodies[0].rho
    for b in bodies[1:]:
        q = b.rho / r0
        if (q.max() - q.min()) / q.mean() >= threshold:
            return False
    return True


def _default_tol(values: Callable[[Sequence[StarBody]], tuple], bodies, tol):
    """Relative tolerance = 3x the refinement-estimated error of lhs and rhs."""
    lhs, rhs = values(bodies)
    if tol is not None:
        return lhs, rhs, tol
    coarse = _coarse(bodies)
    if coarse is None:
        return lhs, rhs, TOL_FLOOR
    lc, rc = values(coarse)
    scale = max(abs(lhs), abs(rhs))
    err = (abs(lhs - lc) + abs(rhs - rc)) / scale
    return lhs, rhs, max(TOL_FLOOR, ERROR_FACTOR * err)


def check_polynomial_expansion(A: StarBody, B: StarBody, lam: float, mu: float, tol: float = 1e-10) -> InequalityVerdict:
    """V(lam A (+) mu B) against sum_k C(n,k) lam^(n-k) mu^k V~_k(A, B)."""
    n = A.grid.model.dim
    if mu == 0:
        S = dilate(A, lam)
    elif lam == 0:
        S = dilate(B, mu)
    else:
        S = radial_sum(dilate(A, lam), dilate(B, mu))
    lhs = volume(S)
    rhs = sum(comb(n, k) * lam ** (n - k) * mu**k * dmv_k(A, B, k) for k in range(n + 1))
    return InequalityVerdict("polynomial_expansion", lhs, rhs, tol, kind="identity")


def check_main_inequality(bodies: Sequence[StarBody], tol: Optional[float] = None) -> InequalityVerdict:
    """V~(A_1..A_n)^n <= V(A_1)...V(A_n)."""
    bodies = list(bodies)
    n = bodies[0].grid.model.dim
    if len(bodies) != n:
        raise DualVolumeError(f"expected {n} bodies, got {len(bodies)}")

    def values(bs):
        return _dmv_value(bs) ** n, float(np.prod([volume(b) for b in bs]))

    lhs, rhs, tol = _default_tol(values, bodies, tol)
    return InequalityVerdict("main_inequality", lhs, rhs, tol, equality_case_detected=proportional(bodies))


def check_dual_minkowski(A: StarBody, B: StarBody, tol: Optional[float] = None):
    """Both dual Minkowski inequalities, as a pair of verdicts.

    first: V~_1(A, B)^n <= V(A)^(n-1) V(B); last: V~_(n-1)(A, B)^n <= V(A) V(B)^(n-1).
    """
    n = A.grid.model.dim
    eq = proportional([A, B])

    def first(bs):
        a, b = bs
        return dmv_k(a, b, 1) ** n, volume(a) ** (n - 1) * volume(b)

    def last(bs):
        a, b = bs
        return dmv_k(a, b, n - 1) ** n, volume(a) * volume(b) ** (n - 1)

    out = []
    for name, fn in (("dual_minkowski_first", first), ("dual_minkowski_last", last)):
        lhs, rhs, t = _default_tol(fn, [A, B], tol)
        out.append(InequalityVerdict(name, lhs, rhs, t, equality_case_detected=eq))
    return out


def check_dual_bm(A: StarBody, B: StarBody, tol: Optional[float] = None) -> InequalityVerdict:
    """V(A (+) B)^(1/n) <= V(A)^(1/n) + V(B)^(1/n)."""
    n = A.grid.model.dim

    def values(bs):
        a, b = bs
        return volume(radial_sum(a, b)) ** (1 / n), volume(a) ** (1 / n) + volume(b) ** (1 / n)

    lhs, rhs, t = _default_tol(values, [A, B], tol)
    return InequalityVerdict("dual_brunn_minkowski", lhs, rhs, t, equality_case_detected=proportional([A, B]))


def transformed_hamiltonian(H: StarHamiltonian, phi: BaseMap) -> StarHamiltonian:
    """Hamiltonian of phi_hat(A): H o (lift of phi)^-1."""
    inv = phi.inverted()
    model = H.model

    def func(x, p):
        y, q = cotangent_lift(inv, np.atleast_2d(x), np.atleast_2d(p), model)
        return H(y, q).reshape(np.shape(x)[:-1])

    return StarHamiltonian(func, model, name=f"phi({H.name})", reversible=H.reversible)


def check_invariance(bodies: Sequence[StarBody], phi: BaseMap, tol: Optional[float] = None) -> InequalityVerdict:
    """V~ of the bodies against V~ of their images under the cotangent lift of ``phi``."""
    bodies = list(bodies)
    if not all(b.has_closed_form for b in bodies):
        raise StarBodyError("invariance check needs closed-form bodies")
    grid = bodies[0].grid
    moved = [
        body_from_hamiltonian(transformed_hamiltonian(b.hamiltonian, phi), grid, audit=False, name=f"phi({b.name})")
        for b in bodies
    ]
    before = _dmv_value(bodies)
    after = _dmv_value(moved)
    if tol is None:
        err = estimate_error(_dmv_value, moved) + estimate_error(_dmv_value, bodies)
        tol = max(TOL_FLOOR, ERROR_FACTOR * err / max(abs(before), abs(after)))
    return InequalityVerdict("invariance", after, before, tol, kind="identity",
                             equality_case_detected=proportional(bodies))


def run_checks(A: StarBody, B: StarBody, lam: float = 0.7, mu: float = 1.3, tol: Optional[float] = None):
    """The five pairwise checks: expansion, main, both dual Minkowski, dual Brunn-Minkowski."""
    n = A.grid.model.dim
    verdicts = [check_polynomial_expansion(A, B, lam, mu)]
    slots = [A] * (n - 1) + [B]
    verdicts.append(check_main_inequality(slots, tol))
    verdicts.extend(check_dual_minkowski(A, B, tol))
    verdicts.append(check_dual_bm(A, B, tol))
    return verdicts


def unit_volume(A: StarBody) -> StarBody:
    """The dilate of A with volume one."""
    return dilate(A, volume(A) ** (-1.0 / A.grid.model.dim))


__all__ = [
    "DmvReport",
    "InequalityVerdict",
    "volume",
    "dual_mixed_volume",
    "dmv_k",
    "w_tilde_k",
    "check_polynomial_expansion",
    "check_main_inequality",
    "check_dual_minkowski",
    "check_dual_bm",
    "check_invariance",
    "run_checks",
    "model_body",
]
