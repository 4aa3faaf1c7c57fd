import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmixed.geometry import (
    BaseMap,
    CotangentPoint,
    GeometryError,
    ManifoldModel,
    Resolution,
    CosphereGrid,
    build_grid,
    canonical_sign,
    cotangent_lift,
    euclidean_ball_volume,
    rotation,
    torus_shear,
    translation,
)


@pytest.mark.parametrize("k, expected", [(1, 2.0), (2, math.pi), (3, 4 * math.pi / 3), (4, math.pi**2 / 2)])
def test_ball_volume(k, expected):
    assert euclidean_ball_volume(k) == pytest.approx(expected, rel=1e-14)


def test_ball_volume_rejects_zero():
    with pytest.raises((GeometryError, ValueError)):
        euclidean_ball_volume(0)


def test_torus_grid_total_weight(t2_grid):
    assert abs(t2_grid.total_weight - math.pi) < 1e-12
    assert np.all(t2_grid.weights > 0)


def test_torus3_grid_total_weight():
    g = build_grid(ManifoldModel.torus(3))
    assert g.total_weight == pytest.approx(4 * math.pi / 3, rel=1e-10)


def test_sphere_grid_total_weight(s2):
    g = build_grid(s2, base=3, fiber=64)
    assert g.total_weight == pytest.approx(4 * math.pi**2, rel=1e-3)


def test_rp2_grid_total_weight(rp2_grid):
    assert rp2_grid.total_weight == pytest.approx(2 * math.pi**2, rel=1e-3)


def test_grid_nodes_lie_on_unit_cosphere(s2, rp2_grid):
    g = build_grid(s2)
    for grid in (g, rp2_grid):
        assert np.allclose(np.linalg.norm(grid.base, axis=1), 1, atol=1e-12)
        assert np.allclose(np.linalg.norm(grid.momentum, axis=1), 1, atol=1e-12)
        assert np.max(np.abs(np.sum(grid.base * grid.momentum, axis=1))) < 1e-10


def test_rp2_points_are_canonical(rp2_grid):
    assert np.allclose(canonical_sign(rp2_grid.base), rp2_grid.base)
    assert len(rp2_grid.base_points) * 2 == len(build_grid(ManifoldModel.sphere()).base_points)


def test_resolution_too_small(t2):
    with pytest.raises(GeometryError):
        build_grid(t2, base=2, fiber=64)
    with pytest.raises(GeometryError):
        build_grid(t2, base=8, fiber=3)


def test_sphere_only_in_dimension_two():
    with pytest.raises(GeometryError):
        ManifoldModel("sphere", 3)


def test_unknown_kind():
    with pytest.raises(GeometryError):
        ManifoldModel("klein_bottle")


def test_cotangent_point_check(s2):
    CotangentPoint([1, 0, 0], [0, 2, 0]).check(s2)
    with pytest.raises(GeometryError):
        CotangentPoint([1, 0, 0], [0.1, 1, 0]).check(s2)
    with pytest.raises(GeometryError):
        CotangentPoint([2, 0, 0], [0, 1, 0]).check(s2)


def test_grid_json_round_trip(t2):
    g = build_grid(t2, base=8, fiber=16)
    text = g.to_json()
    d = json.loads(text)
    assert set(d) >= {"model", "resolution", "nodes", "checksum"}
    assert d["checksum"] == pytest.approx(math.pi)
    h = CosphereGrid.from_json(text)
    assert np.array_equal(h.weights, g.weights)
    assert np.allclose(h.base_weights, g.base_weights)
    d["nodes"][0][2] *= 2
    with pytest.raises(GeometryError):
        CosphereGrid.from_json(json.dumps(d))


def test_refinement_order(t2):
    # smooth but not band-limited integrand: error should fall at least quadratically
    f = lambda g: g.integrate(np.exp(np.sin(2 * np.pi * g.base[:, 0]) * g.momentum[:, 1]))  # noqa: E731
    exact = f(build_grid(t2, base=64, fiber=256))
    errs = [abs(f(build_grid(t2, base=n, fiber=n)) - exact) for n in (4, 8)]
    assert errs[1] < errs[0] / 4


def test_sphere_refinement_order(s2):
    f = lambda g: g.integrate(np.exp(g.base[:, 0]) * (1 + 0.5 * g.momentum[:, 2] ** 2))  # noqa: E731
    exact = f(build_grid(s2, base=6, fiber=64))
    errs = [abs(f(build_grid(s2, base=lv, fiber=64)) - exact) for lv in (2, 3)]
    assert errs[1] < errs[0] / 3.5


def test_coarsen_halves_resolution(t2):
    g = build_grid(t2, base=16, fiber=64)
    c = g.coarsen()
    assert c.resolution.base == (8, 8) and c.resolution.fiber == (32,)
    assert g.coarsen() is c


def test_identity_lift(t2, rng):
    ident = BaseMap(lambda x: x, lambda x: x)
    x, p = rng.uniform(size=(10, 2)), rng.normal(size=(10, 2))
    y, q = cotangent_lift(ident, x, p, t2)
    assert np.allclose(y, x) and np.allclose(q, p)


def test_translation_lift(t2, rng):
    x, p = rng.uniform(size=(10, 2)), rng.normal(size=(10, 2))
    y, q = cotangent_lift(translation([0.25, 0.5]), x, p, t2)
    assert np.allclose(q, p)
    assert np.allclose(np.mod(y - x, 1.0), [0.25, 0.5])


def test_lift_is_homogeneous(t2, rng):
    phi = torus_shear(0.1)
    x, p = rng.uniform(size=(10, 2)), rng.normal(size=(10, 2))
    _, q1 = cotangent_lift(phi, x, p, t2)
    _, q3 = cotangent_lift(phi, x, 3 * p, t2)
    assert np.allclose(q3, 3 * q1)


def _pullback_defect(phi, x, p, xi_x, xi_p, model, h=1e-6):
    """|alpha(dPhi xi) - alpha(xi)| with dPhi by central differences."""
    Yp, Qp = cotangent_lift(phi, x + h * xi_x, p + h * xi_p, model)
    Ym, Qm = cotangent_lift(phi, x - h * xi_x, p - h * xi_p, model)
    _, Q = cotangent_lift(phi, x, p, model)
    dX = (Yp - Ym) / (2 * h)
    return np.abs(np.sum(Q * dX, axis=1) - np.sum(p * xi_x, axis=1))


def test_shear_lift_preserves_liouville_form(t2, rng):
    phi = torus_shear(0.1)
    x = rng.uniform(0.05, 0.95, size=(100, 2))
    p = rng.normal(size=(100, 2))
    xi_x, xi_p = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))
    assert np.max(_pullback_defect(phi, x, p, xi_x, xi_p, t2)) < 1e-8


def test_finite_difference_jacobian_lift(t2, rng):
    # same shear without a closed-form Jacobian
    shear = torus_shear(0.1)
    phi = BaseMap(shear.forward, shear.inverse)
    x = rng.uniform(0.05, 0.95, size=(100, 2))
    p = rng.normal(size=(100, 2))
    xi_x, xi_p = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))
    assert np.max(_pullback_defect(phi, x, p, xi_x, xi_p, t2)) < 1e-6


def test_rotation_lift_on_sphere(s2, rng):
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
    x = rng.normal(size=(5, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    p = rng.normal(size=(5, 3))
    p -= np.sum(p * x, axis=1, keepdims=True) * x
    y, q = cotangent_lift(rotation(R), x, p, s2)
    assert np.allclose(y, x @ R.T)
    assert np.allclose(q, p @ R.T)


def test_singular_jacobian_rejected(t2):
    squash = BaseMap(lambda x: x * [1, 0], lambda x: x, lambda x: np.broadcast_to(np.diag([1.0, 0.0]), (len(x), 2, 2)))
    with pytest.raises(GeometryError):
        cotangent_lift(squash, np.zeros((1, 2)), np.ones((1, 2)), t2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.2, 3.0), min_size=2, max_size=3), st.integers(4, 12))
def test_torus_total_weight_any_periods(periods, n):
    model = ManifoldModel.torus(len(periods), periods)
    g = build_grid(model, base=n, fiber=8)
    assert g.total_weight == pytest.approx(model.volume * euclidean_ball_volume(model.dim), rel=1e-12)


def test_model_dict_round_trip():
    for m in (ManifoldModel.torus(3, (1, 2, 3)), ManifoldModel.sphere(), ManifoldModel.rp2()):
        assert ManifoldModel.from_dict(m.to_dict()) == m


def test_resolution_make_sphere(s2):
    r = Resolution.make(s2, 2, 32)
    assert r.base == (2,)
