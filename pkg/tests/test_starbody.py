import numpy as np
import pytest

from dualmixed.geometry import build_grid
from dualmixed.starbody import (
    StarBody,
    StarBodyError,
    StarHamiltonian,
    base_field,
    body_from_hamiltonian,
    dilate,
    intersection,
    model_body,
    radial_distance,
    radial_sum,
    random_hamiltonian,
    union,
)


@pytest.fixture
def bodies(t2_grid, rng):
    return [body_from_hamiltonian(random_hamiltonian(t2_grid.model, rng, name=f"R{i}"), t2_grid) for i in range(3)]


def test_model_norm_gives_unit_body(t2_grid):
    U = body_from_hamiltonian(StarHamiltonian.model_norm(t2_grid.model), t2_grid)
    assert np.allclose(U.rho, 1.0, rtol=0, atol=1e-14)


def test_double_norm_gives_half(t2_grid):
    U = body_from_hamiltonian(StarHamiltonian.model_norm(t2_grid.model).scaled(2.0), t2_grid)
    assert np.allclose(U.rho, 0.5, rtol=0, atol=1e-15)


def test_conformal_radial_value(t2):
    H = StarHamiltonian.from_expr("(1 + 0.3*sin(2*pi*y))*sqrt(p1^2 + p2^2)", t2)
    angles = np.linspace(0, 2 * np.pi, 9)
    p = np.column_stack([np.cos(angles), np.sin(angles)])
    x = np.column_stack([np.full(9, 0.4), np.full(9, 0.25)])
    assert np.allclose(1.0 / H(x, p), 1 / 1.3, atol=1e-14)


def test_radial_sum_examples(t2_grid, bodies):
    U = model_body(t2_grid)
    assert np.allclose(radial_sum(U, U).rho, 2.0, rtol=0, atol=1e-14)
    A, B, _ = bodies
    assert np.array_equal(radial_sum(A, B).rho, radial_sum(B, A).rho)
    lhs = radial_sum(dilate(A, 3), dilate(B, 3)).rho
    rhs = dilate(radial_sum(A, B), 3).rho
    assert np.allclose(lhs, rhs, rtol=1e-15)


def test_radial_sum_associative(bodies):
    A, B, C = bodies
    assert np.allclose(radial_sum(radial_sum(A, B), C).rho, radial_sum(A, radial_sum(B, C)).rho, rtol=1e-15)


def test_radial_sum_hamiltonian_matches_samples(t2_grid, bodies):
    A, B, _ = bodies
    S = radial_sum(A, B)
    assert np.allclose(body_from_hamiltonian(S.hamiltonian, t2_grid).rho, S.rho, rtol=1e-13)


def test_dilate_examples(t2_grid, bodies):
    A = bodies[0]
    assert np.array_equal(dilate(A, 1).rho, A.rho)
    assert np.allclose(dilate(model_body(t2_grid), 2).rho, 2.0, rtol=0, atol=1e-14)
    assert np.allclose(dilate(dilate(A, 2), 0.5).rho, A.rho, rtol=1e-15)
    for bad in (0, -1.0):
        with pytest.raises(StarBodyError):
            dilate(A, bad)


def test_union_intersection_examples(t2_grid, bodies):
    U = model_body(t2_grid)
    U2 = dilate(U, 2)
    assert np.array_equal(union(U, U2).rho, U2.rho)
    assert np.array_equal(intersection(U, U2).rho, U.rho)
    A, B, _ = bodies
    assert np.all(union(A, B).rho >= intersection(A, B).rho)


def test_lattice_laws(bodies):
    A, B, C = bodies
    for op in (union, intersection):
        assert np.array_equal(op(A, B).rho, op(B, A).rho)
        assert np.array_equal(op(op(A, B), C).rho, op(A, op(B, C)).rho)
        assert np.array_equal(op(A, A).rho, A.rho)
    # absorption
    assert np.array_equal(union(A, intersection(A, B)).rho, A.rho)


def test_radial_distance(t2_grid, bodies):
    U = model_body(t2_grid)
    A, B, C = bodies
    assert radial_distance(A, A) == 0
    assert radial_distance(U, dilate(U, 2)) == pytest.approx(1.0, abs=1e-14)
    assert radial_distance(A, C) <= radial_distance(A, B) + radial_distance(B, C) + 1e-15


def test_grid_mismatch(t2, t2_grid):
    other = build_grid(t2, base=8, fiber=16)
    with pytest.raises(StarBodyError):
        radial_sum(model_body(t2_grid), model_body(other))


def test_nonpositive_radius_rejected(t2_grid):
    rho = np.ones(len(t2_grid))
    rho[3] = 0.0
    with pytest.raises(StarBodyError):
        StarBody(t2_grid, rho)


def test_homogeneity_audit(t2, t2_grid):
    bad = StarHamiltonian.from_expr("p1^2 + p2^2 + 1", t2)
    with pytest.raises(StarBodyError):
        body_from_hamiltonian(bad, t2_grid)
    good = StarHamiltonian.from_expr("sqrt(p1^2 + p2^2)*exp(0.1*cos(2*pi*x))", t2)
    assert good.audit_homogeneity(t2_grid) < 1e-12


def test_regrid_closed_form(t2, t2_grid):
    H = StarHamiltonian.from_expr("sqrt(p1^2 + 2*p2^2)", t2)
    A = body_from_hamiltonian(H, t2_grid)
    coarse = build_grid(t2, base=4, fiber=8)
    B = A.regrid(coarse)
    assert B.grid is coarse
    assert np.allclose(B.rho, 1 / np.sqrt(coarse.momentum[:, 0] ** 2 + 2 * coarse.momentum[:, 1] ** 2))
    with pytest.raises(StarBodyError):
        StarBody(t2_grid, A.rho).regrid(coarse)


def test_random_hamiltonian_descends_to_rp2(rp2, rng):
    H = random_hamiltonian(rp2, rng)
    x = rng.normal(size=(20, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    p = rng.normal(size=(20, 3))
    p -= np.sum(p * x, axis=1, keepdims=True) * x
    assert np.allclose(H(x, p), H(-x, -p), rtol=1e-14)


def test_base_field_aliases(rp2):
    f = base_field("1 + x1*x3", rp2)
    assert np.isclose(f(np.array([0.6, 0.0, 0.8])), 1.48)


def test_smoothness_flag_follows_algebra(bodies):
    A, B, _ = bodies
    assert radial_sum(A, B).hamiltonian.smooth
    assert dilate(A, 2).hamiltonian.smooth
    assert not union(A, B).hamiltonian.smooth
    assert not intersection(A, B).hamiltonian.smooth
