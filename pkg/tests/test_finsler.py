import numpy as np
import pytest
from scipy.integrate import quad

from dualmixed.finsler import (
    FinslerError,
    FinslerMetric,
    busemann_volume,
    check_quadratic_convexity,
    conformal,
    custom,
    dmv_metrics,
    double_dual,
    dual_hamiltonian,
    emv_metric,
    euclidean,
    holmes_thompson_volume,
    legendre_dual,
    legendre_inverse,
    metric_from_config,
    quadratic,
    quartic,
    randers,
)
from dualmixed.geometry import build_grid
from dualmixed.starbody import StarHamiltonian, base_field


def unit_vectors(k, rng):
    t = rng.uniform(0, 2 * np.pi, size=k)
    return np.column_stack([np.cos(t), np.sin(t)])


@pytest.fixture(scope="module")
def grid(t2):
    return build_grid(t2, base=16, fiber=64)


def test_euclidean_self_dual(t2):
    assert legendre_dual(euclidean(t2), np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(5.0, rel=1e-12)


def test_quadratic_dual(t2, rng):
    L = quadratic(t2, 2.0, 0.5)
    p = rng.normal(size=(32, 2))
    x = np.zeros_like(p)
    expected = np.sqrt((2 * p[:, 0]) ** 2 + (0.5 * p[:, 1]) ** 2)
    assert np.allclose(legendre_dual(L, x, p), expected, rtol=1e-10)


def test_randers_dual_against_brute_force(t2, rng):
    L = randers(t2, [0.3, -0.2])
    p = rng.normal(size=(16, 2))
    x = np.zeros_like(p)
    t = 2 * np.pi * np.arange(4096) / 4096
    u = np.column_stack([np.cos(t), np.sin(t)])
    brute = np.max((p @ u.T) / L(np.zeros((1, 2)), u)[None, :], axis=1)
    numeric = legendre_dual(L, x, p)
    closed = L.dual(x, p)
    assert np.allclose(numeric, closed, rtol=1e-10)
    # the grid maximum is a lower bound within the angular resolution
    assert np.all(brute <= closed * (1 + 1e-12))
    assert np.allclose(brute, closed, rtol=1e-5)


def test_involution(t2, rng):
    x = np.zeros((64, 2))
    v = unit_vectors(64, rng) * rng.uniform(0.5, 2, size=(64, 1))
    L = euclidean(t2)
    assert np.allclose(double_dual(L)(x, v), L(x, v), rtol=1e-10)
    Q = quadratic(t2, 2.0, 0.5)
    H = dual_hamiltonian(Q)
    # recover a and b from the double dual on the axes
    dd = legendre_inverse(H, np.zeros((2, 2)), np.eye(2))
    assert 1 / dd[0] == pytest.approx(2.0, abs=1e-8)
    assert 1 / dd[1] == pytest.approx(0.5, abs=1e-8)
    R = randers(t2, [0.3, 0.0])
    assert np.max(np.abs(double_dual(R)(x, v) - R(x, v))) < 1e-5


def test_curvature_certificates(t2):
    x = np.zeros(2)
    c = check_quadratic_convexity(euclidean(t2), x)
    assert c.positive and c.min_curvature == pytest.approx(1.0, abs=1e-5)
    c = check_quadratic_convexity(quadratic(t2, 2.0, 0.5), x)
    assert c.positive and c.min_curvature == pytest.approx(0.125, abs=1e-3)
    sup = FinslerMetric(lambda x, v: np.max(np.abs(v), axis=-1), t2, reversible=True, name="sup")
    assert not check_quadratic_convexity(sup, x).positive


def test_holmes_thompson_examples(t2, grid, rp2_grid):
    assert holmes_thompson_volume(euclidean(t2), grid) == pytest.approx(1.0, rel=1e-10)
    assert holmes_thompson_volume(euclidean(rp2_grid.model), rp2_grid) == pytest.approx(2 * np.pi, rel=1e-3)
    L = conformal(t2, "1 + 0.3*sin(2*pi*y)")
    oracle = quad(lambda y: (1 + 0.3 * np.sin(2 * np.pi * y)) ** 2, 0, 1)[0]
    assert oracle == pytest.approx(1.045, abs=1e-12)
    assert holmes_thompson_volume(L, grid) == pytest.approx(oracle, rel=1e-8)
    assert holmes_thompson_volume(L, grid, exact=True) == pytest.approx(oracle, rel=1e-10)


def test_busemann_equals_ht_for_riemannian(t2, grid):
    for L in (quadratic(t2, 2.0, 0.5), conformal(t2, "1 + 0.3*sin(2*pi*y)")):
        assert busemann_volume(L, grid) == pytest.approx(holmes_thompson_volume(L, grid), rel=1e-6)


def test_busemann_exceeds_ht_for_quartic(t2, grid):
    L = quartic(t2)
    bu, ht = busemann_volume(L, grid), holmes_thompson_volume(L, grid)
    assert (bu - ht) / ht > 1e-3


def test_scaled_euclidean_volumes(t2, grid):
    L = euclidean(t2).scaled(2.0)
    assert busemann_volume(L, grid) == pytest.approx(4.0, rel=1e-10)
    assert holmes_thompson_volume(L, grid) == pytest.approx(4.0, rel=1e-10)


def test_busemann_rejects_nonreversible(t2, grid):
    with pytest.raises(FinslerError):
        busemann_volume(randers(t2, [0.2, 0.0]), grid)


def test_relative_invariants(t2, grid):
    L0 = euclidean(t2)
    assert dmv_metrics(L0, L0, grid, 1) == pytest.approx(np.pi, rel=1e-10)
    assert emv_metric(L0, grid, 1) == pytest.approx(1.0, rel=1e-10)
    L = conformal(t2, "1.5 + 0.4*sin(2*pi*x) + 0.3*cos(4*pi*y)")
    assert emv_metric(L, grid, 1) == pytest.approx(1.5, rel=1e-8)
    # the dual body of 2*L0 has radius 2, so the mean radius is 2
    assert emv_metric(L0.scaled(2.0), grid, 1) == pytest.approx(2.0, rel=1e-10)


def test_emv_on_rp2_is_mean_conformal_factor(rp2_grid):
    rho = base_field("1 + 0.3*z^2", rp2_grid.model)
    L = conformal(rp2_grid.model, rho)
    # mean of z^2 over the sphere is 1/3
    assert emv_metric(L, rp2_grid, 1) == pytest.approx(1.1, rel=1e-3)


def test_order_reversal(t2, grid):
    small = euclidean(t2)
    big = conformal(t2, "1.2 + 0.1*cos(2*pi*x)")
    # L <= L' gives the reverse inclusion of unit balls but the forward inclusion of dual bodies
    assert np.all(big(grid.base, grid.momentum) >= small(grid.base, grid.momentum))
    ds = dual_hamiltonian(small)(grid.base, grid.momentum)
    db = dual_hamiltonian(big)(grid.base, grid.momentum)
    assert np.all(db <= ds * (1 + 1e-12))


def test_metric_from_config(t2):
    assert metric_from_config({"kind": "quadratic", "a": 2, "b": 0.5}, t2).riemannian
    L = metric_from_config({"kind": "custom", "lagrangian": "sqrt(v1^2 + v2^2)", "reversible": True}, t2)
    assert L(np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(5.0)
    with pytest.raises(FinslerError):
        metric_from_config({"kind": "nope"}, t2)


def test_audit_catches_bad_metrics(t2):
    with pytest.raises(FinslerError):
        custom(t2, "v1^2 + v2^2 + 1").audit()
    with pytest.raises(FinslerError):
        FinslerMetric(randers(t2, [0.3, 0]).func, t2, reversible=True).audit()
    with pytest.raises(FinslerError):
        randers(t2, [0.8, 0.8])


def test_numeric_dual_matches_closed_form_on_sphere(rp2_grid):
    L = conformal(rp2_grid.model, "1 + 0.2*(x^2 - 1/3)")
    exact = dual_hamiltonian(L, exact=True)
    numeric = dual_hamiltonian(L)
    b, m = rp2_grid.base[:200], rp2_grid.momentum[:200]
    assert np.allclose(numeric(b, m), exact(b, m), rtol=1e-9)
    assert isinstance(exact, StarHamiltonian)
