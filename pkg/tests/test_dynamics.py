import math

import numpy as np
import pytest

from dualmixed import dynamics as dyn
from dualmixed.finsler import conformal, dual_hamiltonian
from dualmixed.geometry import build_grid
from dualmixed.starbody import StarHamiltonian, random_hamiltonian


def unit_tangent(rng, k=1):
    x = rng.normal(size=(k, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    p = rng.normal(size=(k, 3))
    p -= np.sum(p * x, axis=1, keepdims=True) * x
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return x, p


def norm(p):
    return np.linalg.norm(p, axis=-1)


@pytest.fixture(scope="module")
def H0_rp2(rp2):
    return StarHamiltonian.model_norm(rp2)


def test_flat_vector_field(t2):
    H = StarHamiltonian.model_norm(t2)
    xd, pd = dyn.hamiltonian_vector_field(H, np.array([0.3, 0.7]), np.array([1.0, 0.0]))
    assert np.allclose(xd, [1, 0], atol=1e-15)
    assert np.allclose(pd, 0, atol=1e-15)


def test_conformal_momentum_equation_matches_fd(t2, rng):
    H = dual_hamiltonian(conformal(t2, "1 + 0.3*sin(2*pi*y)"), exact=True)
    assert H.has_analytic_gradient
    x = rng.uniform(0, 1, size=(20, 2))
    p = rng.normal(size=(20, 2))
    _, pd = dyn.hamiltonian_vector_field(H, x, p)
    h = 1e-6
    fd = np.empty_like(x)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[:, i] = -(H(x + e, p) - H(x - e, p)) / (2 * h)
    assert np.max(np.abs(pd - fd)) <= 1e-7
    # and the closed form |p| grad(rho) / rho^2
    y = x[:, 1]
    rho = 1 + 0.3 * np.sin(2 * np.pi * y)
    expected = norm(p) * 0.3 * 2 * np.pi * np.cos(2 * np.pi * y) / rho**2
    assert np.allclose(pd[:, 1], expected, atol=1e-7)


def test_nonsmooth_hamiltonian_has_no_flow(t2):
    H = StarHamiltonian(lambda x, p: np.max(np.abs(p), axis=-1), t2, smooth=False, name="sup")
    with pytest.raises(dyn.DynamicsError):
        dyn.hamiltonian_vector_field(H, np.zeros(2), np.array([1.0, 0.0]))


def test_sphere_field_is_tangent(s2, rng):
    H = random_hamiltonian(s2, rng)
    x, p = unit_tangent(rng, 30)
    xd, pd = dyn.hamiltonian_vector_field(H, x, p)
    assert np.max(np.abs(np.sum(x * xd, axis=1))) <= 1e-8
    # d/dt (x . p) = 0 keeps the flow in the cotangent bundle
    assert np.max(np.abs(np.sum(xd * p + x * pd, axis=1))) <= 1e-8
    # the level of H is preserved to first order
    gx, gp = dyn.ext_gradient(H, s2, x, p)
    assert np.max(np.abs(np.sum(gx * xd + gp * pd, axis=1))) <= 1e-8


def test_flat_geodesic(t2):
    H = StarHamiltonian.model_norm(t2)
    p0 = np.array([0.6, 0.8])
    traj = dyn.integrate_flow(H, np.array([0.1, 0.2]), p0, 3.0, dt=0.01)
    expected = np.mod(np.array([0.1, 0.2]) + 3.0 * p0, 1.0)
    assert np.allclose(np.mod(traj.x[-1], 1.0), expected, atol=1e-12)
    assert traj.action == pytest.approx(3.0, abs=1e-12)


def test_great_circle_period(s2, rng):
    H = StarHamiltonian.model_norm(s2)
    x, p = unit_tangent(rng)
    traj = dyn.integrate_flow(H, x[0], p[0], 2 * np.pi, dt=1e-3)
    assert traj.closure_error() <= 1e-6
    half = dyn.integrate_flow(H, x[0], p[0], np.pi, dt=1e-3)
    assert np.allclose(half.x[-1], -x[0], atol=1e-6)


@pytest.mark.parametrize("which", ["conformal", "random"])
def test_action_equals_time(t2, rng, which):
    if which == "conformal":
        H = dual_hamiltonian(conformal(t2, "1 + 0.3*sin(2*pi*y)"), exact=True)
    else:
        H = random_hamiltonian(t2, rng)
    x0 = np.array([0.2, 0.4])
    p0 = np.array([0.3, -1.0])
    p0 = p0 / H(x0[None], p0[None])[0]
    traj = dyn.integrate_flow(H, x0, p0, 1.0, dt=1e-3)
    assert traj.action == pytest.approx(1.0, abs=1e-8)
    assert traj.H_drift <= 1e-6


def test_flow_rejects_off_level_start(t2):
    H = StarHamiltonian.model_norm(t2)
    with pytest.raises(dyn.FlowError):
        dyn.integrate_flow(H, np.zeros(2), np.array([2.0, 0.0]), 1.0)


def test_drift_budget_enforced(t2, rng):
    H = random_hamiltonian(t2, rng, amplitude=1.0)
    x0 = np.array([0.2, 0.4])
    p0 = np.array([1.0, 0.5])
    p0 = p0 / H(x0[None], p0[None])[0]
    with pytest.raises(dyn.FlowError):
        dyn.integrate_flow(H, x0, p0, 5.0, dt=0.5)


def test_trajectory_csv(t2):
    H = StarHamiltonian.model_norm(t2)
    traj = dyn.integrate_flow(H, np.zeros(2), np.array([1.0, 0.0]), 0.1, dt=0.05)
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,x1,x2,p1,p2,H,action"
    assert len(lines) == 1 + len(traj.t)
    assert len(traj.samples) == len(traj.t)


def test_bracket_conventions(t2, rng):
    x = rng.uniform(0, 1, size=(10, 2))
    p = rng.normal(size=(10, 2))
    x1 = lambda a, b: a[..., 0]  # noqa: E731
    p1 = lambda a, b: b[..., 0]  # noqa: E731
    assert np.allclose(dyn.poisson_bracket(x1, p1, t2, x, p), 1.0, atol=1e-9)
    H = random_hamiltonian(t2, rng)
    assert np.max(np.abs(dyn.poisson_bracket(H, H, t2, x, p))) <= 1e-12
    f = lambda a, b: np.sin(2 * np.pi * a[..., 0]) * b[..., 1]  # noqa: E731
    g = lambda a, b: np.cos(2 * np.pi * a[..., 1]) + b[..., 0] ** 2  # noqa: E731
    fg = dyn.poisson_bracket(f, g, t2, x, p)
    assert np.allclose(fg, -dyn.poisson_bracket(g, f, t2, x, p), atol=1e-12)
    # Leibniz rule {f, g H} = {f, g} H + g {f, H}
    gH = lambda a, b: g(a, b) * H(a, b)  # noqa: E731
    lhs = dyn.poisson_bracket(f, gH, t2, x, p)
    rhs = fg * H(x, p) + g(x, p) * dyn.poisson_bracket(f, H, t2, x, p)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_flow_average_examples(s2, rng):
    H0 = StarHamiltonian.model_norm(s2)
    x, p = unit_tangent(rng, 6)
    p = p * rng.uniform(0.5, 2, size=(6, 1))
    assert np.allclose(dyn.flow_average(H0, H0, x, p, 2 * np.pi), norm(p), rtol=1e-10)
    # great circle through the poles
    xm = np.array([[1.0, 0, 0]])
    pm = np.array([[0, 0, 1.0]])
    first = lambda a, b: a[..., 0]  # noqa: E731
    # 1024 steps puts the RK4 phase error well below the assertion
    assert abs(dyn.flow_average(H0, first, xm, pm, 2 * np.pi, steps=1024)[0]) <= 1e-10
    G = lambda a, b: (1 + 0.3 * a[..., 0]) * norm(b)  # noqa: E731
    eq = dyn.flow_average(H0, G, xm, np.array([[0, 1.0, 0]]), 2 * np.pi, steps=1024)
    assert eq[0] == pytest.approx(1.0, abs=1e-10)


def test_flow_average_requires_closed_orbit(s2, rng):
    H0 = StarHamiltonian.model_norm(s2)
    x, p = unit_tangent(rng, 2)
    with pytest.raises(dyn.OrbitNotClosed):
        dyn.flow_average(H0, H0, x, p, 1.0)


def test_average_is_invariant(rp2, H0_rp2, rng):
    H1 = lambda a, b: (1 + 0.3 * a[..., 0] * a[..., 1]) * norm(b)  # noqa: E731
    E = dyn.averaged(H0_rp2, H1, math.pi, steps=128)
    x, p = unit_tangent(rng, 8)
    assert np.max(np.abs(dyn.poisson_bracket(H0_rp2, E, rp2, x, p))) <= 1e-4


def test_normal_form_of_reference(rp2, H0_rp2, rng):
    x, p = unit_tangent(rng, 16)
    nf = dyn.normal_form_decompose(H0_rp2, H0_rp2, x, p, steps=128)
    assert nf.residual <= 1e-6
    assert np.allclose(nf.E(x, p), 1.0, atol=1e-10)
    assert np.max(np.abs(nf.F(x, p))) <= 1e-10


def test_normal_form_of_invariant_input(rp2, H0_rp2, rng):
    G = lambda a, b: (1 + 0.2 * a[..., 2] ** 2) * norm(b)  # noqa: E731
    H1 = dyn.averaged(H0_rp2, G, math.pi, steps=64)
    x, p = unit_tangent(rng, 12)
    nf = dyn.normal_form_decompose(H0_rp2, H1, x, p, steps=64)
    assert np.max(np.abs(nf.E(x, p) - H1(x, p))) <= 1e-5
    assert nf.residual <= 1e-4


def test_normal_form_of_conformal_perturbation(rp2, H0_rp2, rng):
    H1 = lambda a, b: (1 + 0.2 * (a[..., 0] ** 2 - 1 / 3)) * norm(b)  # noqa: E731
    x, p = unit_tangent(rng, 16)
    p = p * rng.uniform(0.5, 2, size=(16, 1))
    nf = dyn.normal_form_decompose(H0_rp2, H1, x, p, steps=128)
    assert nf.residual <= 1e-3
    assert nf.homogeneity_defect <= 1e-10
    # the orbit average of x1^2 over a great circle is (1 - (x . e1 axis)^2)/2
    axis = np.cross(x, p / norm(p)[:, None])
    expected = (1 + 0.2 * ((1 - axis[:, 0] ** 2) / 2 - 1 / 3)) * norm(p)
    assert np.allclose(nf.E(x, p), expected, atol=1e-8)


def test_normal_form_reports_large_residual(rp2, H0_rp2, rng):
    H1 = lambda a, b: (1 + 0.2 * a[..., 0]) * norm(b)  # noqa: E731
    x, p = unit_tangent(rng, 4)
    with pytest.raises(dyn.ResidualTooLarge):
        dyn.normal_form_decompose(H0_rp2, H1, x, p, steps=64, tol=1e-12)


@pytest.fixture(scope="module")
def rp2_coarse(rp2):
    return build_grid(rp2)


def test_closed_characteristic_of_reference(rp2_coarse, H0_rp2):
    cc = dyn.find_closed_characteristic(H0_rp2, rp2_coarse)
    assert cc.scale == pytest.approx(1.0, abs=1e-12)
    assert cc.action == pytest.approx(math.pi, abs=1e-6)
    assert cc.trajectory.closure_error() <= 1e-6
    assert cc.direct_closure <= 1e-6


def test_closed_characteristic_scaling(rp2_coarse, H0_rp2):
    cc = dyn.find_closed_characteristic(H0_rp2.scaled(2.0), rp2_coarse)
    assert cc.scale == pytest.approx(0.5, abs=1e-12)
    assert cc.action == pytest.approx(math.pi / 2, abs=1e-6)
    assert cc.direct_action == pytest.approx(cc.action, abs=1e-6)


def test_closed_characteristic_needs_invariance(rp2, rp2_coarse):
    H = StarHamiltonian(lambda a, b: (1 + 0.2 * a[..., 0] ** 2) * norm(b), rp2)
    with pytest.raises(dyn.NotFlowInvariant):
        dyn.find_closed_characteristic(H, rp2_coarse)


def test_model_period(t2, rp2, s2):
    assert dyn.model_period(rp2) == pytest.approx(math.pi)
    assert dyn.model_period(s2) == pytest.approx(2 * math.pi)
    with pytest.raises(dyn.DynamicsError):
        dyn.model_period(t2)
