import warnings

import numpy as np
import pytest
from scipy.optimize import approx_fprime

from daistab.graph import Graph, TopologySet, channel_matrices
from daistab.netmodel import (DaiParams, EquilibriumError, GridState, InsecureEquilibriumWarning, PowerNetwork,
                              bregman_potential, closed_loop_rhs, droop_damping, equilibrium_solve, grad_potential,
                              grad_potential_increment, hessian_potential, machine_to_system_base, nominal_rhs,
                              p_star, potential, setpoints_for_equilibrium, sync_frequency)

from factories import random_dai, random_network


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_droop_damping_and_base_conversion():
    d = droop_damping(0.05, 60.0)
    assert d == pytest.approx(0.0530516476972984, rel=1e-12)
    sys = machine_to_system_base(d, np.array([700, 719]), 900)
    assert np.allclose(sys, d * np.array([700, 719]) / 900)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_gradient_and_hessian_match_finite_differences(rng, n):
    net = random_network(rng, n)
    theta = rng.uniform(-1, 1, n)
    fd_grad = approx_fprime(theta, lambda x: potential(net, x), 1e-7)
    assert np.max(np.abs(fd_grad - grad_potential(net, theta))) < 1e-6
    fd_hess = np.array([approx_fprime(theta, lambda x: grad_potential(net, x)[i], 1e-7) for i in range(n)])
    assert np.max(np.abs(fd_hess - hessian_potential(net, theta))) < 1e-5


def test_flows_sum_to_zero(rng):
    for _ in range(20):
        net = random_network(rng, 5)
        assert abs(np.sum(grad_potential(net, rng.uniform(-3, 3, 5)))) < 1e-12


def test_increment_and_bregman_forms(rng):
    net = random_network(rng, 4)
    ts_ = rng.uniform(-0.5, 0.5, 4)
    d = rng.uniform(-0.3, 0.3, 4)
    inc = grad_potential_increment(net, ts_, d)
    assert np.allclose(inc, grad_potential(net, ts_ + d) - grad_potential(net, ts_), atol=1e-13)
    direct = potential(net, ts_ + d) - potential(net, ts_) - d @ grad_potential(net, ts_)
    assert bregman_potential(net, ts_, d) == pytest.approx(direct, abs=1e-13)
    # stable near zero: matches the quadratic form of the Hessian
    tiny = 1e-7 * d
    quad = 0.5 * tiny @ hessian_potential(net, ts_) @ tiny
    assert bregman_potential(net, ts_, tiny) == pytest.approx(quad, rel=1e-6)


def test_steady_injections(rng):
    net = random_network(rng, 4)
    dai = random_dai(rng, 4)
    ps = p_star(net, dai)
    assert abs(np.sum(net.Pnet - ps)) < 1e-12
    assert np.ptp(dai.A * ps) < 1e-12
    assert sync_frequency(net, dai, -ps) == pytest.approx(net.wd)


def test_equilibrium_solve_and_gauge(rng):
    net = random_network(rng, 5)
    dai = random_dai(rng, 5)
    guess = np.full(5, 0.3)
    eq = equilibrium_solve(net, dai, guess)
    assert eq.secure and eq.residual < 1e-10
    assert np.max(np.abs(grad_potential(net, eq.theta) - (net.Pnet - p_star(net, dai)))) < 1e-10
    c = 1 / dai.A
    assert c @ eq.theta == pytest.approx(c @ guess, abs=1e-12)
    x = GridState(eq.theta, np.full(5, net.wd), p_star(net, dai))
    T = channel_matrices(TopologySet.from_graphs([Graph.ring(5)], "directed"))
    rhs = closed_loop_rhs(net, dai, x, np.tile(x.p, (T.shape[1], 1)), 0, None, T)
    assert np.max(np.abs(rhs.as_vector())) < 1e-10


def test_setpoints_place_requested_equilibrium(rng):
    net = random_network(rng, 4)
    dai = random_dai(rng, 4)
    target = np.array([0.2, -0.1, 0.05, -0.3])
    moved = setpoints_for_equilibrium(net, dai, target)
    eq = equilibrium_solve(moved, dai, target)
    assert np.allclose(eq.theta, target, atol=1e-9)
    assert np.allclose(p_star(moved, dai), p_star(net, dai))


def test_insecure_equilibrium_warns_and_failure_raises():
    B = np.array([[0.0, -1.0], [-1.0, 0.0]])
    dai = DaiParams(np.ones(2), np.ones(2))
    net = PowerNetwork(np.ones(2), np.ones(2), np.ones(2), B, np.array([0.0, 0.0]), np.zeros(2))
    target = np.array([1.0, -1.0])  # difference 2 rad > pi/2
    moved = setpoints_for_equilibrium(net, dai, target)
    with pytest.warns(InsecureEquilibriumWarning):
        equilibrium_solve(moved, dai, target)
    infeasible = PowerNetwork(np.ones(2), np.ones(2), np.ones(2), B, np.array([3.0, -3.0]), np.zeros(2))
    with pytest.raises(EquilibriumError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        equilibrium_solve(infeasible, dai, max_iter=20)


def test_network_validation():
    B = np.array([[0.0, -1.0], [-1.0, 0.0]])
    ok = dict(M=np.ones(2), D=np.ones(2), V=np.ones(2), B=B, Pd=np.zeros(2), Gload=np.zeros(2))
    with pytest.raises(ValueError, match="M must be strictly positive"):
        PowerNetwork(**{**ok, "M": np.array([1.0, -1.0])})
    with pytest.raises(ValueError, match="symmetric"):
        PowerNetwork(**{**ok, "B": np.array([[0.0, -1.0], [-2.0, 0.0]])})
    with pytest.raises(ValueError, match="not connected"):
        PowerNetwork(**{**ok, "B": np.zeros((2, 2))})
    with pytest.raises(ValueError, match="inductive"):
        PowerNetwork(**{**ok, "B": -B})


def test_closed_loop_reduces_to_nominal_without_delays(rng):
    net = random_network(rng, 4)
    dai = random_dai(rng, 4)
    ts = TopologySet.from_graphs([Graph.ring(4)], "directed")
    x = GridState(rng.normal(size=4), rng.normal(size=4), rng.normal(size=4))
    T = channel_matrices(ts)
    a = closed_loop_rhs(net, dai, x, np.tile(x.p, (T.shape[1], 1)), 0, ts)
    b = nominal_rhs(net, dai, x, T[0].sum(axis=0))
    assert np.allclose(a.as_vector(), b.as_vector(), atol=1e-13)
    with pytest.raises(ValueError, match="delayed_p"):
        closed_loop_rhs(net, dai, x, np.zeros((2, 4)), 0, ts)


def _two_bus(Pd=(0.0, 0.0)):
    B = np.array([[0.0, -1.0], [-1.0, 0.0]])
    return PowerNetwork(np.ones(2), np.ones(2), np.ones(2), B, np.asarray(Pd, dtype=float), np.zeros(2))


def test_two_bus_potential_and_flows():
    net = _two_bus()
    assert potential(net, [0.0, 0.0]) == pytest.approx(-1.0, abs=1e-15)
    assert potential(net, [np.pi / 2, 0.0]) == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(grad_potential(net, [np.pi / 6, 0.0]), [0.5, -0.5], atol=1e-15)


def test_potential_matches_double_loop(rng):
    net = random_network(rng, 4)
    theta = rng.uniform(-1, 1, 4)
    total = 0.0
    for i in range(4):
        for k in range(i + 1, 4):
            total += net.B[i, k] * net.V[i] * net.V[k] * np.cos(theta[i] - theta[k])
    assert potential(net, theta) == pytest.approx(total, abs=1e-12)


@pytest.mark.parametrize("A, Pnet, expected", [
    ([1.0, 1.0], [1.0, -1.0], [0.0, 0.0]),
    ([1.0, 1.0], [2.0, 0.0], [1.0, 1.0]),
    ([2.0, 1.0], [3.0, 0.0], [1.0, 2.0]),
])
def test_steady_injection_examples(A, Pnet, expected):
    net = _two_bus(Pd=Pnet)
    assert np.allclose(net.Pnet, Pnet)
    assert np.allclose(p_star(net, DaiParams(np.asarray(A), np.ones(2))), expected, atol=1e-15)


def test_sync_frequency_examples():
    B = np.array([[0.0, -1.0], [-1.0, 0.0]])
    net = PowerNetwork(np.ones(2), np.array([0.1, 0.2]), np.ones(2), B, np.array([0.4, 0.5]), np.zeros(2), wd=1.0)
    dai = DaiParams(np.ones(2), np.ones(2))
    assert sync_frequency(net, dai, np.zeros(2)) == pytest.approx(4.0)
    assert sync_frequency(net, dai, -p_star(net, dai)) == pytest.approx(1.0, abs=1e-15)


def test_two_bus_equilibrium_angle():
    net = _two_bus(Pd=(0.5, -0.5))
    eq = equilibrium_solve(net, DaiParams(np.ones(2), np.ones(2)))
    assert eq.theta[0] - eq.theta[1] == pytest.approx(np.pi / 6, abs=1e-10)
    uniform = equilibrium_solve(_two_bus(), DaiParams(np.ones(2), np.ones(2)), np.full(2, 0.4))
    assert np.allclose(uniform.theta, 0.4) and uniform.iterations == 0


def test_flow_symmetry_of_closed_loop(rng):
    net = random_network(rng, 4, wd=0.3)
    dai = random_dai(rng, 4)
    ts = TopologySet.from_graphs([Graph.ring(4)], "directed")
    T = channel_matrices(ts)
    for _ in range(10):
        x = GridState(rng.normal(size=4), rng.normal(size=4), rng.normal(size=4))
        f = closed_loop_rhs(net, dai, x, rng.normal(size=(T.shape[1], 4)), 0, ts, T)
        assert abs(np.sum(net.M * f.omega + net.D * (x.omega - net.wd) - net.Pnet + x.p)) < 1e-12
