import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from daistab.graph import Graph, TopologySet, channel_matrices
from daistab.netmodel import DaiParams, GridState, closed_loop_rhs, equilibrium_solve, grad_potential_increment, p_star
from daistab.reduction import (ErrorState, build_reduction, complement_basis, error_rhs, from_error_state,
                               from_reduced_p, matched_equilibrium, to_error_state, to_reduced_p, zeta0)

from factories import random_dai, random_network, random_topologies


@given(arrays(float, st.integers(2, 8), elements=st.floats(0.05, 20.0)))
@settings(max_examples=80, deadline=None)
def test_complement_basis_orthonormal(v):
    W = complement_basis(v)
    assert W.shape == (len(v), len(v) - 1)
    assert np.max(np.abs(W.T @ W - np.eye(len(v) - 1))) < 1e-12
    assert np.max(np.abs(W.T @ v)) < 1e-12 * np.linalg.norm(v)


@pytest.mark.parametrize("model", ["directed", "undirected", "lumped"])
def test_reduced_matrices(model):
    rng = np.random.default_rng(3)
    dai = random_dai(rng, 5, kappa=1.7)
    ts = random_topologies(rng, 5, count=3, model=model)
    rs = build_reduction(dai, ts)
    assert np.max(np.abs(rs.full_basis.T @ rs.full_basis - np.eye(5))) < 1e-12
    assert np.allclose(rs.Tbar.sum(axis=1), rs.Lbar, atol=1e-12)
    for L in rs.Lbar:
        assert np.allclose(L, L.T, atol=1e-14)
        assert np.linalg.eigvalsh(L).min() > 0
    # independent construction through the full Laplacian
    T = channel_matrices(ts)
    G = np.diag(np.sqrt(dai.K) * dai.A) @ rs.W
    assert np.allclose(rs.Lbar[0], G.T @ T[0].sum(axis=0) @ G, atol=1e-12)


def test_reduction_rejects_bad_input():
    rng = np.random.default_rng(0)
    dai = random_dai(rng, 4, kappa=0.0)
    ts = TopologySet.from_graphs([Graph.ring(4)])
    with pytest.raises(ValueError, match="kappa"):
        build_reduction(dai, ts)
    with pytest.raises(ValueError, match="disconnected"):
        build_reduction(dai.with_kappa(1.0), TopologySet.from_graphs([Graph.from_edges(4, [(0, 1)])]))
    with pytest.raises(ValueError, match="nodes"):
        build_reduction(random_dai(rng, 3), ts)


def test_reduced_p_round_trip():
    rng = np.random.default_rng(1)
    dai = random_dai(rng, 4, 2.0)
    rs = build_reduction(dai, TopologySet.from_graphs([Graph.ring(4)]))
    p = rng.normal(size=4)
    pbar, zeta = to_reduced_p(rs, dai, p)
    assert np.allclose(from_reduced_p(rs, dai, pbar, zeta), p, atol=1e-13)
    # steady injections have no pbar component
    assert np.max(np.abs(to_reduced_p(rs, dai, 3.0 / dai.A)[0])) < 1e-12


@pytest.mark.parametrize("model", ["directed", "undirected", "lumped"])
def test_error_rhs_matches_original_coordinates(model):
    rng = np.random.default_rng(11)
    n = 4
    net = random_network(rng, n, wd=0.7)
    dai = random_dai(rng, n, 1.3)
    ts = random_topologies(rng, n, 2, model)
    rs = build_reduction(dai, ts)
    theta_star = equilibrium_solve(net, dai).theta
    ps = p_star(net, dai)
    state = GridState(theta_star + rng.uniform(-0.2, 0.2, n), net.wd + rng.uniform(-0.2, 0.2, n),
                      ps + rng.uniform(-0.2, 0.2, n))
    th = matched_equilibrium(dai, theta_star, ps, state)
    z0 = zeta0(rs, dai, state.theta, state.p)
    err = to_error_state(rs, dai, state, th, net.wd)
    assert np.allclose(from_error_state(rs, dai, err, th, net.wd, z0).as_vector(), state.as_vector(), atol=1e-12)
    # a rotated copy at time t maps to the same error state
    t = 0.37
    rotated = GridState(state.theta + net.wd * t, state.omega, state.p)
    assert np.allclose(to_error_state(rs, dai, rotated, th, net.wd, t).as_vector(), err.as_vector(), atol=1e-12)

    # delayed rows share the zeta component of the current state, as they do
    # along any trajectory whose channels conserve it
    N = rs.n_channels
    delayed = np.array([from_reduced_p(rs, dai, err.p + rng.uniform(-0.1, 0.1, n - 1), z0) for _ in range(N)])
    for ell in range(ts.nu):
        f = closed_loop_rhs(net, dai, state, delayed, ell, ts, channel_matrices(ts))
        delayed_t = np.array([to_reduced_p(rs, dai, row)[0] for row in delayed])
        g = error_rhs(net, dai, rs, err, delayed_t, ell, th)
        assert np.allclose(g.theta, f.theta - net.wd, atol=1e-12)
        assert np.allclose(g.omega, f.omega, atol=1e-12)
        assert np.allclose(g.p, to_reduced_p(rs, dai, f.p)[0], atol=1e-12)


def test_error_rhs_dimension_checks():
    rng = np.random.default_rng(2)
    net = random_network(rng, 3)
    dai = random_dai(rng, 3)
    rs = build_reduction(dai, TopologySet.from_graphs([Graph.ring(3)], "undirected"))
    with pytest.raises(ValueError, match="delayed_pt"):
        error_rhs(net, dai, rs, ErrorState.zero(3), np.zeros((1, 2)), 0, np.zeros(3))
    with pytest.raises(ValueError, match="dimensions"):
        error_rhs(net, dai, rs, ErrorState(np.zeros(3), np.zeros(3), np.zeros(3)), np.zeros((3, 2)), 0,
                  np.zeros(3))


def test_matched_equilibrium_keeps_invariant():
    rng = np.random.default_rng(5)
    dai = random_dai(rng, 4)
    p0 = rng.normal(size=4)
    state = GridState(rng.normal(size=4), np.zeros(4), p0)
    pst = 2.0 / dai.A
    th = matched_equilibrium(dai, np.zeros(4), pst, state)
    c = 1 / dai.A
    invariant = lambda theta, p: c @ (p / dai.K) - c @ theta
    assert invariant(th, pst) == pytest.approx(invariant(state.theta, state.p), abs=1e-12)
    assert np.ptp(th) < 1e-12


def test_two_node_reduction_by_hand():
    dai = DaiParams(np.ones(2), np.ones(2), 1.0)
    rs = build_reduction(dai, TopologySet.from_graphs([Graph.ring(2)], "directed"))
    assert np.allclose(rs.v, [1.0, 1.0]) and rs.mu == pytest.approx(2.0)
    assert np.allclose(np.abs(rs.W[:, 0]), [2 ** -0.5, 2 ** -0.5]) and rs.W[0, 0] * rs.W[1, 0] < 0
    assert rs.Lbar[0, 0, 0] == pytest.approx(2.0)
    assert np.allclose(rs.Tbar[0, :, 0, 0], [1.0, 1.0])


def test_kundur_reduced_laplacian_is_positive_definite():
    S = np.array([700.0, 700.0, 719.0, 700.0])
    A = S / 900
    rs = build_reduction(DaiParams(A, 0.05 / A, 1.0), TopologySet.from_graphs([Graph.ring(4)], "directed"))
    assert np.linalg.eigvalsh(rs.Lbar[0]).min() > 0


def test_reduced_p_special_values():
    rng = np.random.default_rng(4)
    dai = random_dai(rng, 3, 1.5)
    rs = build_reduction(dai, TopologySet.from_graphs([Graph.ring(3)]))
    pbar, zeta = to_reduced_p(rs, dai, np.zeros(3))
    assert not pbar.any() and zeta == 0.0
    assert not from_reduced_p(rs, dai, np.zeros(2), 0.0).any()
    direction = from_reduced_p(rs, dai, np.zeros(2), 1.0)
    assert np.allclose(direction / np.linalg.norm(direction), (1 / dai.A) / np.linalg.norm(1 / dai.A))


def test_error_rhs_at_origin_and_gauge_term():
    rng = np.random.default_rng(6)
    net = random_network(rng, 4)
    dai = random_dai(rng, 4)
    ts = random_topologies(rng, 4, 2, "directed")
    rs = build_reduction(dai, ts)
    th = equilibrium_solve(net, dai).theta
    zero = error_rhs(net, dai, rs, ErrorState.zero(4), np.zeros((rs.n_channels, 3)), ts.nu - 1, th)
    assert np.max(np.abs(zero.as_vector())) < 1e-12
    # an angle error orthogonal to A^{-1} 1 does not feel the gauge term
    c = 1 / dai.A
    d = rng.normal(size=4)
    d -= c * (c @ d) / (c @ c)
    err = ErrorState(d, np.zeros(4), np.zeros(3))
    f = error_rhs(net, dai, rs, err, np.zeros((rs.n_channels, 3)), 0, th)
    assert np.allclose(f.omega, -grad_potential_increment(net, th, d) / net.M, atol=1e-14)
