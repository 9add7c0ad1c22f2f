"""Lossless power network under distributed averaging integral (DAI) control.

Per node ``i``::

    theta_i' = omega_i
    M_i omega_i' = -D_i (omega_i - wd) + P^net_i - P_i(theta) - p_i
    p' = K (omega - wd 1) - K A sum_m T_{l,m} A p(t - tau_m)

with ``P^net_i = Pd_i - G_ii V_i^2`` and ``P_i(theta)`` the lossless line
flows. All quantities are per unit on the system base.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import Graph, TopologySet, channel_matrices, is_connected


class EquilibriumError(RuntimeError):
    """Newton iteration for the synchronized motion failed."""


class InsecureEquilibriumWarning(UserWarning):
    """A neighbor angle difference of the equilibrium is at or beyond pi/2."""


def machine_to_system_base(value, machine_rating, system_base):
    """Convert a per-unit quantity from machine base to system base.

    Powers and power-per-frequency coefficients (damping) scale with the
    rating ratio ``S_machine / S_base``.
    """
    return np.asarray(value, dtype=float) * np.asarray(machine_rating, dtype=float) / float(system_base)


def droop_damping(droop: float, f_nominal: float) -> float:
    """Damping ``1 / (droop * 2 pi f)`` in pu power per rad/s on machine base."""
    return 1.0 / (droop * 2.0 * np.pi * f_nominal)


def _as_vector(x, n, name):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class PowerNetwork:
    """Kron-reduced lossless network.

    Attributes:
        M, D, V: per-node inertia, damping and voltage magnitude (all > 0).
        B: symmetric susceptance matrix, off-diagonals <= 0, zero diagonal.
        Pd: active power setpoints.
        Gload: constant-load conductances ``G_ii >= 0``.
        wd: nominal frequency in rad/s.
    """

    M: np.ndarray
    D: np.ndarray
    V: np.ndarray
    B: np.ndarray
    Pd: np.ndarray
    Gload: np.ndarray
    wd: float = 1.0

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ValueError(f"B must be square, got shape {B.shape}")
        n = B.shape[0]
        object.__setattr__(self, "B", B)
        for name in ("M", "D", "V", "Pd", "Gload"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), n, name))
        object.__setattr__(self, "wd", float(self.wd))
        for name in ("M", "D", "V"):
            if np.any(getattr(self, name) <= 0):
                raise ValueError(f"{name} must be strictly positive")
        if np.any(self.Gload < 0):
            raise ValueError("Gload must be non-negative")
        if not np.allclose(B, B.T, rtol=0, atol=1e-12):
            raise ValueError("B must be symmetric")
        if np.any(np.diag(B) != 0):
            raise ValueError("B must have a zero diagonal (shunts belong in Gload)")
        if np.any(B > 0):
            raise ValueError("off-diagonal susceptances must be <= 0 (inductive lines)")
        if n > 1 and not is_connected(self.electrical_graph()):
            raise ValueError("electrical network is not connected")

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def Pnet(self) -> np.ndarray:
        return self.Pd - self.Gload * self.V**2

    @property
    def coupling(self) -> np.ndarray:
        """``|B_ik| V_i V_k`` with zero diagonal."""
        return np.abs(self.B) * np.outer(self.V, self.V)

    def electrical_graph(self) -> Graph:
        i, k = np.nonzero(np.triu(self.B != 0, 1))
        return Graph.from_edges(self.n, zip(i.tolist(), k.tolist()))

    def with_setpoints(self, Pd) -> "PowerNetwork":
        return replace(self, Pd=np.asarray(Pd, dtype=float))


@dataclass(frozen=True, eq=False)
class DaiParams:
    """Diagonal cost weights ``A``, base gain ``Kcal`` and scalar gain ``kappa``."""

    A: np.ndarray
    Kcal: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Kcal", _as_vector(self.Kcal, A.shape[0], "Kcal"))
        object.__setattr__(self, "kappa", float(self.kappa))
        if A.ndim != 1:
            raise ValueError("A must be given by its diagonal")
        if np.any(A <= 0) or np.any(self.Kcal <= 0):
            raise ValueError("A and Kcal diagonals must be strictly positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @property
    def K(self) -> np.ndarray:
        return self.kappa * self.Kcal

    def with_kappa(self, kappa: float) -> "DaiParams":
        return DaiParams(self.A, self.Kcal, kappa)


@dataclass(frozen=True, eq=False)
class GridState:
    theta: np.ndarray
    omega: np.ndarray
    p: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.omega, self.p])

    @classmethod
    def from_vector(cls, x, n: int) -> "GridState":
        x = np.asarray(x, dtype=float)
        return cls(x[:n].copy(), x[n:2 * n].copy(), x[2 * n:3 * n].copy())


def potential(net: PowerNetwork, theta) -> float:
    """``U(theta) = -sum_{i<k} |B_ik| V_i V_k cos(theta_i - theta_k)``."""
    theta = np.asarray(theta, dtype=float)
    C = np.triu(net.coupling, 1)
    return float(-np.sum(C * np.cos(theta[:, None] - theta[None, :])))


def grad_potential(net: PowerNetwork, theta) -> np.ndarray:
    """Line flows ``P_i(theta)``, the gradient of ``potential``."""
    theta = np.asarray(theta, dtype=float)
    return np.sum(net.coupling * np.sin(theta[:, None] - theta[None, :]), axis=1)


def hessian_potential(net: PowerNetwork, theta) -> np.ndarray:
    """Cosine-weighted Laplacian ``d^2 U / d theta^2``."""
    theta = np.asarray(theta, dtype=float)
    W = net.coupling * np.cos(theta[:, None] - theta[None, :])
    np.fill_diagonal(W, 0.0)
    return np.diag(W.sum(axis=1)) - W


def grad_potential_increment(net: PowerNetwork, theta_star, dtheta) -> np.ndarray:
    """``grad U(theta* + dtheta) - grad U(theta*)`` without cancellation."""
    theta_star = np.asarray(theta_star, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    a = theta_star[:, None] - theta_star[None, :]
    x = dtheta[:, None] - dtheta[None, :]
    return np.sum(net.coupling * 2.0 * np.cos(a + 0.5 * x) * np.sin(0.5 * x), axis=1)


def bregman_potential(net: PowerNetwork, theta_star, dtheta) -> float:
    """``U(theta*+d) - U(theta*) - d^T grad U(theta*)``, evaluated stably near zero."""
    theta_star = np.asarray(theta_star, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    a = theta_star[:, None] - theta_star[None, :]
    x = dtheta[:, None] - dtheta[None, :]
    terms = np.sin(a) * (np.sin(x) - x) + 2.0 * np.cos(a) * np.sin(0.5 * x) ** 2
    return float(np.sum(np.triu(net.coupling, 1) * terms))


def p_star(net: PowerNetwork, dai: DaiParams) -> np.ndarray:
    """Steady-state secondary injections with identical marginal costs."""
    Ainv1 = 1.0 / dai.A
    alpha = np.sum(net.Pnet) / np.sum(Ainv1)
    return alpha * Ainv1


def sync_frequency(net: PowerNetwork, dai: DaiParams, u_star) -> float:
    """Synchronized frequency for a constant control input ``u*``."""
    return net.wd + float(np.sum(net.Pnet + np.asarray(u_star, dtype=float)) / np.sum(net.D))


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    theta: np.ndarray
    residual: float
    iterations: int
    secure: bool
    max_angle_difference: float


def _max_neighbor_difference(net: PowerNetwork, theta) -> float:
    i, k = np.nonzero(np.triu(net.B != 0, 1))
    if len(i) == 0:
        return 0.0
    return float(np.max(np.abs(theta[i] - theta[k])))


def equilibrium_solve(net: PowerNetwork, dai: DaiParams, theta_guess=None,
                      max_iter: int = 50, tol: float = 1e-10) -> EquilibriumResult:
    """Solve ``grad U(theta) = P^net - p*`` by gauge-fixed Newton iteration.

    The uniform-shift direction is fixed by keeping ``1^T A^{-1} theta``
    equal to that of the guess. Steps are halved (at most 10 times) while
    the residual does not decrease.

    Raises:
        EquilibriumError: no convergence within ``max_iter`` iterations.
    """
    n = net.n
    theta0 = np.zeros(n) if theta_guess is None else np.asarray(theta_guess, dtype=float)
    target = net.Pnet - p_star(net, dai)
    c = 1.0 / dai.A

    # iterate on the offset from the guess so uniform shifts of the guess carry through exactly
    delta = np.zeros(n)
    base = theta0 - theta0[0]

    def residual(d):
        return grad_potential(net, base + d) - target

    r = residual(delta)
    rnorm = float(np.max(np.abs(r)))
    it = 0
    while rnorm >= tol:
        if it >= max_iter:
            raise EquilibriumError(f"Newton did not converge in {max_iter} iterations (residual {rnorm:.3e})")
        H = hessian_potential(net, base + delta)
        bordered = np.zeros((n + 1, n + 1))
        bordered[:n, :n] = H
        bordered[:n, n] = c
        bordered[n, :n] = c
        rhs = np.concatenate([-r, [0.0]])
        try:
            step = np.linalg.solve(bordered, rhs)[:n]
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(f"singular Newton system at iteration {it}") from exc
        lam = 1.0
        for _ in range(11):
            trial = delta + lam * step
            r_trial = residual(trial)
            n_trial = float(np.max(np.abs(r_trial)))
            if n_trial < rnorm:
                break
            lam *= 0.5
        delta, r, rnorm = trial, r_trial, n_trial
        it += 1

    # re-centre the gauge on the guess: 1^T A^-1 theta* = 1^T A^-1 theta_guess
    theta = base + delta
    theta = theta + (c @ theta0 - c @ theta) / np.sum(c)
    spread = _max_neighbor_difference(net, theta)
    secure = spread < np.pi / 2
    if not secure:
        warnings.warn(f"equilibrium violates the security constraint: max neighbor angle difference "
                      f"{spread:.6f} >= pi/2", InsecureEquilibriumWarning, stacklevel=2)
    return EquilibriumResult(theta, rnorm, it, secure, spread)


def setpoints_for_equilibrium(net: PowerNetwork, dai: DaiParams, theta_star) -> PowerNetwork:
    """Network whose synchronized motion has angles ``theta_star``.

    Keeps the total net power (hence ``p*``) and the loads, and adjusts the
    setpoints ``Pd`` so that ``grad U(theta*) = P^net - p*``.
    """
    pst = p_star(net, dai)
    Pnet = grad_potential(net, theta_star) + pst
    return net.with_setpoints(Pnet + net.Gload * net.V**2)


def _check_dims(n, state: GridState):
    for name in ("theta", "omega", "p"):
        if np.shape(getattr(state, name)) != (n,):
            raise ValueError(f"state.{name} must have shape ({n},)")


def closed_loop_rhs(net: PowerNetwork, dai: DaiParams, state: GridState, delayed_p, ell: int,
                    ts: TopologySet, T: np.ndarray | None = None) -> GridState:
    """Switched delayed closed loop in original coordinates.

    Args:
        delayed_p: ``(n_channels, n)`` array, row ``m`` is ``p(t - tau_m)``.
        ell: active topology index.
        T: optional precomputed ``channel_matrices(ts)``.
    """
    n = net.n
    _check_dims(n, state)
    if T is None:
        T = channel_matrices(ts)
    delayed_p = np.asarray(delayed_p, dtype=float)
    if delayed_p.shape != (T.shape[1], n):
        raise ValueError(f"delayed_p must have shape {(T.shape[1], n)}, got {delayed_p.shape}")
    dev = state.omega - net.wd
    domega = (-net.D * dev + net.Pnet - grad_potential(net, state.theta) - state.p) / net.M
    consensus = np.einsum("mij,mj->i", T[ell], dai.A * delayed_p)
    K = dai.K
    dp = K * dev - K * dai.A * consensus
    return GridState(state.omega.copy(), domega, dp)


def nominal_rhs(net: PowerNetwork, dai: DaiParams, state: GridState, L) -> GridState:
    """Delay-free, fixed-topology closed loop with communication Laplacian ``L``."""
    dev = state.omega - net.wd
    domega = (-net.D * dev + net.Pnet - grad_potential(net, state.theta) - state.p) / net.M
    A = np.diag(dai.A)
    K = np.diag(dai.K)
    dp = K @ dev - K @ A @ np.asarray(L, dtype=float) @ A @ state.p
    return GridState(state.omega.copy(), domega, dp)
