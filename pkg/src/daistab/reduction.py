"""Orthogonal reduction of the integral states and error coordinates.

``p`` is split into ``pbar`` (n-1 components orthogonal to
``v = K^{-1/2} A^{-1} 1`` after scaling by ``K^{-1/2}``) and the scalar
``zeta`` along ``v``. The consensus dynamics act on ``pbar`` only, through
the reduced matrices::

    Lbar_l  = W^T K^{1/2} A L_l     A K^{1/2} W
    Tbar_lm = W^T K^{1/2} A T_{l,m} A K^{1/2} W
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import TopologySet, channel_matrices, validate_topology_set
from .netmodel import DaiParams, GridState, PowerNetwork, grad_potential_increment


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Everything the certificate and the error dynamics need.

    Attributes:
        W: ``(n, n-1)`` orthonormal basis of the complement of ``v``.
        mu: ``||v||^2``.
        v: ``K^{-1/2} A^{-1} 1``.
        Kh: diagonal of ``K^{1/2}``.
        Lbar: ``(nu, n-1, n-1)`` reduced Laplacians.
        Tbar: ``(nu, n_channels, n-1, n-1)`` reduced channel matrices.
    """

    W: np.ndarray
    mu: float
    v: np.ndarray
    Kh: np.ndarray
    Lbar: np.ndarray
    Tbar: np.ndarray

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def n_channels(self) -> int:
        return self.Tbar.shape[1]

    @property
    def KhW(self) -> np.ndarray:
        """``K^{1/2} W``."""
        return self.Kh[:, None] * self.W

    @property
    def full_basis(self) -> np.ndarray:
        """The orthogonal ``n x n`` matrix ``[W, v / sqrt(mu)]``."""
        return np.column_stack([self.W, self.v / np.sqrt(self.mu)])


def complement_basis(v) -> np.ndarray:
    """Householder-based orthonormal basis of ``v``'s orthogonal complement.

    The reflector maps ``v/|v|`` to ``-e_1`` (sign picked against
    cancellation for positive ``v``); its columns 2..n span the complement.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    u = v / np.linalg.norm(v)
    w = u.copy()
    w[0] += 1.0 if u[0] >= 0 else -1.0
    H = np.eye(n) - 2.0 * np.outer(w, w) / (w @ w)
    return H[:, 1:]


def build_reduction(dai: DaiParams, ts: TopologySet) -> ReducedSystem:
    """Reduced Laplacians and channel matrices for gain ``dai.K``.

    Raises:
        ValueError: if ``kappa == 0`` or some topology is disconnected.
    """
    if dai.kappa <= 0:
        raise ValueError("kappa must be > 0 to build the reduction (K must be invertible)")
    diag = validate_topology_set(ts)
    if not diag.ok:
        raise ValueError(f"cannot reduce a disconnected topology set: {diag.describe()}")
    if ts.n != dai.A.shape[0]:
        raise ValueError(f"topology set has {ts.n} nodes, DAI parameters have {dai.A.shape[0]}")
    Kh = np.sqrt(dai.K)
    v = 1.0 / (Kh * dai.A)
    W = complement_basis(v)
    mu = float(v @ v)
    G = (Kh * dai.A)[:, None] * W  # A K^{1/2} W
    T = channel_matrices(ts).astype(float)
    Tbar = np.einsum("ia,lmij,jb->lmab", G, T, G)
    Lbar = Tbar.sum(axis=1)
    # exact symmetry for the Laplacian images (T itself may be unsymmetric)
    Lbar = 0.5 * (Lbar + np.swapaxes(Lbar, 1, 2))
    return ReducedSystem(W, mu, v, Kh, Lbar, Tbar)


def to_reduced_p(rs: ReducedSystem, dai: DaiParams, p) -> tuple[np.ndarray, float]:
    p = np.asarray(p, dtype=float)
    if p.shape != (rs.n,):
        raise ValueError(f"p must have shape ({rs.n},)")
    q = p / rs.Kh
    return rs.W.T @ q, float(np.sum(p / (dai.K * dai.A)) / np.sqrt(rs.mu))


def from_reduced_p(rs: ReducedSystem, dai: DaiParams, pbar, zeta: float) -> np.ndarray:
    pbar = np.asarray(pbar, dtype=float)
    if pbar.shape != (rs.n - 1,):
        raise ValueError(f"pbar must have shape ({rs.n - 1},)")
    return rs.Kh * (rs.W @ pbar + rs.v * (zeta / np.sqrt(rs.mu)))


def zeta0(rs: ReducedSystem, dai: DaiParams, theta0, p0) -> float:
    """Integration constant tying ``zeta`` to the angles along a trajectory."""
    Ainv = 1.0 / dai.A
    return float(Ainv @ (np.asarray(p0) / dai.K - np.asarray(theta0)) / np.sqrt(rs.mu))


def matched_equilibrium(dai: DaiParams, theta_star, p_st, state0: GridState) -> np.ndarray:
    """Shift ``theta_star`` along ``1`` to the synchronized motion reached from ``state0``.

    Under the consensus dynamics ``1^T K^-1 A^-1 p - 1^T A^-1 theta`` is
    conserved, which pins the angle gauge of the limit.
    """
    c = 1.0 / dai.A
    target = c @ (p_st / dai.K) - c @ (state0.p / dai.K) + c @ state0.theta
    theta_star = np.asarray(theta_star, dtype=float)
    return theta_star + (target - c @ theta_star) / np.sum(c)


@dataclass(frozen=True, eq=False)
class ErrorState:
    theta: np.ndarray
    omega: np.ndarray
    p: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.omega, self.p])

    @classmethod
    def from_vector(cls, z, n: int) -> "ErrorState":
        z = np.asarray(z, dtype=float)
        return cls(z[:n].copy(), z[n:2 * n].copy(), z[2 * n:3 * n - 1].copy())

    @classmethod
    def zero(cls, n: int) -> "ErrorState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n - 1))


def to_error_state(rs: ReducedSystem, dai: DaiParams, state: GridState, theta_star, wd: float,
                   t: float = 0.0) -> ErrorState:
    """Original coordinates at time ``t`` to error coordinates.

    ``theta_star`` is the angle of the synchronized motion at ``t = 0``.
    """
    pbar, _ = to_reduced_p(rs, dai, state.p)
    # pbar* = W^T K^{-1/2} p* vanishes because p* is parallel to A^{-1} 1
    return ErrorState(state.theta - np.asarray(theta_star) - wd * t, state.omega - wd, pbar)


def from_error_state(rs: ReducedSystem, dai: DaiParams, err: ErrorState, theta_star, wd: float,
                     zeta_0: float, t: float = 0.0) -> GridState:
    theta = err.theta + np.asarray(theta_star) + wd * t
    zeta = float((1.0 / dai.A) @ (theta - wd * t) / np.sqrt(rs.mu)) + zeta_0
    return GridState(theta, err.omega + wd, from_reduced_p(rs, dai, err.p, zeta))


def error_rhs(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, err: ErrorState, delayed_pt,
              ell: int, theta_star) -> ErrorState:
    """Switched delayed dynamics in reduced error coordinates.

    Args:
        delayed_pt: ``(n_channels, n-1)``, row ``m`` is ``ptilde(t - tau_m)``.
    """
    n = rs.n
    if err.theta.shape != (n,) or err.omega.shape != (n,) or err.p.shape != (n - 1,):
        raise ValueError("error state dimensions do not match the reduced system")
    delayed_pt = np.asarray(delayed_pt, dtype=float)
    if delayed_pt.shape != (rs.n_channels, n - 1):
        raise ValueError(f"delayed_pt must have shape {(rs.n_channels, n - 1)}")
    a = 1.0 / dai.A
    flow = grad_potential_increment(net, theta_star, err.theta)
    domega = (-net.D * err.omega - flow - rs.KhW @ err.p - a * (a @ err.theta) / rs.mu) / net.M
    dp = rs.KhW.T @ err.omega - np.einsum("mab,mb->a", rs.Tbar[ell], delayed_pt)
    return ErrorState(err.omega.copy(), domega, dp)
