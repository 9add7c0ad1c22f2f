"""Strict Lyapunov function of the delay-free loop and its delay extension.

With error state ``x = (theta~, omega~, p~)`` and ``g = grad U(theta~+theta*)
- grad U(theta*)``::

    V = B(theta~) + 1/2 omega~^T M omega~ + 1/(2 mu) (1^T A^-1 theta~)^2
        + 1/2 p~^T p~ + eps omega~^T A M g

where ``B`` is the Bregman divergence of the potential at ``theta*`` (so
``V(0) = 0``). Along the delay-free, fixed-topology dynamics
``dV/dt = -xi^T Q(theta) xi`` with ``xi = (g, omega~, p~)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .netmodel import (DaiParams, PowerNetwork, bregman_potential, grad_potential_increment,
                       hessian_potential)
from .reduction import ErrorState, ReducedSystem


class EpsilonSearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class LyapunovConfig:
    epsilon: float
    gamma: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass(frozen=True, eq=False)
class LkfWeights:
    """Weights of the Lyapunov-Krasovskii functional, one triple per channel."""

    S: np.ndarray  # (N, r, r)
    R: np.ndarray  # (N, r, r)
    S12: np.ndarray  # (N, r, r)
    h: np.ndarray  # (N,)

    def check(self, tol: float = 0.0) -> bool:
        """True if ``S_m, R_m > tol`` and ``[[R, S12], [*, R]] >= -tol``."""
        for S, R, S12 in zip(self.S, self.R, self.S12):
            if np.linalg.eigvalsh(S).min() <= tol or np.linalg.eigvalsh(R).min() <= tol:
                return False
            if np.linalg.eigvalsh(np.block([[R, S12], [S12.T, R]])).min() < -tol:
                return False
        return True


def eval_V(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, cfg: LyapunovConfig,
           err: ErrorState, theta_star) -> float:
    a = 1.0 / dai.A
    g = grad_potential_increment(net, theta_star, err.theta)
    return (bregman_potential(net, theta_star, err.theta)
            + 0.5 * err.omega @ (net.M * err.omega)
            + 0.5 * (a @ err.theta) ** 2 / rs.mu
            + 0.5 * err.p @ err.p
            + cfg.epsilon * err.omega @ (dai.A * net.M * g))


def hessian_at_eq(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, cfg: LyapunovConfig, theta_star,
                  symmetrized: bool = False) -> np.ndarray:
    """Hessian of ``V`` at the origin, size ``3n-1``.

    The exact mixed block is ``eps * H* M A`` (rows theta~, columns omega~).
    ``symmetrized=True`` returns the commuted form ``eps/2 (AMH* + H*MA)``
    instead; both agree when ``AM`` commutes with ``H*`` and are equally
    useful for small-``eps`` positivity arguments.
    """
    n = net.n
    H = hessian_potential(net, theta_star)
    a = 1.0 / dai.A
    AM = dai.A * net.M
    if symmetrized:
        cross = 0.5 * cfg.epsilon * (AM[:, None] * H + H * AM[None, :])
    else:
        cross = cfg.epsilon * H * AM[None, :]
    out = np.zeros((3 * n - 1, 3 * n - 1))
    out[:n, :n] = H + np.outer(a, a) / rs.mu
    out[:n, n:2 * n] = cross
    out[n:2 * n, :n] = cross.T
    out[n:2 * n, n:2 * n] = np.diag(net.M)
    out[2 * n:, 2 * n:] = np.eye(n - 1)
    return out


def e22(net: PowerNetwork, dai: DaiParams, theta) -> np.ndarray:
    AM = dai.A * net.M
    H = hessian_potential(net, theta)
    return AM[:, None] * H + H * AM[None, :]


def _vdot_blocks(net, dai, rs, eps, E22, Lbar):
    n = net.n
    out = np.zeros((3 * n - 1, 3 * n - 1))
    A = np.diag(dai.A)
    out[:n, :n] = eps * A
    out[:n, n:2 * n] = 0.5 * eps * np.diag(dai.A * net.D)
    out[:n, 2 * n:] = 0.5 * eps * dai.A[:, None] * rs.KhW
    out[n:2 * n, n:2 * n] = np.diag(net.D) - 0.5 * eps * E22
    out[2 * n:, 2 * n:] = Lbar
    out[n:, :n] = out[:n, n:].T
    return out


def vdot_matrix_nominal(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, cfg: LyapunovConfig, theta,
                        ell: int = 0) -> np.ndarray:
    """Matrix ``Q`` with ``dV/dt = -xi^T Q xi`` at absolute angles ``theta``."""
    return _vdot_blocks(net, dai, rs, cfg.epsilon, e22(net, dai, theta), rs.Lbar[ell])


def vdot_matrix_worst_case(net, dai, rs, cfg: LyapunovConfig, ell: int = 0) -> np.ndarray:
    """``vdot_matrix_nominal`` with ``E22`` replaced by its uniform bound ``gamma I``."""
    return _vdot_blocks(net, dai, rs, cfg.epsilon, cfg.gamma * np.eye(net.n), rs.Lbar[ell])


def gamma_bound(net: PowerNetwork, dai: DaiParams) -> float:
    """Uniform bound ``E22(theta) <= gamma I`` from Gershgorin on the Hessian."""
    hess_bound = 2.0 * np.max(net.coupling.sum(axis=1))
    return float(2.0 * np.max(dai.A * net.M) * hess_bound)


def regularized_composite(A_mat, B_mat, eps: float) -> np.ndarray:
    """``A + eps B``; positive definite for small ``eps`` when the leading
    block of ``B`` and the trailing block of ``A`` are positive definite."""
    return np.asarray(A_mat, dtype=float) + eps * np.asarray(B_mat, dtype=float)


def _min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def find_epsilon(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, theta_star, n_samples: int = 100,
                 max_halvings: int = 60, seed: int = 0) -> LyapunovConfig:
    """Largest ``eps = 2^-j`` making ``V`` strict for every topology.

    Checks the Hessian at the equilibrium, the worst-case derivative matrix
    (with ``gamma I`` in place of ``E22``) for every reduced Laplacian, and
    the exact derivative matrix at ``n_samples`` random angles.

    Raises:
        EpsilonSearchError: nothing found after ``max_halvings`` halvings,
            which indicates an equilibrium on or past the security boundary.
    """
    gamma = gamma_bound(net, dai)
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(-np.pi, np.pi, size=(n_samples, net.n))
    eps = 1.0
    for _ in range(max_halvings + 1):
        cfg = LyapunovConfig(eps, gamma)
        ok = _min_eig(hessian_at_eq(net, dai, rs, cfg, theta_star)) > 0
        ok = ok and all(_min_eig(vdot_matrix_worst_case(net, dai, rs, cfg, ell)) > 0
                        for ell in range(rs.Lbar.shape[0]))
        ok = ok and all(_min_eig(vdot_matrix_nominal(net, dai, rs, cfg, th, ell)) > 0
                        for th in thetas for ell in range(rs.Lbar.shape[0]))
        if ok:
            return cfg
        eps *= 0.5
    raise EpsilonSearchError(f"no admissible epsilon after {max_halvings} halvings; "
                             "is the equilibrium secure?")


def lyapunov_decreasing(values, floor: float = 1e-12) -> bool:
    """Strict decrease between consecutive samples until the value drops below ``floor``."""
    values = np.asarray(values)
    for a, b in zip(values[:-1], values[1:]):
        if a < floor:
            return True
        if not b < a:
            return False
    return True


def eval_LKF(net: PowerNetwork, dai: DaiParams, rs: ReducedSystem, cfg: LyapunovConfig, weights: LkfWeights,
             times, errors: list[ErrorState], theta_star) -> float:
    """Lyapunov-Krasovskii functional at the last sample of a history.

    ``times`` is a uniform grid ending at the evaluation time; ``errors``
    the matching error states. ``dp~/dt`` is taken from backward
    differences and integrals from the trapezoidal rule.

    Raises:
        ValueError: if the history is shorter than ``max h``.
    """
    times = np.asarray(times, dtype=float)
    h = np.asarray(weights.h, dtype=float)
    value = eval_V(net, dai, rs, cfg, errors[-1], theta_star)
    if np.all(h == 0):
        return value
    if len(times) < 2:
        raise ValueError("history needs at least two samples")
    dt = times[1] - times[0]
    span = times[-1] - times[0]
    if span < h.max() - 1e-9 * max(1.0, h.max()):
        raise ValueError(f"history covers {span:.4g} s but max h is {h.max():.4g} s")
    P = np.array([e.p for e in errors])
    dP = np.zeros_like(P)
    dP[1:] = (P[1:] - P[:-1]) / dt
    dP[0] = dP[1]
    t = times[-1]
    for m, hm in enumerate(h):
        if hm == 0:
            continue
        k = int(round(hm / dt))
        seg = slice(len(times) - 1 - k, len(times))
        s = times[seg]
        quad_s = np.einsum("ti,ij,tj->t", P[seg], weights.S[m], P[seg])
        quad_r = np.einsum("ti,ij,tj->t", dP[seg], weights.R[m], dP[seg])
        value += trapezoid(quad_s, s)
        value += hm * trapezoid((hm + s - t) * quad_r, s)
    return float(value)
