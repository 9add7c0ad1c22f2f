"""Delay-dependent LMI certificate over a family of topologies.

Decision variables are shared by all topologies and consist of, for each
channel ``m``, a symmetric ``S_m``, a symmetric ``R_m`` and a full ``S12_m``,
all of size ``(n-1) x (n-1)``. With ``Rb = sum_m h_m^2 R_m`` and
``G = K^{1/2} W`` the matrix ``Psi`` of topology ``l`` has the block layout::

    [ D - G Rb G^T   G Rb L    0           -G Rb T_m                  ]
    [      *         L - L Rb L  -S_m      L Rb T_m - S_m - T_m / 2   ]
    [      *            *      R_m + S_m   S12_m + S_m                ]
    [      *            *         *        R_m + S_m - T_m^T Rb T_m   ]

where ``L`` and ``T_m`` are the reduced Laplacian and channel matrices. The
last two block rows repeat once per channel. The certificate holds when
``Psi_l > 0`` for every ``l``, ``S_m > 0``, ``R_m > 0`` and
``[[R_m, S12_m], [*, R_m]] >= 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graph import TopologySet
from .netmodel import DaiParams
from .reduction import ReducedSystem, build_reduction
from .sdp import AffineLmi, CvxpyOracle, SdpOracle

COUPLINGS = ("blockdiag", "full")


class NoFeasibleGainError(RuntimeError):
    def __init__(self, message: str, log: list):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class DelayBounds:
    h: tuple[float, ...]

    def __post_init__(self):
        h = tuple(float(x) for x in self.h)
        if any(not math.isfinite(x) or x < 0 for x in h):
            raise ValueError(f"delay bounds must be finite and >= 0, got {h}")
        object.__setattr__(self, "h", h)

    @classmethod
    def uniform(cls, h: float, n_channels: int) -> "DelayBounds":
        return cls((float(h),) * n_channels)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.h, dtype=float)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.h)) <= 1


@dataclass(frozen=True)
class DecisionLayout:
    """Packing of ``(S, R, S12)`` into one flat vector.

    Per channel: upper triangle of ``S``, upper triangle of ``R``, then
    ``S12`` row-major.
    """

    n_channels: int
    r: int

    @property
    def _sym(self) -> int:
        return self.r * (self.r + 1) // 2

    @property
    def per_channel(self) -> int:
        return 2 * self._sym + self.r * self.r

    @property
    def n_vars(self) -> int:
        return self.n_channels * self.per_channel

    def unpack(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_vars,):
            raise ValueError(f"decision vector must have length {self.n_vars}")
        N, r, q = self.n_channels, self.r, self._sym
        iu = np.triu_indices(r)
        S = np.zeros((N, r, r))
        R = np.zeros((N, r, r))
        blocks = x.reshape(N, self.per_channel)
        for m in range(N):
            S[m][iu] = blocks[m, :q]
            R[m][iu] = blocks[m, q:2 * q]
        S = S + np.triu(S, 1).swapaxes(1, 2)
        R = R + np.triu(R, 1).swapaxes(1, 2)
        S12 = blocks[:, 2 * q:].reshape(N, r, r).copy()
        return S, R, S12

    def pack(self, S, R, S12) -> np.ndarray:
        iu = np.triu_indices(self.r)
        parts = [np.concatenate([np.asarray(S[m])[iu], np.asarray(R[m])[iu], np.asarray(S12[m]).ravel()])
                 for m in range(self.n_channels)]
        return np.concatenate(parts)


def psi_dimension(n: int, n_channels: int) -> int:
    return n + (n - 1) * (1 + 2 * n_channels)


def psi_matrix(D, KhW, Lbar, Tbar, h, S, R, S12, coupling: str = "blockdiag") -> np.ndarray:
    """Numeric ``Psi`` for one vertex ``(Lbar, Tbar)`` at fixed decision values.

    ``coupling="blockdiag"`` keeps only the diagonal channel blocks of
    ``-T^T Rb T`` in the last block row; ``"full"`` keeps every cross-channel
    block ``-T_a^T Rb T_b``.
    """
    if coupling not in COUPLINGS:
        raise ValueError(f"coupling must be one of {COUPLINGS}")
    D = np.asarray(D, dtype=float)
    n, r = KhW.shape
    N = Tbar.shape[0]
    h = np.asarray(h, dtype=float)
    if h.shape != (N,):
        raise ValueError(f"need {N} delay bounds, got {h.shape[0] if h.ndim else 'scalar'}")
    Rb = np.einsum("m,mab->ab", h * h, R)
    GR = KhW @ Rb
    LR = Lbar @ Rb
    P = np.zeros((psi_dimension(n, N),) * 2)
    o2, o3, o4 = n, n + r, n + r + N * r
    P[:n, :n] = np.diag(D) - GR @ KhW.T
    P[:n, o2:o3] = GR @ Lbar
    P[o2:o3, o2:o3] = Lbar - LR @ Lbar
    for m in range(N):
        s3 = slice(o3 + m * r, o3 + (m + 1) * r)
        s4 = slice(o4 + m * r, o4 + (m + 1) * r)
        P[:n, s4] = -GR @ Tbar[m]
        P[o2:o3, s3] = -S[m]
        P[o2:o3, s4] = LR @ Tbar[m] - S[m] - 0.5 * Tbar[m]
        P[s3, s3] = R[m] + S[m]
        P[s3, s4] = S12[m] + S[m]
        P[s4, s4] = R[m] + S[m]
    for a in range(N):
        others = range(a, N) if coupling == "full" else (a,)
        for b in others:
            sa = slice(o4 + a * r, o4 + (a + 1) * r)
            sb = slice(o4 + b * r, o4 + (b + 1) * r)
            P[sa, sb] -= Tbar[a].T @ Rb @ Tbar[b]
    # only blocks on or above the diagonal were filled
    return _mirror(P)


def _affine_from_map(fn: Callable[[np.ndarray], np.ndarray], n_vars: int, name: str,
                     strict: bool = True) -> AffineLmi:
    const = fn(np.zeros(n_vars))
    coeffs = np.empty((n_vars,) + const.shape)
    e = np.zeros(n_vars)
    for i in range(n_vars):
        e[i] = 1.0
        coeffs[i] = fn(e) - const
        e[i] = 0.0
    return AffineLmi(const, coeffs, name, strict)


def assemble_psi(rs: ReducedSystem, D, bounds: DelayBounds, ell: int | None = None, vertex=None,
                 coupling: str = "blockdiag") -> AffineLmi:
    """``Psi`` of topology ``ell`` (or of an explicit ``vertex = (Lbar, Tbar)``)
    as an affine function of the flat decision vector.

    Raises:
        ValueError: if the number of delay bounds differs from the channel count.
    """
    if len(bounds.h) != rs.n_channels:
        raise ValueError(f"{len(bounds.h)} delay bounds for {rs.n_channels} channels")
    if vertex is None:
        if ell is None:
            raise ValueError("give a topology index or an explicit vertex")
        Lbar, Tbar = rs.Lbar[ell], rs.Tbar[ell]
        name = f"psi[{ell}]"
    else:
        Lbar, Tbar = vertex
        name = "psi[vertex]"
    layout = DecisionLayout(rs.n_channels, rs.n - 1)
    KhW, h = rs.KhW, bounds.array

    def fn(x):
        S, R, S12 = layout.unpack(x)
        return psi_matrix(D, KhW, Lbar, Tbar, h, S, R, S12, coupling)

    return _affine_from_map(fn, layout.n_vars, name)


def side_constraints(layout: DecisionLayout) -> list[AffineLmi]:
    """``S_m > 0``, ``R_m > 0`` (strict) and ``[[R, S12], [*, R]] >= 0`` per channel."""
    out = []
    for m in range(layout.n_channels):
        def s_fn(x, m=m):
            return layout.unpack(x)[0][m]

        def r_fn(x, m=m):
            return layout.unpack(x)[1][m]

        def rs12_fn(x, m=m):
            _, R, S12 = layout.unpack(x)
            return np.block([[R[m], S12[m]], [S12[m].T, R[m]]])

        out.append(_affine_from_map(s_fn, layout.n_vars, f"S[{m}]"))
        out.append(_affine_from_map(r_fn, layout.n_vars, f"R[{m}]"))
        out.append(_affine_from_map(rs12_fn, layout.n_vars, f"RS12[{m}]", strict=False))
    return out


def reduce_channel_stack(rs: ReducedSystem, dai: DaiParams, T) -> tuple[np.ndarray, np.ndarray]:
    """Map original-coordinate channel matrices ``(N, n, n)`` to a reduced vertex."""
    G = (rs.Kh * dai.A)[:, None] * rs.W
    Tbar = np.einsum("ia,mij,jb->mab", G, np.asarray(T, dtype=float), G)
    Lbar = Tbar.sum(axis=0)
    return 0.5 * (Lbar + Lbar.T), Tbar


def hull_vertices(rs: ReducedSystem, extra: Sequence[tuple[np.ndarray, np.ndarray]] = ()) -> list:
    """Vertices ``(Lbar, Tbar)`` to check: every given topology plus optional extras.

    ``Psi`` is concave in ``(Lbar, Tbar)``, so common decision variables that
    work on all vertices also work on their convex hull.
    """
    return [(rs.Lbar[ell], rs.Tbar[ell]) for ell in range(rs.Lbar.shape[0])] + list(extra)


@dataclass(eq=False)
class LmiProblem:
    lmis: list[AffineLmi]
    layout: DecisionLayout
    delta: float
    scale: float
    kappa: float
    bounds: DelayBounds
    channel_labels: list[str] = field(default_factory=list)

    @property
    def psi_dimension(self) -> int:
        return self.lmis[0].dim


@dataclass(eq=False)
class CertResult:
    status: str  # "feasible" | "infeasible" | "solver_error"
    kappa: float
    delta: float
    margin: float | None = None
    S: np.ndarray | None = None
    R: np.ndarray | None = None
    S12: np.ndarray | None = None
    min_eigs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


def build_problem(D, dai: DaiParams, ts: TopologySet, bounds: DelayBounds, coupling: str = "blockdiag",
                  extra_channel_stacks: Sequence = (), delta_rel: float = 1e-7) -> LmiProblem:
    """All constraints for gain ``dai.kappa``.

    ``extra_channel_stacks`` holds additional ``(N, n, n)`` channel stacks in
    original coordinates, checked as extra hull vertices.
    """
    rs = build_reduction(dai, ts)
    if len(bounds.h) != rs.n_channels:
        raise ValueError(f"{len(bounds.h)} delay bounds for {rs.n_channels} channels")
    extras = [reduce_channel_stack(rs, dai, T) for T in extra_channel_stacks]
    layout = DecisionLayout(rs.n_channels, rs.n - 1)
    lmis = [assemble_psi(rs, D, bounds, vertex=v, coupling=coupling) for v in hull_vertices(rs, extras)]
    for i, lmi in enumerate(lmis):
        object.__setattr__(lmi, "name", f"psi[{i}]")
    lmis += side_constraints(layout)
    scale = max(float(np.abs(l.const).max()) for l in lmis)
    scale = scale if scale > 0 else 1.0
    return LmiProblem(lmis, layout, delta_rel * scale, scale, dai.kappa, bounds, ts.channel_labels())


def check_feasibility(problem: LmiProblem, oracle: SdpOracle | None = None) -> CertResult:
    """Maximize the common margin, then re-verify the witness by eigenvalues.

    The verdict is ``feasible`` only if the solver margin reaches ``delta``
    and every strict constraint has ``lambda_min >= delta/2`` (non-strict
    ones ``>= -delta/2``) at the returned witness.
    """
    oracle = oracle or CvxpyOracle()
    res = oracle.solve(problem.lmis, problem.layout.n_vars, margin_cap=problem.scale)
    diag = {"solver_status": res.solver_status, "solve_time": res.solve_time,
            "psi_dimension": problem.psi_dimension, "n_vars": problem.layout.n_vars}
    if res.status != "solved":
        return CertResult("solver_error", problem.kappa, problem.delta, diagnostics=diag)
    x = res.x
    min_eigs = {lmi.name: lmi.min_eig(x) for lmi in problem.lmis}
    half = 0.5 * problem.delta
    verified = all(min_eigs[l.name] >= (half if l.strict else -half) for l in problem.lmis)
    diag["verified"] = verified
    S, R, S12 = problem.layout.unpack(x)
    status = "feasible" if res.margin >= problem.delta and verified else "infeasible"
    return CertResult(status, problem.kappa, problem.delta, res.margin, S, R, S12, min_eigs, diag)


@dataclass(eq=False)
class CertifySetup:
    """Everything needed to certify one gain; ``check`` builds and solves."""

    D: np.ndarray
    A: np.ndarray
    Kcal: np.ndarray
    ts: TopologySet
    bounds: DelayBounds
    coupling: str = "blockdiag"
    extra_channel_stacks: tuple = ()
    delta_rel: float = 1e-7
    oracle: SdpOracle | None = None

    def dai(self, kappa: float) -> DaiParams:
        return DaiParams(self.A, self.Kcal, kappa)

    def problem(self, kappa: float) -> LmiProblem:
        return build_problem(self.D, self.dai(kappa), self.ts, self.bounds, self.coupling,
                             self.extra_channel_stacks, self.delta_rel)

    def check(self, kappa: float) -> CertResult:
        return check_feasibility(self.problem(kappa), self.oracle)


@dataclass
class GainSearchResult:
    kappa: float
    bracket: tuple[float, float | None]
    at_cap: bool
    log: list[tuple[float, str]]
    best: CertResult | None = None


def max_gain_search(check: Callable[[float], CertResult], kappa_init: float, tol: float = 1e-3,
                    kappa_min: float = 1e-6, cap_factor: float = 1024.0) -> GainSearchResult:
    """Largest gain found feasible by bracketing and bisection.

    Doubles from ``kappa_init`` until a probe fails (stopping at
    ``cap_factor * kappa_init``), or halves until one succeeds, then bisects
    until the bracket is at most ``tol`` wide. Solver errors count as
    failures and are kept in the log.

    Raises:
        NoFeasibleGainError: if nothing above ``kappa_min`` is feasible.
    """
    if kappa_init <= 0:
        raise ValueError("kappa_init must be > 0")
    log: list[tuple[float, str]] = []

    def probe(k):
        res = check(k)
        log.append((k, res.status))
        return res

    cap = cap_factor * kappa_init
    first = probe(kappa_init)
    if first.feasible:
        lo, best, hi = kappa_init, first, None
        while hi is None:
            k = min(2.0 * lo, cap)
            res = probe(k)
            if res.feasible:
                lo, best = k, res
                if k >= cap:
                    return GainSearchResult(lo, (lo, None), True, log, best)
            else:
                hi = k
    else:
        hi, lo, best = kappa_init, None, None
        while lo is None:
            k = 0.5 * hi
            if k < kappa_min:
                raise NoFeasibleGainError(f"no feasible gain above {kappa_min:g}", log)
            res = probe(k)
            if res.feasible:
                lo, best = k, res
            else:
                hi = k
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        res = probe(mid)
        if res.feasible:
            lo, best = mid, res
        else:
            hi = mid
    return GainSearchResult(lo, (lo, hi), False, log, best)


def assemble_phi(rs1: ReducedSystem, D, h: float, ell: int, kappa: float, Scal, R, S12,
                 coupling: str = "blockdiag") -> tuple[np.ndarray, np.ndarray]:
    """Split ``Psi`` at gain ``kappa`` with ``S = kappa * Scal`` as ``Psi0 + kappa * Phi``.

    ``rs1`` must be reduced at unit gain (``K = Kcal``); reductions at other
    gains scale as ``Lbar(kappa) = kappa * Lbar(1)``. ``Psi0`` carries ``D``,
    ``R`` and ``S12``; ``Phi`` collects the rest and still depends on
    ``kappa`` through the delay terms.

    Raises:
        ValueError: if ``h`` is not a single scalar bound.
    """
    if np.ndim(h) != 0:
        raise ValueError("the gain decomposition needs one uniform delay bound")
    h = float(h)
    n, r, N = rs1.n, rs1.n - 1, rs1.n_channels
    Scal, R, S12 = (np.asarray(a, dtype=float) for a in (Scal, R, S12))
    L, T = rs1.Lbar[ell], rs1.Tbar[ell]
    G = rs1.KhW
    Rsum = R.sum(axis=0)
    h2 = h * h
    sk = math.sqrt(kappa)
    dim = psi_dimension(n, N)
    o2, o3, o4 = n, n + r, n + r + N * r
    Psi0 = np.zeros((dim, dim))
    Phi = np.zeros((dim, dim))
    Psi0[:n, :n] = np.diag(np.asarray(D, dtype=float))
    Phi[:n, :n] = -h2 * G @ Rsum @ G.T
    Phi[:n, o2:o3] = h2 * sk * G @ Rsum @ L
    Phi[o2:o3, o2:o3] = L - h2 * kappa * L @ Rsum @ L
    for m in range(N):
        s3 = slice(o3 + m * r, o3 + (m + 1) * r)
        s4 = slice(o4 + m * r, o4 + (m + 1) * r)
        Phi[o2:o3, s3] = -Scal[m]
        Phi[:n, s4] = -h2 * sk * G @ Rsum @ T[m]
        Phi[o2:o3, s4] = h2 * kappa * L @ Rsum @ T[m] - Scal[m] - 0.5 * T[m]
        Psi0[s3, s3] = R[m]
        Psi0[s3, s4] = S12[m]
        Psi0[s4, s4] = R[m]
        Phi[s3, s3] = Scal[m]
        Phi[s3, s4] = Scal[m]
        Phi[s4, s4] = Scal[m]
    for a in range(N):
        for b in (range(a, N) if coupling == "full" else (a,)):
            sa = slice(o4 + a * r, o4 + (a + 1) * r)
            sb = slice(o4 + b * r, o4 + (b + 1) * r)
            Phi[sa, sb] -= h2 * kappa * T[a].T @ Rsum @ T[b]
    return _mirror(Psi0), _mirror(Phi)


def _mirror(P: np.ndarray) -> np.ndarray:
    upper = np.triu(P, 1)
    return upper + upper.T + np.diag(np.diag(P))


def phi22_kappa_bound(rs1: ReducedSystem, h: float, Rsum) -> float:
    """Largest ``kappa`` keeping ``L - h^2 kappa L Rsum L`` positive definite on
    every topology: ``1 / (h^2 max_l lambda_max(Rsum^{1/2} L_l Rsum^{1/2}))``."""
    w, V = np.linalg.eigh(np.asarray(Rsum, dtype=float))
    root = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
    lam = max(np.linalg.eigvalsh(root @ L @ root).max() for L in rs1.Lbar)
    if h == 0 or lam <= 0:
        return math.inf
    return 1.0 / (h * h * lam)


def write_witness(result: CertResult, path, channel_labels: Sequence[str] = ()) -> None:
    """Write the verdict, margins and decision matrices as JSON."""
    doc = {
        "status": result.status,
        "kappa": result.kappa,
        "delta": result.delta,
        "margin": result.margin,
        "min_eigenvalues": result.min_eigs,
        "diagnostics": result.diagnostics,
        "channels": [],
    }
    if result.S is not None:
        labels = list(channel_labels) or [str(m + 1) for m in range(len(result.S))]
        for m, label in enumerate(labels):
            doc["channels"].append({"channel": label, "S": result.S[m].tolist(), "R": result.R[m].tolist(),
                                    "S12": result.S12[m].tolist()})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
