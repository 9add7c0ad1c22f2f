"""Affine matrix inequalities over a flat decision vector, and a solver oracle.

An ``AffineLmi`` is ``F(x) = F0 + sum_i x_i F_i`` with symmetric ``F_i``.
An oracle maximizes a common margin ``t`` such that every strict LMI
satisfies ``F(x) >= t I`` and every non-strict one ``F(x) >= 0``. The
problem is always feasible for ``t`` negative enough, so a solver status
other than optimal signals numerical breakdown rather than infeasibility.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class AffineLmi:
    const: np.ndarray  # (d, d)
    coeffs: np.ndarray  # (k, d, d)
    name: str = ""
    strict: bool = True

    @property
    def dim(self) -> int:
        return self.const.shape[0]

    def evaluate(self, x) -> np.ndarray:
        F = self.const + np.tensordot(np.asarray(x, dtype=float), self.coeffs, axes=1)
        return 0.5 * (F + F.T)

    def min_eig(self, x) -> float:
        return float(np.linalg.eigvalsh(self.evaluate(x)).min())


@dataclass
class OracleResult:
    status: str  # "solved" | "failed"
    x: np.ndarray | None
    margin: float | None
    solver_status: str = ""
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)


class SdpOracle(Protocol):
    def solve(self, lmis: Sequence[AffineLmi], n_vars: int, margin_cap: float) -> OracleResult:
        ...


class CvxpyOracle:
    """Reference backend on top of cvxpy (interior point by default)."""

    def __init__(self, solver: str = "CLARABEL", **solver_options):
        self.solver = solver
        self.solver_options = solver_options

    def solve(self, lmis: Sequence[AffineLmi], n_vars: int, margin_cap: float) -> OracleResult:
        import cvxpy as cp

        x = cp.Variable(n_vars)
        t = cp.Variable()
        constraints = [t <= margin_cap]
        for lmi in lmis:
            d = lmi.dim
            lin = lmi.coeffs.reshape(n_vars, d * d).T @ x
            F = lmi.const + cp.reshape(lin, (d, d), order="C")
            F = 0.5 * (F + F.T)
            if lmi.strict:
                constraints.append(F - t * np.eye(d) >> 0)
            else:
                constraints.append(F >> 0)
        problem = cp.Problem(cp.Maximize(t), constraints)
        start = time.perf_counter()
        try:
            problem.solve(solver=self.solver, **self.solver_options)
        except cp.error.SolverError as exc:
            return OracleResult("failed", None, None, f"solver error: {exc}", time.perf_counter() - start)
        elapsed = time.perf_counter() - start
        status = problem.status
        if status in ("optimal", "optimal_inaccurate") and x.value is not None:
            return OracleResult("solved", np.asarray(x.value, dtype=float), float(t.value), status, elapsed)
        return OracleResult("failed", None, None, status, elapsed)
