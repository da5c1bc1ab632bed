"""Centralised QP solve (Clarabel interior point) used as the reference answer."""

from __future__ import annotations

from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .opf import StandardFormQP


class SolverFailure(RuntimeError):
    pass


@dataclass
class PrimalDualSolution:
    x: np.ndarray
    mu: np.ndarray  # equality multipliers
    lam: np.ndarray  # inequality multipliers, >= 0
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))  # coordination multipliers
    iterations: int = 0
    converged: bool = True
    objective: float = float("nan")
    history: list = field(default_factory=list)
    solver: str = ""
    status: str = ""
    kkt: dict = field(default_factory=dict)


def kkt_residuals(qp: StandardFormQP, x, mu, lam) -> dict:
    """Scaled KKT residuals, computed directly from the QP data."""
    grad = qp.M @ x + qp.c
    stat = grad + qp.G.T @ mu + qp.H.T @ lam
    slack = qp.d - qp.H @ x
    scale = 1.0 + max(np.max(np.abs(grad), initial=0), np.max(np.abs(qp.c), initial=0))
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0) / scale),
        "primal_eq": float(np.max(np.abs(qp.G @ x - qp.b), initial=0.0)),
        "primal_ineq": float(np.max(-slack, initial=0.0).clip(min=0.0)),
        "dual_sign": float(np.max(-lam, initial=0.0).clip(min=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0) / scale),
    }


def solve_centralized(qp: StandardFormQP, tol: float = 1e-10, max_iter: int = 200,
                      verbose: bool = False) -> PrimalDualSolution:
    m_eq, m_in = qp.G.shape[0], qp.H.shape[0]
    P = sp.triu(sp.csc_matrix(qp.M), format="csc")
    A = sp.vstack([qp.G, qp.H], format="csc")
    rhs = np.concatenate([qp.b, qp.d])
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))
    s = clarabel.DefaultSettings()
    s.verbose = verbose
    s.max_iter = max_iter
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.tol_ktratio = 1e-8
    s.presolve_enable = False
    solver = clarabel.DefaultSolver(P, qp.c, A, rhs, cones, s)
    sol = solver.solve()
    status = str(sol.status)
    if "Infeasible" in status:
        raise SolverFailure(f"QP infeasible ({status})")
    if "Solved" not in status:
        raise SolverFailure(f"centralised solve failed: {status}")
    x = np.asarray(sol.x)
    z = np.asarray(sol.z)
    mu, lam = z[:m_eq], np.maximum(z[m_eq:], 0.0)
    return PrimalDualSolution(
        x=x, mu=mu, lam=lam, iterations=int(sol.iterations), converged=True,
        objective=qp.objective(x), solver="clarabel", status=status,
        kkt=kkt_residuals(qp, x, mu, lam),
    )
