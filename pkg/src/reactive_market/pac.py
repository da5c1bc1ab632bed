"""Proximal atomic coordination over one atom per bus.

Each atom owns its bus variables, the devices at the bus and the flows on
the lines leaving it. Every row of the QP is assigned to one atom; a row
that touches a variable owned elsewhere reads a local *estimate* of it, and
a coordination row ``estimate - owner = 0`` ties the copies together.

The iteration for atom j, with the local matrix factored once:

    a_j <- -K_j^{-1} (c_j + G_j' mu_bar + B_j' nu_bar + H_j' lam - rg G_j' b_j
                      + rg (B'B - D) a - a_j / rho)
    lam  <- max(0, lam + rg (H a - d))
    mu   <- mu + rg (G a - b),      mu_bar = mu + rg (G a - b)
    nu   <- nu + rg B a,            nu_bar = nu + rg B a

with ``rg = rho * gamma`` and ``K_j = M_j + rg (G_j'G_j + D_j) + I / rho``.
``D`` is the diagonal of ``B'B``; the off-diagonal part couples an atom to
its neighbours and is evaluated at the previous iterate, which is what the
exchange steps between iterations provide.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .opf import StandardFormQP
from .oracle import PrimalDualSolution


class AtomizationError(ValueError):
    pass


class SingularAtom(np.linalg.LinAlgError):
    def __init__(self, atom_id):
        super().__init__(f"local system of atom {atom_id} is singular")
        self.atom_id = atom_id


@dataclass
class PacConfig:
    rho: float = 0.02
    gamma: float = 600.0
    max_iters: int = 50000
    tol_feas: float = 1e-6
    tol_coord: float = 1e-6
    tol_step: float = 1e-7
    equilibrate: bool = True
    extrapolate_ineq: bool = True
    ineq_mode: str = "linear"  # or "augmented"
    workers: int = 1
    trace_every: int = 0  # 0 = no residual history

    def __post_init__(self):
        if self.rho <= 0 or self.gamma <= 0:
            raise ValueError("rho and gamma must be positive")
        if min(self.tol_feas, self.tol_coord, self.tol_step) <= 0:
            raise ValueError("tolerances must be positive")
        if self.ineq_mode not in ("augmented", "linear"):
            raise ValueError(f"unknown ineq_mode {self.ineq_mode!r}")
        if self.max_iters < 1 or self.workers < 1:
            raise ValueError("max_iters and workers must be >= 1")


@dataclass
class Atom:
    id: int
    owned: np.ndarray  # global variable ids
    estimates: np.ndarray  # global ids of the owner variables that are copied here
    columns: np.ndarray  # positions in the extended vector (owned first, then estimates)
    eq_rows: np.ndarray
    ineq_rows: np.ndarray
    coord_rows: np.ndarray  # coordination rows whose estimate lives here
    M: np.ndarray = field(default=None, repr=False)
    c: np.ndarray = field(default=None, repr=False)
    G: sp.csr_matrix = field(default=None, repr=False)
    b: np.ndarray = field(default=None, repr=False)
    H: sp.csr_matrix = field(default=None, repr=False)
    d: np.ndarray = field(default=None, repr=False)
    mu: np.ndarray = field(default=None, repr=False)
    mu_bar: np.ndarray = field(default=None, repr=False)
    lam: np.ndarray = field(default=None, repr=False)
    nu: np.ndarray = field(default=None, repr=False)
    nu_bar: np.ndarray = field(default=None, repr=False)
    a: np.ndarray = field(default=None, repr=False)


@dataclass
class CoordinationGraph:
    """``B`` over the extended vector; row r reads ``a[est[r]] - a[owner[r]]``."""

    B: sp.csr_matrix
    owner: np.ndarray  # extended positions of owned copies
    est: np.ndarray  # extended positions of estimates
    est_atom: np.ndarray
    owner_atom: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.B.shape[0]


@dataclass
class ExtendedProblem:
    """The QP rewritten over owned variables plus estimates."""

    qp: StandardFormQP
    n_owned: int
    G: sp.csr_matrix
    H: sp.csr_matrix
    M: sp.csr_matrix
    c: np.ndarray
    est_of: np.ndarray  # global id copied by each estimate


def atomize(qp: StandardFormQP, net=None, partition: np.ndarray | None = None):
    """Split the QP into atoms. ``partition`` maps variable -> atom (default: owning bus)."""
    ix = qp.index
    n = qp.n
    owner = np.asarray(ix.var_bus if partition is None else partition, dtype=int)
    if owner.shape != (n,) or np.any(owner < 0):
        raise AtomizationError("orphan variable: every variable needs an owning atom")
    if partition is None:
        row_eq, row_in = ix.eq_bus, ix.ineq_bus
    else:
        # rows follow the atom of their first variable under a custom partition
        row_eq = _row_owner(qp.G, owner)
        row_in = _row_owner(qp.H, owner)

    M = sp.csr_matrix(qp.M)
    mc = M.tocoo()
    if np.any(owner[mc.row] != owner[mc.col]):
        raise AtomizationError("objective couples variables of different atoms")

    est_key: dict = {}
    est_of, est_atom = [], []

    def remap(A, row_atom):
        A = sp.csr_matrix(A)
        cols = A.indices.copy()
        for r in range(A.shape[0]):
            j = row_atom[r]
            for p in range(A.indptr[r], A.indptr[r + 1]):
                v = A.indices[p]
                if owner[v] != j:
                    key = (j, v)
                    if key not in est_key:
                        est_key[key] = n + len(est_of)
                        est_of.append(v)
                        est_atom.append(j)
                    cols[p] = est_key[key]
        return cols, A

    g_cols, G = remap(qp.G, row_eq)
    h_cols, H = remap(qp.H, row_in)
    n_est = len(est_of)
    n_ext = n + n_est
    G_ext = sp.csr_matrix((G.data.copy(), g_cols, G.indptr.copy()), shape=(G.shape[0], n_ext))
    H_ext = sp.csr_matrix((H.data.copy(), h_cols, H.indptr.copy()), shape=(H.shape[0], n_ext))
    est_of = np.array(est_of, dtype=int)
    est_atom = np.array(est_atom, dtype=int)

    rows = np.arange(n_est)
    B = sp.csr_matrix(
        (np.concatenate([np.full(n_est, -1.0), np.ones(n_est)]),
         (np.concatenate([rows, rows]), np.concatenate([est_of, n + rows]))),
        shape=(n_est, n_ext),
    )
    graph = CoordinationGraph(B, est_of, n + rows, est_atom, owner[est_of])
    M_ext = sp.block_diag([M, sp.csr_matrix((n_est, n_est))], format="csr")
    c_ext = np.concatenate([qp.c, np.zeros(n_est)])
    ext = ExtendedProblem(qp, n, G_ext, H_ext, M_ext, c_ext, est_of)

    ext_owner = np.concatenate([owner, est_atom])
    atoms = []
    for j in np.unique(ext_owner):
        cols = np.flatnonzero(ext_owner == j)
        er = np.flatnonzero(row_eq == j)
        ir = np.flatnonzero(row_in == j)
        for A, rr in ((G_ext, er), (H_ext, ir)):
            sub = A[rr]
            if sub.nnz and np.any(ext_owner[sub.indices] != j):
                raise AtomizationError(f"row of atom {j} spans more than one atom")
        atoms.append(Atom(
            id=int(j), owned=cols[cols < n], estimates=est_of[cols[cols >= n] - n],
            columns=cols, eq_rows=er, ineq_rows=ir,
            coord_rows=np.flatnonzero(est_atom == j),
            M=M_ext[cols][:, cols].toarray(), c=c_ext[cols],
            G=G_ext[er][:, cols], b=qp.b[er], H=H_ext[ir][:, cols], d=qp.d[ir],
        ))
    return atoms, graph, ext


def _row_owner(A, owner):
    A = sp.csr_matrix(A)
    out = np.zeros(A.shape[0], dtype=int)
    for r in range(A.shape[0]):
        cols = A.indices[A.indptr[r]:A.indptr[r + 1]]
        out[r] = owner[cols[0]] if cols.size else 0
    return out


def check_convergence(ext: ExtendedProblem, graph: CoordinationGraph, a, a_prev=None) -> dict:
    """Residual record for an extended iterate."""
    r_eq = ext.G @ a - ext.qp.b
    r_in = ext.H @ a - ext.qp.d
    r_b = graph.B @ a
    step = 0.0 if a_prev is None else float(np.max(np.abs(a - a_prev), initial=0.0))
    return {
        "feas_eq": float(np.max(np.abs(r_eq), initial=0.0)),
        "coord": float(np.max(np.abs(r_b), initial=0.0)),
        "feas_ineq": float(np.max(r_in, initial=0.0).clip(min=0.0)),
        "step": step,
    }


def _flat_start(qp: StandardFormQP) -> np.ndarray:
    x = np.zeros(qp.n)
    ix = qp.index
    angles = np.deg2rad([0.0, -120.0, 120.0])
    for s, f in (("VR", np.cos), ("VI", np.sin)):
        idx = ix.vars_of(s)
        x[idx] = f(angles[ix.var_phase[idx]])
    return x


class _Batched:
    """Per-atom dense inverses, applied in fixed-size stacks.

    With ``H`` given, an atom's matrix may also carry ``rg * H_A' H_A`` for
    its currently active inequality rows; the inverse is recomputed only
    when that atom's active pattern changes.
    """

    def __init__(self, K: sp.csr_matrix, atoms, workers: int, H=None, rg: float = 0.0):
        self.atoms = atoms
        self.groups = [a.columns for a in atoms]
        size = max(len(g) for g in self.groups)
        self.pad = np.zeros((len(atoms), size), dtype=int)
        self.valid = np.zeros((len(atoms), size), dtype=bool)
        self.inv = np.zeros((len(atoms), size, size))
        self.base = []
        self.hloc = []
        self.pattern = [None] * len(atoms)
        self.cache = [dict() for _ in atoms]
        self.rg = rg
        self.refactors = 0
        K = sp.csc_matrix(K)
        for j, (atom, cols) in enumerate(zip(atoms, self.groups)):
            Kj = K[cols][:, cols].toarray()
            self.base.append(Kj)
            self.hloc.append(None if H is None else H[atom.ineq_rows][:, cols].toarray())
            self.inv[j, :len(cols), :len(cols)] = self._invert(atom.id, Kj)
            self.pad[j, :len(cols)] = cols
            self.valid[j, :len(cols)] = True
        self.workers = workers
        self.chunks = np.array_split(np.arange(len(atoms)), workers)
        self.pool = ThreadPoolExecutor(workers) if workers > 1 else None

    @staticmethod
    def _invert(atom_id, Kj):
        try:
            lu = sla.lu_factor(Kj, check_finite=True)
        except (ValueError, sla.LinAlgError):
            raise SingularAtom(atom_id) from None
        if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(Kj).max())):
            raise SingularAtom(atom_id)
        return sla.lu_solve(lu, np.eye(Kj.shape[0]))

    def refresh(self, active: np.ndarray):
        for j, atom in enumerate(self.atoms):
            pat = active[atom.ineq_rows]
            key = pat.tobytes()
            if key == self.pattern[j]:
                continue
            self.pattern[j] = key
            inv = self.cache[j].get(key)
            if inv is None:
                Ha = self.hloc[j][pat]
                inv = self._invert(atom.id, self.base[j] + self.rg * (Ha.T @ Ha))
                self.refactors += 1
                if len(self.cache[j]) < 64:
                    self.cache[j][key] = inv
            m = len(self.groups[j])
            self.inv[j, :m, :m] = inv

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        r = np.where(self.valid, rhs[self.pad], 0.0)
        out = np.empty_like(r)

        def run(idx):
            out[idx] = np.matmul(self.inv[idx], r[idx][..., None])[..., 0]

        if self.pool is None:
            for idx in self.chunks:
                run(idx)
        else:
            list(self.pool.map(run, self.chunks))
        x = np.empty(rhs.shape)
        x[self.pad[self.valid]] = out[self.valid]
        return x

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def pac_iterate(atoms, graph: CoordinationGraph, ext: ExtendedProblem,
                config: PacConfig | None = None, x0: np.ndarray | None = None,
                trace_path=None, duals0: tuple | None = None) -> PrimalDualSolution:
    cfg = config or PacConfig()
    qp = ext.qp
    n, n_ext = ext.n_owned, ext.G.shape[1]
    G, H, B = ext.G, ext.H, graph.B
    b, d = qp.b.copy(), qp.d.copy()
    # row equilibration (duals are mapped back at the end)
    if cfg.equilibrate:
        sg = 1.0 / np.maximum(sp.linalg.norm(G, axis=1), 1e-12)
        sh = 1.0 / np.maximum(sp.linalg.norm(H, axis=1), 1e-12)
    else:
        sg, sh = np.ones(G.shape[0]), np.ones(H.shape[0])
    G = sp.diags(sg) @ G
    H = sp.diags(sh) @ H
    b, d = sg * b, sh * d
    G, H = sp.csr_matrix(G), sp.csr_matrix(H)
    GT, HT, BT = G.T.tocsr(), H.T.tocsr(), B.T.tocsr()

    rho, rg = cfg.rho, cfg.rho * cfg.gamma
    Ddiag = np.asarray(B.multiply(B).sum(axis=0)).ravel()
    K = ext.M + rg * (GT @ G) + sp.diags(rg * Ddiag + 1.0 / rho)
    augmented = cfg.ineq_mode == "augmented"
    solver = _Batched(K, atoms, cfg.workers, H if augmented else None, rg)
    BtB_off = (BT @ B - sp.diags(Ddiag)).tocsr()
    Gtb = GT @ b

    a = np.zeros(n_ext)
    start = _flat_start(qp) if x0 is None else np.asarray(x0, float)
    a[:n] = start
    a[n:] = start[ext.est_of]
    mu = np.zeros(G.shape[0])
    lam = np.zeros(H.shape[0])
    nu = np.zeros(B.shape[0])
    if duals0 is not None:
        # warm start from (mu, lam) of the original rows; nu follows from stationarity
        mu0, lam0 = (np.asarray(v, float) for v in duals0)
        mu, lam = mu0 / sg, np.maximum(lam0, 0.0) / sh
        nu = -(GT @ mu + HT @ lam)[n:]
    mu_bar = mu.copy()
    lam_bar = lam.copy()
    nu_bar = nu.copy()

    history = []
    writer = None
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "feas_eq", "coord", "feas_ineq", "step", "objective"])
    converged = False
    best = None
    it = 0
    try:
        for it in range(1, cfg.max_iters + 1):
            if augmented:
                active = lam + rg * (H @ a - d) > 0.0
                solver.refresh(active)
                lin = HT @ np.where(active, lam - rg * d, 0.0)
            else:
                lin = HT @ lam_bar
            rhs = (ext.c + GT @ mu_bar + BT @ nu_bar + lin - rg * Gtb
                   + rg * (BtB_off @ a) - a / rho)
            a_new = solver.solve(-rhs)
            r_eq = G @ a_new - b
            r_in = H @ a_new - d
            r_b = B @ a_new
            lam_new = np.maximum(0.0, lam + rg * r_in)
            mu_new = mu + rg * r_eq
            nu_new = nu + rg * r_b
            step = float(np.max(np.abs(a_new - a)))
            lam_bar = 2.0 * lam_new - lam if cfg.extrapolate_ineq else lam_new
            lam = lam_new
            mu = mu_new
            mu_bar = mu + rg * r_eq
            nu = nu_new
            nu_bar = nu + rg * r_b
            a = a_new
            feas = max(float(np.max(np.abs(r_eq / sg), initial=0.0)),
                       float(np.max(r_in / sh, initial=0.0)))
            coord = float(np.max(np.abs(r_b), initial=0.0))
            score = max(feas, coord)
            if best is None or score < best[0]:
                best = (score, it)
            if writer is not None or (cfg.trace_every and it % cfg.trace_every == 0):
                rec = {"iteration": it, "feas_eq": float(np.max(np.abs(r_eq / sg), initial=0)),
                       "coord": coord, "feas_ineq": float(np.max(r_in / sh, initial=0).clip(0)),
                       "step": step, "objective": qp.objective(a[:n])}
                if cfg.trace_every and it % cfg.trace_every == 0:
                    history.append(rec)
                if writer is not None:
                    writer.writerow([rec[k] for k in ("iteration", "feas_eq", "coord",
                                                      "feas_ineq", "step", "objective")])
            if feas < cfg.tol_feas and coord < cfg.tol_coord and step < cfg.tol_step:
                converged = True
                break
    finally:
        solver.close()
        if fh is not None:
            fh.close()

    x = a[:n].copy()
    return PrimalDualSolution(
        x=x, mu=sg * mu, lam=sh * lam, nu=nu, iterations=it, converged=converged,
        objective=qp.objective(x), history=history, solver="pac",
        status="converged" if converged else f"max_iters (best residual {best[0]:.2e} at {best[1]})",
    )


def solve_pac(qp: StandardFormQP, config: PacConfig | None = None, x0=None,
              trace_path=None) -> PrimalDualSolution:
    atoms, graph, ext = atomize(qp)
    return pac_iterate(atoms, graph, ext, config, x0=x0, trace_path=trace_path)
