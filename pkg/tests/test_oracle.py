import numpy as np
import pytest
import scipy.sparse as sp

from reactive_market.opf import IndexMap, StandardFormQP, assemble_qp
from reactive_market.oracle import SolverFailure, kkt_residuals, solve_centralized

from conftest import nominal


def _toy(M, c, G=None, b=None, H=None, d=None):
    n = len(c)
    G = sp.csr_matrix(np.zeros((0, n)) if G is None else np.atleast_2d(G))
    H = sp.csr_matrix(np.zeros((0, n)) if H is None else np.atleast_2d(H))
    ix = IndexMap(np.array(["x"] * n), np.zeros(n, int), np.zeros(n, int), np.arange(n),
                  np.array(["eq"] * G.shape[0]), np.zeros(G.shape[0], int), np.zeros(G.shape[0], int),
                  np.array(["iq"] * H.shape[0]), np.zeros(H.shape[0], int), np.zeros(H.shape[0], int))
    return StandardFormQP(sp.csr_matrix(np.atleast_2d(M)), np.asarray(c, float), G,
                          np.asarray([] if b is None else b, float), H,
                          np.asarray([] if d is None else d, float), ix)


def test_scalar_with_lower_bound():
    # min x^2 s.t. x >= 1, written as -x <= -1
    sol = solve_centralized(_toy([[2.0]], [0.0], H=[[-1.0]], d=[-1.0]))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.lam[0] == pytest.approx(2.0, abs=1e-7)


def test_equality_sum():
    n = 4
    sol = solve_centralized(_toy(np.eye(n), np.zeros(n), G=np.ones((1, n)), b=[n]))
    np.testing.assert_allclose(sol.x, 1.0, atol=1e-8)
    # M x + G' mu = 0 gives mu = -1 under this sign convention
    assert sol.mu[0] == pytest.approx(-1.0, abs=1e-8)


def test_infeasible_raises():
    qp = _toy([[1.0]], [0.0], G=[[1.0]], b=[2.0], H=[[1.0]], d=[1.0])
    with pytest.raises(SolverFailure):
        solve_centralized(qp)


@pytest.mark.parametrize("name,pv", [("bus2", 0.0), ("bus2", 0.9), ("bus5", 0.5), ("ieee13", 0.8)])
def test_kkt_residuals_small(name, pv):
    net, dev, inp = nominal(name, pv=pv)
    qp = assemble_qp(net, dev, inp)
    sol = solve_centralized(qp)
    k = kkt_residuals(qp, sol.x, sol.mu, sol.lam)
    assert max(k.values()) < 1e-8
    assert np.all(sol.lam >= 0)


def test_kkt_zero_at_exact_point():
    qp = _toy(np.eye(2), [0.0, 0.0], G=[[1.0, 1.0]], b=[2.0])
    k = kkt_residuals(qp, np.ones(2), np.array([-1.0]), np.zeros(0))
    assert max(k.values()) == 0.0


@pytest.mark.parametrize("name,pv", [("bus2", 0.9), ("bus5", 0.5)])
def test_agrees_with_independent_interior_point(name, pv):
    pytest.importorskip("cvxopt")
    from cvxopt import matrix, solvers

    net, dev, inp = nominal(name, pv=pv)
    qp = assemble_qp(net, dev, inp)
    ref = solve_centralized(qp)
    solvers.options.update(show_progress=False, abstol=1e-11, reltol=1e-11, feastol=1e-11,
                           maxiters=200)
    out = solvers.qp(matrix(qp.M.toarray()), matrix(qp.c), matrix(qp.H.toarray()), matrix(qp.d),
                     matrix(qp.G.toarray()), matrix(qp.b))
    assert out["status"] == "optimal"
    x = np.array(out["x"]).ravel()
    mu = np.array(out["y"]).ravel()
    assert qp.objective(x) == pytest.approx(ref.objective, rel=1e-7)
    rows = np.concatenate([qp.index.rows_of("pdef"), qp.index.rows_of("qdef")])
    np.testing.assert_allclose(mu[rows], ref.mu[rows], atol=1e-5)


@pytest.mark.parametrize("name,pv", [("bus2", 0.9), ("bus5", 0.5)])
def test_qdef_duals_match_finite_differences(name, pv):
    net, dev, inp = nominal(name, pv=pv)
    qp = assemble_qp(net, dev, inp)
    ref = solve_centralized(qp)
    h = 1e-4
    for r in qp.index.rows_of("qdef"):
        vals = []
        for s in (+1, -1):
            b = qp.b.copy()
            b[r] += s * h
            pert = StandardFormQP(qp.M, qp.c, qp.G, b, qp.H, qp.d, qp.index)
            vals.append(solve_centralized(pert).objective)
        fd = -(vals[0] - vals[1]) / (2 * h)
        assert fd == pytest.approx(ref.mu[r], rel=0.05, abs=1e-6)


def test_load_q_perturbation_moves_cost_by_price():
    # a fixed Q load is a row 'QL = q'; an extra delta there withdraws delta at the node
    net, dev, inp = nominal("bus2", pv=0.9)
    qp = assemble_qp(net, dev, inp)
    ref = solve_centralized(qp)
    ix = qp.index
    fix = np.flatnonzero(ix.eq_kind == "fix")
    ql = [r for r in fix if qp.G[r].indices.size == 1 and ix.var_symbol[qp.G[r].indices[0]] == "QL"]
    r = ql[0]
    delta = 1e-4
    b = qp.b.copy()
    b[r] += delta
    new = solve_centralized(StandardFormQP(qp.M, qp.c, qp.G, b, qp.H, qp.d, ix))
    qrow = [q for q in ix.rows_of("qdef") if ix.eq_bus[q] == ix.eq_bus[r] and ix.eq_phase[q] == ix.eq_phase[r]][0]
    assert (new.objective - ref.objective) / delta == pytest.approx(ref.mu[qrow], rel=0.05)


# values produced by the interior-point oracle and frozen here as regressions
FROZEN = {
    ("bus2", 0.0): (0.5635016808453309, 1.00310578, 0.10141685),
    ("bus2", 0.9): (0.3589707108849206, 0.99995739, 0.09786475),
    ("bus5", 0.5): (0.6992310215337886, 1.00176703, 0.09984713),
}


@pytest.mark.parametrize("key", sorted(FROZEN))
def test_frozen_regressions(key):
    obj, mu_p, mu_q = FROZEN[key]
    net, dev, inp = nominal(*key)
    qp = assemble_qp(net, dev, inp)
    sol = solve_centralized(qp)
    ix = qp.index
    assert sol.objective == pytest.approx(obj, rel=1e-7)
    rp = [r for r in ix.rows_of("pdef") if ix.eq_bus[r] == 1 and ix.eq_phase[r] == 0][0]
    rq = [r for r in ix.rows_of("qdef") if ix.eq_bus[r] == 1 and ix.eq_phase[r] == 0][0]
    assert sol.mu[rp] == pytest.approx(mu_p, abs=1e-6)
    assert sol.mu[rq] == pytest.approx(mu_q, abs=1e-6)
