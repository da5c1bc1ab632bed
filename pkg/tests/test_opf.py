import json

import numpy as np
import pytest
import scipy.sparse as sp

from reactive_market.bounds import tighten_bounds
from reactive_market.devices import Generator, nominal_input, pf_slope
from reactive_market.opf import (OPFOptions, IndefiniteObjective, assemble_qp, build_layout,
                                 grid, injection_mask, line_losses, recover_pq)
from reactive_market.oracle import solve_centralized

from conftest import LOAD_LEVEL, feeder, nominal
from powerflow import feasible_point, nodal_injection_kw, sweep


def test_pf_slope_values():
    assert pf_slope(1.0) == 0.0
    assert pf_slope(0.9) == pytest.approx(0.4843221048, rel=1e-9)
    for pf in (0.6, 0.8, 0.95):
        assert np.tan(np.arccos(-pf)) == pytest.approx(-pf_slope(pf))


def test_bus2_variable_count():
    net, dev = feeder("bus2")
    sym, *_ = build_layout(net, dev)
    nodal, products, flows = 2 * 3 * 4, 2 * 3 * 4, 3 * 2
    pq = 2 * 3 * 2
    devices = 3 * 2 + 3 * 2 + 3 * 2  # slack, PV, load
    assert len(sym) == nodal + pq + products + flows + devices == 84


def test_zero_injection_phases_carry_only_voltage():
    net, dev = feeder("ieee13")
    inj = injection_mask(net, dev)
    qp = assemble_qp(net, dev, nominal_input(dev, load=0.4))
    ix = qp.index
    for k, p in zip(*np.nonzero(net.bus_phases & ~inj)):
        assert ("VR", k, p) in ix.lookup and ("IR", k, p) not in ix.lookup
        assert ("P", k, p) not in ix.lookup
    assert not np.any((ix.eq_kind == "pdef") & ~inj[ix.eq_bus, np.maximum(ix.eq_phase, 0)])


@pytest.mark.parametrize("name", ["bus2", "bus5", "ieee13", "ieee123"])
def test_objective_is_psd_and_shapes_agree(name):
    net, dev, inp = nominal(name)
    qp = assemble_qp(net, dev, inp)
    assert qp.M.shape == (qp.n, qp.n)
    assert qp.G.shape == (qp.b.size, qp.n) and qp.H.shape == (qp.d.size, qp.n)
    assert qp.index.eq_kind.size == qp.b.size and qp.index.ineq_kind.size == qp.d.size
    assert abs(qp.M - qp.M.T).max() == 0
    if qp.n < 600:
        assert np.linalg.eigvalsh(qp.M.toarray()).min() >= -1e-12


def test_flexible_load_disutility_is_rejected_when_indefinite():
    from dataclasses import replace

    net, dev = feeder("bus2")
    ld = dev.loads[0]
    flex = replace(ld, alpha_p=1.0, p_min_kw=np.zeros(3), p_max_kw=np.asarray(ld.p_kw) * 1.5)
    dev2 = type(dev)(dev.generators, (flex,))
    with pytest.raises(IndefiniteObjective):
        assemble_qp(net, dev2, nominal_input(dev2))


@pytest.mark.parametrize("name,pv", [("bus2", 0.9), ("bus5", 0.5), ("ieee13", 0.8)])
def test_load_flow_point_satisfies_every_row(name, pv):
    net, dev = feeder(name)
    inp = nominal_input(dev, pv=pv, load=LOAD_LEVEL[name])
    b = tighten_bounds(net, dev, inp)
    qp = assemble_qp(net, dev, inp, bounds=b)
    V, I, F = sweep(net, nodal_injection_kw(net, dev, inp))
    x = feasible_point(qp, net, dev, inp, b, V, I, F)
    res = qp.residuals(x)
    assert res["eq"] < 1e-9
    assert res["ineq"] < 1e-9
    # exact products leave no bilinear gap
    assert recover_pq(qp, x).bilinear_gap < 1e-12


def test_loss_term_matches_flow_losses():
    net, dev, inp = nominal("bus5")
    zeta = 0.3
    qp = assemble_qp(net, dev, inp, zeta=zeta)
    qp0 = assemble_qp(net, dev, inp, zeta=0.0)
    rng = np.random.default_rng(3)
    x = rng.normal(size=qp.n)
    F = grid(qp, x, "FR", net.n_line) + 1j * grid(qp, x, "FI", net.n_line)
    quad = 0.5 * x @ (qp.M @ x) - 0.5 * x @ (qp0.M @ x)
    assert quad == pytest.approx(zeta * line_losses(net, F).sum(), rel=1e-12)


def test_single_line_loss_example():
    from types import SimpleNamespace

    ln = SimpleNamespace(impedance=np.diag([0.01, 0.01, 0.01]) + 0j)
    net = SimpleNamespace(lines=[ln], n_line=1)
    flows = np.array([[1.0 + 0j, 0, 0]])
    assert line_losses(net, flows)[0] == pytest.approx(0.01)
    assert line_losses(net, np.zeros((1, 3), complex))[0] == 0.0


def test_recover_pq_zero_injection_and_corners():
    net, dev, inp = nominal("bus2", pv=0.0)
    qp = assemble_qp(net, dev, inp)
    sol = solve_centralized(qp)
    rec = recover_pq(qp, sol.x)
    s = np.hypot(rec.P, rec.Q)
    assert rec.max_relative_gap <= 0.02
    assert np.all(np.maximum(rec.gap_p, rec.gap_q) <= 0.02 * s + 1e-12)
    with pytest.raises(ValueError):
        recover_pq(qp, sol.x[:-1])


def test_bus2_solution_gap_within_two_percent():
    net, dev, inp = nominal("bus2", pv=0.9)
    qp = assemble_qp(net, dev, inp)
    rec = recover_pq(qp, solve_centralized(qp).x)
    assert rec.max_relative_gap <= 0.02


def test_options_validation_and_json_export():
    with pytest.raises(ValueError):
        OPFOptions(zeta=-1.0)
    net, dev, inp = nominal("bus2")
    qp = assemble_qp(net, dev, inp)
    doc = json.loads(qp.to_json())
    G = sp.coo_matrix((doc["G"]["val"], (doc["G"]["row"], doc["G"]["col"])), shape=doc["G"]["shape"])
    assert abs(G - qp.G).max() == 0
    assert len(doc["index_map"]["symbol"]) == qp.n


def test_pf_rows_bound_generator_q():
    net, dev, inp = nominal("bus2", pv=0.9)
    qp = assemble_qp(net, dev, inp)
    sol = solve_centralized(qp)
    ix = qp.index
    pg = sol.x[ix.vars_of("PG")]
    qg = sol.x[ix.vars_of("QG")]
    assert np.all(np.abs(qg) <= pf_slope(0.9) * pg + 1e-8)
