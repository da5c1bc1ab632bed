from types import SimpleNamespace

import numpy as np
import pytest

from reactive_market import metrics as mt
from reactive_market.devices import DeviceSet, Generator


def _r(**kw):
    base = dict(pg_kw=np.zeros((1, 3)), qg_kvar=np.zeros((1, 3)), load_p_kw=np.ones((1, 3)),
                load_q_kvar=np.zeros((1, 3)), losses_pu=0.0, v=np.ones((2, 3), complex))
    base.update(kw)
    return SimpleNamespace(**base)


def test_penetration_examples():
    dev = DeviceSet((Generator("a", 1, (True, True, True), 600.0),))
    assert mt.dg_penetration(dev, 500.0) == pytest.approx(1.2)
    assert mt.dg_penetration(DeviceSet(), 500.0) == 0.0
    with pytest.raises(ValueError):
        mt.dg_penetration(dev, 0.0)


def test_energy_penetration_examples():
    load = np.full((1, 3), 10.0)
    half = _r(pg_kw=np.full((1, 3), 5.0), load_p_kw=load)
    assert mt.dg_energy_penetration([half] * 4, None) == pytest.approx(0.5)
    assert mt.dg_energy_penetration([_r(load_p_kw=load)], None) == 0.0


def test_utilisation_examples():
    island = _r(qg_kvar=np.full((1, 3), 2.0), load_q_kvar=np.full((1, 3), 2.0))
    assert mt.dg_q_utilization([island]) == pytest.approx(1.0)
    assert mt.dg_q_utilization([_r(load_q_kvar=np.ones((1, 3)))]) == 0.0
    assert mt.period_p_utilization(_r(pg_kw=np.full((1, 3), 0.5))) == pytest.approx(0.5)


def test_losses_and_voltage_examples():
    assert mt.network_losses([_r(losses_pu=0.01)]) == pytest.approx(0.01)
    assert mt.network_losses([_r()]) == 0.0
    assert mt.mean_voltage([_r()]) == pytest.approx(1.0)
    two = _r(v=np.array([[0.99, 0, 0], [1.01, 0, 0]], complex))
    assert mt.mean_voltage([two]) == pytest.approx(1.0)
    assert mt.mean_voltage([two], buses=[1]) == pytest.approx(1.01)


def test_coefficient_of_variation():
    assert mt.coeff_variation([2.0, 2.0, 2.0]) == 0.0
    assert mt.coeff_variation([1.0, 2.0, 3.0]) == pytest.approx(0.408248290, rel=1e-8)
    assert mt.coeff_variation([1.0, np.nan, 3.0]) == pytest.approx(0.5)
    assert np.isnan(mt.coeff_variation([]))


def test_power_factor_examples():
    assert mt.power_factor([1, 1, 1], [0, 0, 0]) == 1.0
    assert mt.power_factor([1, 1, 1], [0.4843, 0.4843, 0.4843]) == pytest.approx(0.900, abs=1e-4)
    assert mt.power_factor([1.0], [-0.4843]) == pytest.approx(0.900, abs=1e-4)


def _recompute(pt):
    """Straight-line formulas over the raw dump, written without the library helpers."""
    res, dev, net = pt.results, pt.devices, pt.net
    gb = sorted({net.bus_index(g.bus) for g in dev.generators})
    Pg = np.array([r.pg_kw.sum() for r in res])
    Qg = np.array([r.qg_kvar.sum() for r in res])
    Pl = np.array([r.load_p_kw.sum() for r in res])
    Ql = np.array([r.load_q_kvar.sum() for r in res])
    out = {
        "dg_q_utilization": Qg.sum() / Ql.sum(),
        "dg_p_utilization": Pg.sum() / Pl.sum(),
        "network_losses": sum(
            sum(float(np.real(np.conj(r.flows[e]) @ ln.impedance.real @ r.flows[e]))
                for e, ln in enumerate(net.lines)) for r in res),
        "achieved_penetration": sum(g.p_max_kw for g in dev.generators) / pt.average_load_kw,
    }
    sg = sum(np.abs(r.pg_kw.sum(axis=1) + 1j * r.qg_kvar.sum(axis=1)).sum() for r in res)
    sl = sum(np.abs(r.load_p_kw.sum(axis=1) + 1j * r.load_q_kvar.sum(axis=1)).sum() for r in res)
    out["dg_energy_penetration"] = sg / sl
    mags = [abs(r.v[k, p]) for r in res for k in range(net.n_bus) for p in range(3)
            if net.buses[k].phases[p]]
    out["mean_voltage_all"] = np.mean(mags)
    out["mean_voltage_dg"] = np.mean([abs(r.v[k, p]) for r in res for k in gb for p in range(3)
                                      if net.buses[k].phases[p]])
    # d-LMP at DG buses and settlement
    ratios = []
    for gi, g in enumerate(dev.generators):
        k = net.bus_index(g.bus)
        mq = np.array([r.mu_q[k] for r in res])
        mp = np.array([r.mu_p[k] for r in res])
        Q = np.array([r.qg_kvar[gi] for r in res])
        P = np.array([r.pg_kw[gi] for r in res])
        bar = np.nansum(mq * Q) / np.nansum(np.where(np.isnan(mq), 0, Q))
        real = np.nansum(mp * P) / 12
        react = bar * Q.sum() / 12
        ratios.append(react / (real + react))
    out["q_revenue_ratio"] = np.mean(ratios)
    return out


def test_metrics_match_independent_recomputation(bus2_day):
    ref = _recompute(bus2_day)
    for key, value in ref.items():
        assert bus2_day.metrics[key] == pytest.approx(value, rel=1e-9), key


def test_pf_never_below_limit(bus2_day):
    pt = bus2_day
    for r in pt.results:
        pf = mt.dg_power_factors(r, pt.devices)
        assert np.all(pf >= pt.devices.generators[0].pf_min - 1e-6)
