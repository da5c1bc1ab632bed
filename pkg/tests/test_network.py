import copy
import json

import numpy as np
import pytest

from reactive_market.network import (FeederError, build_branch_impedance, build_incidence,
                                     load_network, network_from_dict, network_to_dict,
                                     parse_phases, phase_string)

from conftest import DATA


def two_bus_doc():
    return json.loads((DATA / "bus2.json").read_text())


@pytest.mark.parametrize("name,n_bus", [("bus2", 2), ("bus5", 5), ("ieee13", 12), ("ieee123", 123)])
def test_shipped_feeders_load(name, n_bus):
    net = load_network(DATA / f"{name}.json")
    assert net.n_bus == n_bus
    assert net.n_line == n_bus - 1
    assert net.buses[net.slack_index].is_slack


def test_phase_strings_round_trip():
    for s in ("a", "bc", "abc", "ac"):
        assert phase_string(parse_phases(s)) == s
    with pytest.raises(ValueError):
        parse_phases("abd")


def test_per_unit_conversion():
    net = load_network(DATA / "bus2.json")
    # 2 kft of line, r11 = 0.0866667 ohm/kft, z_base = 4.16^2 / 1 = 17.3056 ohm
    assert net.lines[0].impedance[0, 0].real == pytest.approx(2 * 0.086666667 / 17.3056)
    assert net.kw_to_pu(1000 / 3) == pytest.approx(1.0)
    assert net.pu_to_kw(net.kw_to_pu(42.0)) == pytest.approx(42.0)


def test_incidence_structure():
    net = load_network(DATA / "bus5.json")
    A = build_incidence(net).toarray()
    assert A.shape == (3 * net.n_line, 3 * net.n_bus)
    # one +1 and one -1 per present line-phase, nothing elsewhere
    present = net.line_phases.ravel()
    assert np.all(A[present].sum(axis=1) == 0)
    assert np.all((A[present] != 0).sum(axis=1) == 2)
    assert np.all(A[~present] == 0)


def test_branch_impedance_blocks():
    net = load_network(DATA / "bus5.json")
    Z = build_branch_impedance(net).toarray()
    for e, ln in enumerate(net.lines):
        np.testing.assert_allclose(Z[3 * e:3 * e + 3, 3 * e:3 * e + 3], ln.impedance)


def test_dict_round_trip():
    net = load_network(DATA / "ieee13.json")
    back = network_from_dict(network_to_dict(net))
    for a, b in zip(net.lines, back.lines):
        np.testing.assert_allclose(a.impedance, b.impedance, rtol=1e-12)
    assert [b.id for b in back.buses] == [b.id for b in net.buses]


def test_bfs_order_has_parents_first():
    net = load_network(DATA / "ieee123.json")
    order = net.bfs_order()
    pos = {k: i for i, k in enumerate(order)}
    for f, t in net.line_ends:
        assert pos[f] < pos[t]


@pytest.mark.parametrize("mutate,match", [
    (lambda d: d["buses"].append(dict(d["buses"][1], id=3)), "N-1|disconnected"),
    (lambda d: d["lines"][0].update({"to": 1}), "self-loop"),
    (lambda d: d["buses"][1].update({"slack": True}), "slack"),
    (lambda d: d["lines"][0].update({"to": 9}), "unknown bus"),
    (lambda d: d["lines"][0].update({"r": [[1, 2, 3], [0, 1, 0], [0, 0, 1]]}), "symmetric"),
    (lambda d: d["buses"][1].update({"phases": "ab"}), "missing"),
    (lambda d: d["lines"][0].update({"length": -1}), "length"),
])
def test_invalid_feeders_rejected(mutate, match):
    doc = two_bus_doc()
    mutate(doc)
    with pytest.raises(FeederError, match=match):
        network_from_dict(doc)


def test_reversed_line_rejected():
    doc = two_bus_doc()
    doc["lines"][0]["from"], doc["lines"][0]["to"] = 2, 1
    with pytest.raises(FeederError, match="oriented"):
        network_from_dict(doc)


def test_absent_phase_impedance_rejected():
    doc = two_bus_doc()
    doc["lines"][0]["phases"] = "ab"
    with pytest.raises(FeederError, match="absent phase"):
        network_from_dict(copy.deepcopy(doc))
