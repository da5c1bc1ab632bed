"""One market period on the 2-bus feeder, solved centrally and with PAC.

Shows where the nodal prices come from: the multipliers of the P and Q
definition rows, scaled by the wholesale price.

    python demos/01_two_bus_prices.py
"""

from pathlib import Path

import numpy as np

from reactive_market.devices import DeviceSet, nominal_input, read_generators, read_loads
from reactive_market.market import SolverConfig, clear_period
from reactive_market.network import load_network
from reactive_market.opf import assemble_qp, recover_pq
from reactive_market.oracle import solve_centralized

DATA = Path(__file__).resolve().parents[1] / "src" / "reactive_market" / "data"

net = load_network(DATA / "bus2.json")
dev = DeviceSet(tuple(read_generators(DATA / "bus2_generators.csv")),
                tuple(read_loads(DATA / "bus2_loads.csv")))
inp = nominal_input(dev, lmp=0.05, pv=0.9)

qp = assemble_qp(net, dev, inp)
print(f"QP: {qp.n} variables, {qp.b.size} equalities, {qp.d.size} inequalities")
sol = solve_centralized(qp)
rec = recover_pq(qp, sol.x)
print(f"objective {sol.objective:.6f}, largest bilinear gap {rec.max_relative_gap:.2e} of |S|")

for method in ("centralized", "pac"):
    r = clear_period(net, dev, inp, SolverConfig(method=method))
    print(f"\n{method}: {r.iterations} iterations, status {r.status}")
    print("  bus  phase  mu_P $/kWh  mu_Q $/kVARh")
    for k in range(net.n_bus):
        for p, ph in enumerate("abc"):
            print(f"  {net.buses[k].id:>3}  {ph:>5}  {r.mu_p[k, p]:10.5f}  {r.mu_q[k, p]:12.6f}")
    print(f"  PV dispatch P {np.round(r.pg_kw[0], 2)} kW, Q {np.round(r.qg_kvar[0], 2)} kVAR")
