"""PAC residual history on the 5-bus unbalanced feeder, against the oracle.

    python demos/02_pac_convergence.py [--iters 40000]
"""

import argparse
from pathlib import Path

import numpy as np

from reactive_market.devices import DeviceSet, nominal_input, read_generators, read_loads
from reactive_market.network import load_network
from reactive_market.opf import OPFOptions, assemble_qp
from reactive_market.oracle import solve_centralized
from reactive_market.pac import PacConfig, solve_pac

DATA = Path(__file__).resolve().parents[1] / "src" / "reactive_market" / "data"

ap = argparse.ArgumentParser()
ap.add_argument("--iters", type=int, default=40000)
args = ap.parse_args()

net = load_network(DATA / "bus5.json")
dev = DeviceSet(tuple(read_generators(DATA / "bus5_generators.csv")),
                tuple(read_loads(DATA / "bus5_loads.csv")))
qp = assemble_qp(net, dev, nominal_input(dev, pv=0.8), options=OPFOptions(min_current_width=0.1))
ref = solve_centralized(qp)
sol = solve_pac(qp, PacConfig(max_iters=args.iters, trace_every=1000))

print(f"{'iter':>7} {'eq':>10} {'coord':>10} {'ineq':>10} {'objective':>12}")
for h in sol.history:
    print(f"{h['iteration']:>7} {h['feas_eq']:10.2e} {h['coord']:10.2e} {h['feas_ineq']:10.2e} "
          f"{h['objective']:12.8f}")
rows = np.concatenate([qp.index.rows_of("pdef"), qp.index.rows_of("qdef")])
print(f"\n{sol.status} after {sol.iterations} iterations")
print(f"objective PAC {sol.objective:.8f} vs oracle {ref.objective:.8f}")
print(f"largest P/Q price difference {np.max(np.abs(sol.mu[rows] - ref.mu[rows])):.2e} (per unit)")
