"""Minimum-PF sweep on the 123-bus feeder at 120% DG penetration.

Each point clears 288 periods; expect about a minute per point on one core.

    python demos/04_pf_sweep.py [--levels 1.0 0.9 0.6] [--workers 2]
"""

import argparse

from reactive_market.scenarios import PF_SWEEP, ScenarioConfig, run_pf_sweep

ap = argparse.ArgumentParser()
ap.add_argument("--levels", type=float, nargs="+", default=list(PF_SWEEP))
ap.add_argument("--penetration", type=float, default=1.2)
ap.add_argument("--workers", type=int, default=1)
args = ap.parse_args()

rep = run_pf_sweep(ScenarioConfig(penetration=args.penetration, seed=0), args.levels, args.workers)
cols = ("pf_min", "dg_q_utilization", "network_losses", "mean_voltage_dg", "mean_voltage_all",
        "q_revenue_ratio", "mean_mu_q_bar")
print("  ".join(f"{c:>16}" for c in cols))
for row in rep.rows:
    print("  ".join(f"{row[c]:16.5f}" for c in cols))
