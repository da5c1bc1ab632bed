"""A full day of 5-minute clearing on the 2-bus feeder, then d-LMPs and payments.

    python demos/03_day_settlement.py
"""

import numpy as np

from reactive_market.market import settle
from reactive_market.scenarios import ProfileShape, ScenarioConfig, run_point

pt = run_point(ScenarioConfig(feeder="bus2", generators="bus2", pf_min=0.9,
                              shape=ProfileShape(load_mean=0.8), seed=1))
res, dl = pt.results, pt.dlmps[0]
k = pt.net.bus_index(pt.devices.generators[0].bus)

hourly = [np.nanmean([r.mu_q[k].mean() for r in res[h * 12:(h + 1) * 12]]) for h in range(24)]
print("hourly mean reactive price at the PV bus ($/kVARh):")
print("  " + " ".join(f"{v:.4f}" for v in hourly))
print(f"daily d-LMP at the PV bus: {dl.mu_q[k]:.5f} $/kVARh (zero volume: {dl.zero_volume[k]})")

st = settle(res, pt.dlmps, pt.devices, pt.net)
print(f"PV revenue: real ${st.real_revenue[0]:.2f}, reactive ${st.reactive_revenue[0]:.4f} "
      f"(per-period pricing would pay ${st.reactive_revenue_periods[0]:.4f})")
print(f"Q-revenue ratio {st.q_revenue_ratio:.4f}")
for key in ("dg_energy_penetration", "dg_q_utilization", "network_losses", "mean_voltage_all"):
    print(f"{key:>22}: {pt.metrics[key]:.4f}")
