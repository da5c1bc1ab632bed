"""Seven days on the 123-bus feeder: daily d-LMPs are far steadier than 5-minute duals.

Takes several minutes (2016 periods).

    python demos/05_week_volatility.py
"""

import numpy as np

from reactive_market.metrics import coeff_variation
from reactive_market.scenarios import WEEK_SHAPE, ScenarioConfig, run_point

pt = run_point(ScenarioConfig(penetration=1.2, pf_min=0.9, days=7, shape=WEEK_SHAPE, seed=0))
buses = sorted({pt.net.bus_index(g.bus) for g in pt.devices.generators})
print("day  network-mean d-LMP  mean c_v of that day's 5-minute duals")
for d in pt.daily:
    print(f"{d['day']:>3}  {d['mean_mu_q_bar']:18.5f}  {d['cv_period_duals']:10.3f}")
week = [coeff_variation([dl.mu_q[k] for dl in pt.dlmps]) for k in buses]
print(f"\nmean c_v across the week of the daily d-LMPs: {np.mean(week):.3f}")
print(f"mean c_v of the per-period duals:               {pt.metrics['cv_period_duals']:.3f}")
