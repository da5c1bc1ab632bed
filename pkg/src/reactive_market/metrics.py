"""Scenario, economic and grid metrics computed from cleared periods."""

from __future__ import annotations

import numpy as np

from .devices import DeviceSet, pf_slope
from .network import NetworkModel


def dg_penetration(devices: DeviceSet, average_load_kw: float) -> float:
    """Total nameplate over total average load."""
    if average_load_kw <= 0:
        raise ValueError("average load must be positive")
    return devices.nameplate_kw / average_load_kw


def _dg_sums(results, devices):
    P = sum(float(r.pg_kw.sum()) for r in results)
    Q = sum(float(r.qg_kvar.sum()) for r in results)
    return P, Q


def dg_energy_penetration(results, devices: DeviceSet) -> float:
    """Summed DG apparent power over summed load apparent power."""
    num = den = 0.0
    for r in results:
        num += float(np.hypot(r.pg_kw.sum(axis=1), r.qg_kvar.sum(axis=1)).sum())
        den += float(np.hypot(r.load_p_kw.sum(axis=1), r.load_q_kvar.sum(axis=1)).sum())
    return num / den if den > 0 else 0.0


def dg_q_utilization(results) -> float:
    num = sum(float(r.qg_kvar.sum()) for r in results)
    den = sum(float(r.load_q_kvar.sum()) for r in results)
    return num / den if den != 0 else 0.0


def dg_p_utilization(results) -> float:
    num = sum(float(r.pg_kw.sum()) for r in results)
    den = sum(float(r.load_p_kw.sum()) for r in results)
    return num / den if den != 0 else 0.0


def period_p_utilization(r) -> float:
    den = float(r.load_p_kw.sum())
    return float(r.pg_kw.sum()) / den if den else 0.0


def network_losses(results) -> float:
    """Sum over periods of the ohmic line losses, p.u."""
    return float(sum(r.losses_pu for r in results))


def mean_voltage(results, buses=None, net: NetworkModel | None = None) -> float:
    """Voltage magnitude averaged over the chosen buses' phases and over time.

    ``buses`` are bus indices; ``None`` averages over every present phase.
    """
    vals = []
    for r in results:
        mag = np.abs(r.v)
        if net is not None:
            present = net.bus_phases
        else:
            present = mag > 0
        if buses is not None:
            sel = np.zeros_like(present)
            sel[list(buses)] = True
            present = present & sel
        vals.append(mag[present])
    if not vals or sum(v.size for v in vals) == 0:
        return float("nan")
    return float(np.concatenate(vals).mean())


def generator_buses(devices: DeviceSet, net: NetworkModel) -> list[int]:
    return sorted({net.bus_index(g.bus) for g in devices.generators})


def coeff_variation(series) -> float:
    """Population standard deviation over the mean; NaN entries are dropped."""
    x = np.asarray(series, float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan")
    m = x.mean()
    if m == 0:
        return 0.0 if np.all(x == 0) else float("inf")
    return float(x.std() / abs(m))


def power_factor(p, q) -> float:
    """PF of one DG from per-phase P and Q (summed over phases first)."""
    P, Q = float(np.sum(p)), float(np.sum(q))
    if P == 0:
        return 1.0 if Q == 0 else 0.0
    return float(np.cos(np.arctan(Q / P)))


def dg_power_factors(r, devices: DeviceSet) -> np.ndarray:
    return np.array([power_factor(r.pg_kw[g], r.qg_kvar[g]) for g in range(len(devices.generators))])


# --- physics checks -------------------------------------------------------------

def pf_cone_violation(results, devices: DeviceSet, net: NetworkModel) -> float:
    """Largest |Q| - slope * P over DG phases and periods, p.u."""
    worst = -np.inf
    for r in results:
        for g, gen in enumerate(devices.generators):
            on = np.array(gen.phases)
            t = pf_slope(gen.pf_min)
            v = np.abs(r.qg_kvar[g, on]) - t * r.pg_kw[g, on]
            worst = max(worst, float(net.kw_to_pu(v).max(initial=-np.inf)))
    return worst


def power_balance(r, net: NetworkModel) -> dict:
    """Per-period P and Q balance residuals, p.u.

    ``p_model``/``q_model`` close the balance with the power the relaxed
    network absorbs (sum of nodal injections). ``p_ohmic`` closes it with
    the ohmic line losses of the cleared flows; its residual is bounded by
    the McCormick relaxation gap rather than by solver tolerance.
    """
    kw = net.kw_to_pu
    injected_p = kw(r.slack_p_kw.sum() + r.pg_kw.sum() - r.load_p_kw.sum())
    injected_q = kw(r.slack_q_kvar.sum() + r.qg_kvar.sum() + r.cap_q_kvar.sum() - r.load_q_kvar.sum())
    absorbed_p = kw(np.nansum(r.p_kw))
    absorbed_q = kw(np.nansum(r.q_kvar))
    q_line = 0.0
    for e, ln in enumerate(net.lines):
        f = r.flows[e]
        X = ln.impedance.imag
        q_line += float(f.real @ X @ f.real + f.imag @ X @ f.imag)
    return {
        "p_model": float(injected_p - absorbed_p),
        "q_model": float(injected_q - absorbed_q),
        "p_ohmic": float(injected_p - r.losses_pu),
        "q_ohmic": float(injected_q - q_line),
    }
