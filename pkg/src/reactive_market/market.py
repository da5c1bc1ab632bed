"""Per-period clearing, daily d-LMP aggregation and settlement.

Prices are extracted from the duals of the power-definition rows. The QP
objective is divided by the wholesale price, so a dual in p.u. becomes a
price in $/kWh after multiplying by ``lmp``. With the rows written as
``w - P = 0`` the dual is the marginal cost of withdrawing power at the
bus-phase, which makes it positive in the usual case.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .devices import DeviceSet, PeriodInput
from .network import PHASES, NetworkModel
from .opf import OPFOptions, StandardFormQP, assemble_qp, grid, line_losses
from .oracle import SolverFailure, solve_centralized
from .pac import PacConfig, solve_pac

log = logging.getLogger(__name__)

SLOTS_PER_DAY = 288
SLOT_HOURS = 24.0 / SLOTS_PER_DAY


@dataclass
class SolverConfig:
    method: str = "centralized"  # or "pac"
    pac: PacConfig = field(default_factory=PacConfig)
    opf: OPFOptions = field(default_factory=OPFOptions)
    oracle_tol: float = 1e-10
    fallback: bool = True  # re-solve with the oracle when PAC does not converge
    trace_dir: str | None = None

    def __post_init__(self):
        if self.method not in ("centralized", "pac"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass
class ClearingResult:
    """One cleared period. Bus arrays are (n_bus, 3) in kW / kVAR / $/kWh / p.u."""

    day: int
    slot: int
    lmp: float
    p_kw: np.ndarray  # net nodal injection
    q_kvar: np.ndarray
    v: np.ndarray  # complex voltage
    i: np.ndarray  # complex nodal injection current
    mu_p: np.ndarray  # NaN where the bus-phase carries no price
    mu_q: np.ndarray
    pg_kw: np.ndarray  # (n_gen, 3)
    qg_kvar: np.ndarray
    load_p_kw: np.ndarray  # (n_load, 3)
    load_q_kvar: np.ndarray
    slack_p_kw: np.ndarray  # (3,)
    slack_q_kvar: np.ndarray
    cap_q_kvar: np.ndarray  # (n_cap, 3)
    flows: np.ndarray  # (n_line, 3) complex, p.u.
    losses_pu: float
    objective: float
    solver: str
    iterations: int
    residuals: dict
    status: str = ""
    fallback: bool = False
    relaxation_gap: float = 0.0  # max |S_model - V I*| / |S| over bus-phases


def _extract(net: NetworkModel, devices: DeviceSet, inp: PeriodInput, qp: StandardFormQP,
             sol, meta: dict) -> ClearingResult:
    x = sol.x
    ix = qp.index
    nb, ng = net.n_bus, len(devices.generators)
    to_kw = net.pu_to_kw
    g = {s: grid(qp, x, s, nb) for s in ("P", "Q", "VR", "VI", "IR", "II")}
    mu_p = np.full((nb, 3), np.nan)
    mu_q = np.full((nb, 3), np.nan)
    for kind, out in (("pdef", mu_p), ("qdef", mu_q)):
        rows = ix.rows_of(kind)
        out[ix.eq_bus[rows], ix.eq_phase[rows]] = sol.mu[rows] * qp.lmp
    flows = grid(qp, x, "FR", net.n_line) + 1j * grid(qp, x, "FI", net.n_line)
    s_idx = net.slack_index
    v = g["VR"] + 1j * g["VI"]
    cur = g["IR"] + 1j * g["II"]
    s_phys = v * np.conj(cur)
    smag = np.hypot(g["P"], g["Q"])
    gap = np.maximum(np.abs(g["P"] - s_phys.real), np.abs(g["Q"] - s_phys.imag))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(smag > 1e-6, gap / smag, 0.0)
    return ClearingResult(
        day=inp.day, slot=inp.slot, lmp=inp.lmp,
        p_kw=to_kw(g["P"]), q_kvar=to_kw(g["Q"]), v=v, i=cur, mu_p=mu_p, mu_q=mu_q,
        pg_kw=to_kw(grid(qp, x, "PG", ng)), qg_kvar=to_kw(grid(qp, x, "QG", ng)),
        load_p_kw=to_kw(grid(qp, x, "PL", len(devices.loads))),
        load_q_kvar=to_kw(grid(qp, x, "QL", len(devices.loads))),
        slack_p_kw=to_kw(grid(qp, x, "PS", nb)[s_idx]),
        slack_q_kvar=to_kw(grid(qp, x, "QS", nb)[s_idx]),
        cap_q_kvar=to_kw(grid(qp, x, "QC", len(net.capacitor_banks))),
        flows=flows, losses_pu=float(line_losses(net, flows).sum()),
        objective=sol.objective, relaxation_gap=float(rel.max(initial=0.0)), **meta,
    )


def clear_period(net: NetworkModel, devices: DeviceSet, inp: PeriodInput,
                 config: SolverConfig | None = None, qp: StandardFormQP | None = None
                 ) -> ClearingResult:
    """Build and solve one period's OPF and return dispatch and prices.

    A PAC run that stops at the iteration cap is flagged and re-solved with
    the centralised solver; both outcomes are kept in ``status``.
    """
    cfg = config or SolverConfig()
    if qp is None:
        qp = assemble_qp(net, devices, inp, options=cfg.opf)
    if cfg.method == "pac":
        trace = None
        if cfg.trace_dir is not None:
            Path(cfg.trace_dir).mkdir(parents=True, exist_ok=True)
            trace = Path(cfg.trace_dir) / f"trace_d{inp.day:02d}_t{inp.slot:03d}.csv"
        sol = solve_pac(qp, cfg.pac, trace_path=trace)
        meta = dict(solver="pac", iterations=sol.iterations, status=sol.status,
                    residuals=qp.residuals(sol.x))
        if not sol.converged:
            log.warning("day %d slot %d: PAC stopped early (%s)", inp.day, inp.slot, sol.status)
            if cfg.fallback:
                ref = solve_centralized(qp, tol=cfg.oracle_tol)
                meta.update(solver="centralized", iterations=ref.iterations, fallback=True,
                            status=f"pac {sol.status}; fallback {ref.status}",
                            residuals=ref.kkt)
                sol = ref
    else:
        sol = solve_centralized(qp, tol=cfg.oracle_tol)
        meta = dict(solver="centralized", iterations=sol.iterations, status=sol.status,
                    residuals=sol.kkt)
    return _extract(net, devices, inp, qp, sol, meta)


def clear_day(net, devices, inputs, config: SolverConfig | None = None,
              workers: int = 1) -> list[ClearingResult]:
    """Clear every period of a day; periods are independent given their inputs."""
    inputs = list(inputs)
    if workers <= 1:
        return [clear_period(net, devices, inp, config) for inp in inputs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda inp: clear_period(net, devices, inp, config), inputs))


# --- daily prices ---------------------------------------------------------------

@dataclass
class DailyDLMP:
    day: int
    mu_q: np.ndarray  # (n_bus,) $/kVARh
    mu_p: np.ndarray  # (n_bus,) $/kWh
    volume_q: np.ndarray  # (n_bus,) sum of the weights, kVAR-slots
    volume_p: np.ndarray
    zero_volume: np.ndarray  # (n_bus,) bool, fallback mean used for mu_q
    mixed_sign: np.ndarray  # (n_bus,) bool, weights of both signs within the day
    dg_weighted: np.ndarray  # (n_bus,) bool, weights are DG dispatch rather than net injection


def weighted_price(mu, w):
    """Volume-weighted average price and flags for one node.

    ``mu`` and ``w`` have matching shapes (periods x phases); NaN prices are
    ignored together with their weights. Returns (price, volume, zero, mixed).
    """
    mu = np.asarray(mu, float)
    w = np.asarray(w, float)
    ok = np.isfinite(mu)
    if not ok.any():
        return np.nan, 0.0, True, False
    mu, w = mu[ok], w[ok]
    vol = float(w.sum())
    mixed = bool((w > 0).any() and (w < 0).any())
    if vol == 0.0:
        return float(mu.mean()), 0.0, True, mixed
    return float((mu * w).sum() / vol), vol, False, mixed


def node_weights(results, devices: DeviceSet, net: NetworkModel):
    """Per-period (T, n_bus, 3) Q and P weights: DG dispatch at DG buses, net injection elsewhere."""
    wq = np.stack([r.q_kvar for r in results])
    wp = np.stack([r.p_kw for r in results])
    has_dg = np.zeros(net.n_bus, dtype=bool)
    if devices.generators:
        dg_q = np.zeros_like(wq)
        dg_p = np.zeros_like(wp)
        for gi, gen in enumerate(devices.generators):
            k = net.bus_index(gen.bus)
            has_dg[k] = True
            dg_q[:, k] += np.stack([r.qg_kvar[gi] for r in results])
            dg_p[:, k] += np.stack([r.pg_kw[gi] for r in results])
        wq[:, has_dg] = dg_q[:, has_dg]
        wp[:, has_dg] = dg_p[:, has_dg]
    return wq, wp, has_dg


def compute_dlmp(results, devices: DeviceSet, net: NetworkModel,
                 require_full_day: bool = True) -> DailyDLMP:
    results = list(results)
    if not results:
        raise ValueError("no clearing results")
    if require_full_day and len(results) != SLOTS_PER_DAY:
        raise ValueError(f"a day needs {SLOTS_PER_DAY} periods, got {len(results)}")
    days = {r.day for r in results}
    if len(days) != 1:
        raise ValueError(f"results span several days: {sorted(days)}")
    wq, wp, has_dg = node_weights(results, devices, net)
    mq = np.stack([r.mu_q for r in results])
    mp = np.stack([r.mu_p for r in results])
    nb = net.n_bus
    out = {k: np.zeros(nb) for k in ("mu_q", "mu_p", "vq", "vp")}
    zero = np.zeros(nb, dtype=bool)
    mixed = np.zeros(nb, dtype=bool)
    for k in range(nb):
        out["mu_q"][k], out["vq"][k], zero[k], mixed[k] = weighted_price(mq[:, k], wq[:, k])
        out["mu_p"][k], out["vp"][k], _, _ = weighted_price(mp[:, k], wp[:, k])
    if mixed.any():
        log.info("day %d: %d nodes have mixed-sign reactive volume", results[0].day, mixed.sum())
    return DailyDLMP(results[0].day, out["mu_q"], out["mu_p"], out["vq"], out["vp"],
                     zero, mixed, has_dg)


# --- settlement -----------------------------------------------------------------

@dataclass
class Settlement:
    names: list
    real_revenue: np.ndarray  # $, per DG
    reactive_revenue: np.ndarray  # $, per DG, priced at the daily d-LMP
    reactive_revenue_periods: np.ndarray  # $, per DG, priced at the per-period duals
    q_revenue_ratio: float
    excluded: list  # DGs left out of the ratio because their total revenue is zero


def dg_revenues(results, dlmp: DailyDLMP, devices: DeviceSet, net: NetworkModel):
    """Real, reactive (d-LMP) and reactive (per-period) revenue of each DG for one day."""
    n = len(devices.generators)
    real, react, react_t = np.zeros(n), np.zeros(n), np.zeros(n)
    for gi, gen in enumerate(devices.generators):
        k = net.bus_index(gen.bus)
        P = np.stack([r.pg_kw[gi] for r in results])
        Q = np.stack([r.qg_kvar[gi] for r in results])
        mp = np.stack([r.mu_p[k] for r in results])
        mq = np.stack([r.mu_q[k] for r in results])
        on = np.array(gen.phases)
        real[gi] = SLOT_HOURS * float(np.nansum(mp[:, on] * P[:, on]))
        react_t[gi] = SLOT_HOURS * float(np.nansum(mq[:, on] * Q[:, on]))
        react[gi] = SLOT_HOURS * dlmp.mu_q[k] * float(Q[:, on].sum()) if np.isfinite(dlmp.mu_q[k]) else 0.0
    return real, react, react_t


def q_revenue_ratio(real, reactive):
    """Mean over DGs of reactive / (reactive + real); zero-revenue DGs are dropped."""
    real = np.asarray(real, float)
    reactive = np.asarray(reactive, float)
    tot = real + reactive
    keep = tot != 0
    if not keep.any():
        return float("nan"), np.flatnonzero(~keep).tolist()
    return float(np.mean(reactive[keep] / tot[keep])), np.flatnonzero(~keep).tolist()


def settle(results, dlmps, devices: DeviceSet, net: NetworkModel) -> Settlement:
    """Settle one or more days. ``dlmps`` is one DailyDLMP per day in ``results``."""
    dlmps = [dlmps] if isinstance(dlmps, DailyDLMP) else list(dlmps)
    by_day: dict = {}
    for r in results:
        by_day.setdefault(r.day, []).append(r)
    n = len(devices.generators)
    real, react, react_t = np.zeros(n), np.zeros(n), np.zeros(n)
    for dl in dlmps:
        if dl.day not in by_day:
            raise ValueError(f"no results for day {dl.day}")
        a, b, c = dg_revenues(by_day[dl.day], dl, devices, net)
        real += a
        react += b
        react_t += c
    for name, v in zip([g.name for g in devices.generators], real + react):
        if not np.isfinite(v):
            raise ValueError(f"non-finite revenue for {name}")
    ratio, excl = q_revenue_ratio(real, react)
    if excl:
        log.warning("%d DGs with zero revenue left out of the Q-revenue ratio", len(excl))
    return Settlement([g.name for g in devices.generators], real, react, react_t, ratio,
                      [devices.generators[i].name for i in excl])


# --- CSV export -----------------------------------------------------------------

def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_clearing_csv(path, results, net: NetworkModel) -> None:
    """One row per bus-phase-period."""
    mask = net.bus_phases
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "slot", "bus", "phase", "p_kw", "q_kvar", "v_re", "v_im", "v_mag",
                    "mu_p", "mu_q", "solver", "iterations", "fallback"])
        for r in results:
            for k, b in enumerate(net.buses):
                for p in np.flatnonzero(mask[k]):
                    v = r.v[k, p]
                    w.writerow([r.day, r.slot, b.id, PHASES[p], _fmt(r.p_kw[k, p]),
                                _fmt(r.q_kvar[k, p]), _fmt(v.real), _fmt(v.imag), _fmt(abs(v)),
                                _fmt(r.mu_p[k, p]), _fmt(r.mu_q[k, p]), r.solver, r.iterations,
                                int(r.fallback)])


def write_dlmp_csv(path, dlmps, net: NetworkModel) -> None:
    """One row per node-day."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "bus", "mu_q_bar", "mu_p_bar", "volume_q", "volume_p", "weights",
                    "zero_volume", "mixed_sign"])
        for dl in dlmps:
            for k, b in enumerate(net.buses):
                w.writerow([dl.day, b.id, _fmt(dl.mu_q[k]), _fmt(dl.mu_p[k]), _fmt(dl.volume_q[k]),
                            _fmt(dl.volume_p[k]), "dg" if dl.dg_weighted[k] else "net",
                            int(dl.zero_volume[k]), int(dl.mixed_sign[k])])


def write_settlement_csv(path, st: Settlement) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dg", "real_revenue", "reactive_revenue", "reactive_revenue_periods"])
        for row in zip(st.names, st.real_revenue, st.reactive_revenue, st.reactive_revenue_periods):
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
