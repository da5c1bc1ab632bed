"""Profiles, PV placement and the three experiment drivers.

A scenario point is one feeder with one PV placement, cleared for a number
of days. Sweeps vary the penetration or the minimum PF over otherwise
identical points. Everything random flows from ``ScenarioConfig.seed``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as mt
from .devices import DeviceSet, Generator, PeriodInput, read_generators, read_loads, read_profile
from .market import (SLOTS_PER_DAY, ClearingResult, DailyDLMP, SolverConfig, clear_day,
                     compute_dlmp, settle)
from .network import NetworkModel, load_network

log = logging.getLogger(__name__)

DATA = Path(__file__).parent / "data"
CLUSTER_KW = (25.0, 80.0)
PF_SWEEP = (1.0, 0.95, 0.9, 0.8, 0.7, 0.6)
PENETRATION_SWEEP = (0.05, 0.4, 0.8, 1.2, 1.6)
MAX_CANDIDATES = 27


# --- profiles -------------------------------------------------------------------

@dataclass
class ProfileSet:
    pv: np.ndarray  # (days * 288,) in [0, 1]
    load: np.ndarray  # (days * 288,) load shape, multiplies nominal demand
    lmp: np.ndarray  # (days * 288,) $/kWh
    multipliers: np.ndarray  # (n_load,) the (1 + delta) factors
    seed: int

    @property
    def days(self) -> int:
        return self.pv.size // SLOTS_PER_DAY

    def __post_init__(self):
        if not (self.pv.size == self.load.size == self.lmp.size):
            raise ValueError("profile lengths differ")
        if self.pv.size % SLOTS_PER_DAY:
            raise ValueError(f"profiles must hold whole days of {SLOTS_PER_DAY} slots")
        if np.any(self.pv < 0) or np.any(self.pv > 1):
            raise ValueError("PV profile must lie in [0, 1]")
        if np.any(self.load < 0) or np.any(self.lmp <= 0):
            raise ValueError("load shape must be >= 0 and prices > 0")
        if np.any(self.multipliers <= 0.5) or np.any(self.multipliers >= 1.5):
            raise ValueError("load multipliers must lie in (0.5, 1.5)")


@dataclass
class ProfileShape:
    pv_peak: float = 0.8
    sunrise_h: float = 5.25
    sunset_h: float = 20.25
    load_mean: float = 0.3725  # daily mean of the load shape
    morning_peak_h: float = 8.0
    evening_peak_h: float = 19.0
    lmp_low: float = 0.02
    lmp_high: float = 0.08
    lmp_noise: float = 0.003
    load_noise: float = 0.0  # relative per-slot noise, used for multi-day runs
    day_to_day: tuple = (1.0,)  # cyclic daily load scaling
    cloud_range: tuple = (1.0, 1.0)  # per-day PV scaling drawn uniformly


def slot_hours():
    return (np.arange(SLOTS_PER_DAY) + 0.5) * 24.0 / SLOTS_PER_DAY


def pv_shape(shape: ProfileShape) -> np.ndarray:
    """Clamped sine over daylight hours."""
    h = slot_hours()
    span = shape.sunset_h - shape.sunrise_h
    s = np.sin(np.pi * (h - shape.sunrise_h) / span)
    return np.clip(shape.pv_peak * np.where((h > shape.sunrise_h) & (h < shape.sunset_h), s, 0.0), 0, 1)


def load_shape(shape: ProfileShape) -> np.ndarray:
    """Residential curve with a morning and a larger evening peak."""
    h = slot_hours()
    base = (0.55 + 0.25 * np.exp(-0.5 * ((h - shape.morning_peak_h) / 1.5) ** 2)
            + 0.55 * np.exp(-0.5 * ((h - shape.evening_peak_h) / 2.2) ** 2)
            - 0.15 * np.exp(-0.5 * ((h - 3.5) / 2.0) ** 2))
    return base * (shape.load_mean / base.mean())


def load_multipliers(n_load: int, rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    """(1 + delta) with delta ~ N(0, std), kept strictly inside (0.5, 1.5)."""
    d = rng.normal(0.0, std, n_load)
    return np.clip(1.0 + d, 0.5 + 1e-9, 1.5 - 1e-9)


def synthetic_profiles(days: int, n_load: int, seed: int,
                       shape: ProfileShape | None = None) -> ProfileSet:
    shape = shape or ProfileShape()
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng(seed)
    mult = load_multipliers(n_load, rng)
    pv_day, ld_day = pv_shape(shape), load_shape(shape)
    pv, ld, lmp = [], [], []
    for d in range(days):
        cloud = rng.uniform(*shape.cloud_range)
        scale = shape.day_to_day[d % len(shape.day_to_day)]
        day_load = ld_day * scale
        if shape.load_noise:
            day_load = day_load * (1.0 + rng.normal(0.0, shape.load_noise, SLOTS_PER_DAY))
        day_load = np.maximum(day_load, 0.0)
        u = (day_load - ld_day.min()) / max(ld_day.max() - ld_day.min(), 1e-12)
        price = shape.lmp_low + (shape.lmp_high - shape.lmp_low) * np.clip(u, 0, None)
        price = price + rng.normal(0.0, shape.lmp_noise, SLOTS_PER_DAY)
        pv.append(np.clip(pv_day * cloud, 0, 1))
        ld.append(day_load)
        lmp.append(np.maximum(price, 0.005))
    return ProfileSet(np.concatenate(pv), np.concatenate(ld), np.concatenate(lmp), mult, seed)


def profiles_from_csv(pv_path, load_path, lmp_path, n_load: int, seed: int) -> ProfileSet:
    rng = np.random.default_rng(seed)
    return ProfileSet(read_profile(pv_path), read_profile(load_path), read_profile(lmp_path),
                      load_multipliers(n_load, rng), seed)


# --- PV placement ---------------------------------------------------------------

def candidate_buses(net: NetworkModel, devices: DeviceSet, limit: int = MAX_CANDIDATES) -> list[int]:
    """Load buses able to host a cluster, deepest in the feeder first.

    Three-phase buses are preferred. Ties break on bus id.
    """
    depth = np.zeros(net.n_bus, dtype=int)
    ends = net.line_ends
    for k in net.bfs_order():
        for e in net.children()[k]:
            depth[ends[e, 1]] = depth[k] + 1
    slack = net.buses[net.slack_index].id
    ids = sorted({ld.bus for ld in devices.loads if ld.bus != slack})
    ids.sort(key=lambda b: (-int(net.buses[net.bus_index(b)].phase_mask.sum()),
                            -depth[net.bus_index(b)], b))
    return ids[:limit]


def average_load_kw(devices: DeviceSet, profiles: ProfileSet) -> float:
    """Sum over loads of nominal P x multiplier x mean load shape."""
    nominal = np.array([ld.p_kw.sum() for ld in devices.loads])
    return float((nominal * profiles.multipliers).sum() * profiles.load.mean())


def cluster_sizes(target_kw: float, lo: float = CLUSTER_KW[0], hi: float = CLUSTER_KW[1]) -> list[float]:
    """Fewest equal clusters within [lo, hi] that sum to ``target_kw``."""
    if target_kw <= 0:
        return []
    if target_kw < lo:
        return [lo]
    k = math.ceil(target_kw / hi - 1e-12)
    return [target_kw / k] * k


def place_pv(net: NetworkModel, devices: DeviceSet, penetration: float, avg_load_kw: float,
             pf_min: float, seed: int, candidates=None, b_p: float = 0.01) -> list[Generator]:
    """Add clusters at candidate buses, in a seeded order, until the target is met."""
    cand = list(candidates) if candidates is not None else candidate_buses(net, devices)
    sizes = cluster_sizes(penetration * avg_load_kw)
    if len(sizes) > len(cand):
        raise ValueError(f"penetration {penetration:.2f} needs {len(sizes)} clusters, "
                         f"only {len(cand)} candidate buses")
    order = np.random.default_rng(seed + 7919).permutation(len(cand))
    gens = []
    for n, (size, j) in enumerate(zip(sizes, order)):
        b = cand[j]
        mask = net.buses[net.bus_index(b)].phase_mask
        gens.append(Generator(name=f"pv{b}", bus=b, phases=tuple(bool(v) for v in mask),
                              p_max_kw=size, pf_min=pf_min, b_p=b_p))
    return gens


# --- scenario runs --------------------------------------------------------------

@dataclass
class ScenarioConfig:
    feeder: str = "ieee123"  # shipped name or path to a feeder JSON
    loads: str | None = None
    generators: str | None = None  # fixed DG file; otherwise clusters are placed
    candidates: list | None = None
    penetration: float = 1.2
    pf_min: float = 0.9
    days: int = 1
    zeta: float = 0.1
    seed: int = 0
    dg_bid: float = 0.01  # $/kWh linear real-power bid of each cluster
    shape: ProfileShape = field(default_factory=ProfileShape)
    profile_csv: dict | None = None  # {"pv": path, "load": path, "lmp": path}
    solver: SolverConfig = field(default_factory=SolverConfig)
    workers: int = 1  # threads for periods within a point
    voltage_slot: int = 156  # 13:00, used for the snapshot voltage columns

    def __post_init__(self):
        if not 0 < self.pf_min <= 1:
            raise ValueError("pf_min must lie in (0, 1]")
        if self.penetration < 0:
            raise ValueError("penetration must be >= 0")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if not 0 <= self.voltage_slot < SLOTS_PER_DAY:
            raise ValueError("voltage_slot out of range")


def feeder_paths(cfg: ScenarioConfig):
    f = Path(cfg.feeder)
    if f.suffix != ".json":
        f = DATA / f"{cfg.feeder}.json"
    loads = Path(cfg.loads) if cfg.loads else f.with_name(f.stem + "_loads.csv")
    return f, loads


def generator_path(cfg: ScenarioConfig):
    """Path of a fixed DG file; a bare name selects the shipped ``<name>_generators.csv``."""
    if not cfg.generators:
        return None
    g = Path(cfg.generators)
    return g if g.suffix == ".csv" else DATA / f"{cfg.generators}_generators.csv"


def build_point(cfg: ScenarioConfig):
    """Network, devices, profiles and average load for one scenario point."""
    fpath, lpath = feeder_paths(cfg)
    net = load_network(fpath)
    loads = tuple(read_loads(lpath))
    base = DeviceSet((), loads)
    if cfg.profile_csv:
        prof = profiles_from_csv(cfg.profile_csv["pv"], cfg.profile_csv["load"],
                                 cfg.profile_csv["lmp"], len(loads), cfg.seed)
    else:
        prof = synthetic_profiles(cfg.days, len(loads), cfg.seed, cfg.shape)
    avg = average_load_kw(base, prof)
    if cfg.generators:
        gens = [replace(g, pf_min=cfg.pf_min) for g in read_generators(generator_path(cfg))]
    else:
        gens = place_pv(net, base, cfg.penetration, avg, cfg.pf_min, cfg.seed, cfg.candidates,
                        b_p=cfg.dg_bid)
    dev = DeviceSet(tuple(gens), loads)
    dev.validate(net)
    return net, dev, prof, avg


def period_inputs(devices: DeviceSet, prof: ProfileSet, day: int) -> list[PeriodInput]:
    nominal_p = np.array([ld.p_kw for ld in devices.loads], dtype=float).reshape(-1, 3)
    nominal_q = np.array([ld.q_kvar for ld in devices.loads], dtype=float).reshape(-1, 3)
    m = prof.multipliers[:, None]
    cap = np.array([g.p_max_kw for g in devices.generators], dtype=float)
    out = []
    for t in range(SLOTS_PER_DAY):
        i = day * SLOTS_PER_DAY + t
        out.append(PeriodInput(slot=t, day=day, gen_cap_kw=cap * prof.pv[i],
                               load_p_kw=nominal_p * m * prof.load[i],
                               load_q_kvar=nominal_q * m * prof.load[i], lmp=float(prof.lmp[i])))
    return out


@dataclass
class PointResult:
    config: ScenarioConfig
    net: NetworkModel
    devices: DeviceSet
    profiles: ProfileSet
    average_load_kw: float
    results: list  # ClearingResult, all days in order
    dlmps: list  # DailyDLMP per day
    metrics: dict
    daily: list  # per-day metric dicts


def day_metrics(res, dl: DailyDLMP, dev: DeviceSet, net: NetworkModel, cfg: ScenarioConfig) -> dict:
    st = settle(res, dl, dev, net)
    gb = mt.generator_buses(dev, net)
    mu_bar = [dl.mu_q[k] for k in gb]
    cv_period = [mt.coeff_variation(np.nanmean(np.stack([r.mu_q[k] for r in res]), axis=1))
                 for k in gb]
    snap = res[cfg.voltage_slot]
    bal = [mt.power_balance(r, net) for r in res]
    return {
        "day": dl.day,
        "dg_energy_penetration": mt.dg_energy_penetration(res, dev),
        "dg_q_utilization": mt.dg_q_utilization(res),
        "dg_p_utilization": mt.dg_p_utilization(res),
        "peak_dg_p_utilization": max(mt.period_p_utilization(r) for r in res),
        "network_losses": mt.network_losses(res),
        "mean_voltage_dg": mt.mean_voltage(res, gb, net) if gb else float("nan"),
        "mean_voltage_all": mt.mean_voltage(res, None, net),
        "snapshot_voltage_all": mt.mean_voltage([snap], None, net),
        "snapshot_voltage_dg": mt.mean_voltage([snap], gb, net) if gb else float("nan"),
        "mean_mu_q_bar": float(np.nanmean(mu_bar)) if gb else float("nan"),
        "q_revenue_ratio": st.q_revenue_ratio,
        "real_revenue": float(st.real_revenue.sum()),
        "reactive_revenue": float(st.reactive_revenue.sum()),
        "cv_period_duals": float(np.nanmean(cv_period)) if gb else float("nan"),
        "pf_cone_violation": mt.pf_cone_violation(res, dev, net) if dev.generators else 0.0,
        "balance_p_model": max(abs(b["p_model"]) for b in bal),
        "balance_q_model": max(abs(b["q_model"]) for b in bal),
        "balance_p_ohmic": max(abs(b["p_ohmic"]) for b in bal),
        "max_relaxation_gap": max(r.relaxation_gap for r in res),
        "fallbacks": sum(r.fallback for r in res),
    }


def run_point(cfg: ScenarioConfig) -> PointResult:
    net, dev, prof, avg = build_point(cfg)
    solver = replace(cfg.solver, opf=replace(cfg.solver.opf, zeta=cfg.zeta))
    results, dlmps, daily = [], [], []
    for day in range(prof.days):
        res = clear_day(net, dev, period_inputs(dev, prof, day), solver, cfg.workers)
        dl = compute_dlmp(res, dev, net)
        results.extend(res)
        dlmps.append(dl)
        daily.append(day_metrics(res, dl, dev, net, cfg))
    gb = mt.generator_buses(dev, net)
    st = settle(results, dlmps, dev, net)
    week = np.array([[dl.mu_q[k] for dl in dlmps] for k in gb]).reshape(len(gb), len(dlmps))
    summary = {
        "penetration": cfg.penetration,
        "pf_min": cfg.pf_min,
        "achieved_penetration": mt.dg_penetration(dev, avg),
        "n_clusters": len(dev.generators),
        "average_load_kw": avg,
        "q_revenue_ratio": st.q_revenue_ratio,
        "dg_energy_penetration": mt.dg_energy_penetration(results, dev),
        "dg_q_utilization": mt.dg_q_utilization(results),
        "dg_p_utilization": mt.dg_p_utilization(results),
        "network_losses": mt.network_losses(results),
        "mean_voltage_dg": mt.mean_voltage(results, gb, net) if gb else float("nan"),
        "mean_voltage_all": mt.mean_voltage(results, None, net),
        "mean_mu_q_bar": float(np.nanmean([d["mean_mu_q_bar"] for d in daily])) if gb else float("nan"),
        "cv_daily_dlmp": float(np.nanmean([mt.coeff_variation(w) for w in week])) if gb and len(dlmps) > 1
        else float("nan"),
        "cv_period_duals": float(np.nanmean([d["cv_period_duals"] for d in daily])) if gb
        else float("nan"),
        "days": prof.days,
    }
    return PointResult(cfg, net, dev, prof, avg, results, dlmps, summary, daily)


# --- reports --------------------------------------------------------------------

def _drop_workers(obj):
    if isinstance(obj, dict):
        return {k: _drop_workers(v) for k, v in obj.items() if k != "workers"}
    if isinstance(obj, list):
        return [_drop_workers(v) for v in obj]
    return obj


def config_hash(cfg) -> str:
    """Hash of everything that can change results; worker counts are left out."""
    blob = json.dumps(_drop_workers(_plain(cfg)), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass
class MetricsReport:
    kind: str
    rows: list  # one summary dict per scenario point
    daily: list  # per point, list of per-day dicts
    seed: int
    config_hash: str

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v
        doc = {"kind": self.kind, "seed": self.seed, "config_hash": self.config_hash,
               "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
               "daily": [[{k: clean(v) for k, v in d.items()} for d in pt] for pt in self.daily]}
        return json.dumps(_plain(doc), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(repr(float(r[k])) if isinstance(r[k], (float, np.floating))
                                  else str(r[k]) for k in keys))
        return "\n".join(lines) + "\n"


def _run_summary(cfg):
    pt = run_point(cfg)
    return pt.metrics, pt.daily


def run_points(configs, workers: int = 1):
    """Run independent points, keeping input order whatever the pool size."""
    configs = list(configs)
    if workers <= 1 or len(configs) <= 1:
        return [_run_summary(c) for c in configs]
    with ProcessPoolExecutor(min(workers, len(configs))) as pool:
        return list(pool.map(_run_summary, configs))


def _report(kind, base: ScenarioConfig, configs, workers) -> MetricsReport:
    out = run_points(configs, workers)
    return MetricsReport(kind, [o[0] for o in out], [o[1] for o in out], base.seed,
                         config_hash({"kind": kind, "points": configs}))


def run_penetration_sweep(base: ScenarioConfig, levels=PENETRATION_SWEEP, workers: int = 1
                          ) -> MetricsReport:
    return _report("penetration", base, [replace(base, penetration=float(p)) for p in levels], workers)


def run_pf_sweep(base: ScenarioConfig, levels=PF_SWEEP, workers: int = 1) -> MetricsReport:
    return _report("pf", base, [replace(base, pf_min=float(p)) for p in levels], workers)


def run_week(base: ScenarioConfig, days: int = 7, workers: int = 1) -> MetricsReport:
    return _report("week", base, [replace(base, days=days)], workers)


WEEK_SHAPE = ProfileShape(load_noise=0.08, lmp_noise=0.006,
                          day_to_day=(1.15, 1.12, 1.05, 0.97, 0.9, 0.86, 0.9),
                          cloud_range=(0.75, 1.0))
