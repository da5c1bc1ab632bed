"""Generators, loads and per-period inputs.

Device files are CSV with a header row. Physical units (kW, kVAR, $/kWh)
are kept here; conversion to per-unit happens in :mod:`reactive_market.opf`.

``generators.csv``: ``name, bus, phases, p_max_kw, pf_min, a_p, b_p, a_q, b_q``
(``b_q`` may be blank, meaning one tenth of ``b_p``; ``a_p`` in $/kW^2h).

``loads.csv``: ``bus, phase, p_kw, q_kvar`` with optional ``alpha_p, alpha_q,
p_min_kw, p_max_kw`` for flexible loads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .network import FeederError, NetworkModel, PHASES, parse_phases

Q_PRICE_RATIO = 0.1


def pf_slope(pf: float) -> float:
    """tan(acos(pf)); the PF cone is |Q| <= pf_slope(pf) * P."""
    if not 0 < pf <= 1:
        raise ValueError(f"power factor must lie in (0, 1], got {pf}")
    return float(np.tan(np.arccos(pf)))


@dataclass(frozen=True)
class Generator:
    name: str
    bus: int
    phases: tuple[bool, bool, bool]
    p_max_kw: float  # nameplate, all phases together
    pf_min: float = 1.0
    a_p: float = 0.0
    b_p: float = 0.0
    a_q: float = 0.0
    b_q: float | None = None
    p_min_kw: float = 0.0
    q_min_kvar: float | None = None
    q_max_kvar: float | None = None

    def __post_init__(self):
        if not 0 < self.pf_min <= 1:
            raise ValueError(f"{self.name}: pf_min must lie in (0, 1]")
        if self.a_p < 0 or self.a_q < 0:
            raise ValueError(f"{self.name}: quadratic cost coefficients must be >= 0")
        if self.p_min_kw > self.p_max_kw:
            raise ValueError(f"{self.name}: p_min_kw exceeds p_max_kw")
        coeffs = (self.a_p, self.b_p, self.a_q, self.b_q_eff)
        if not np.all(np.isfinite(coeffs)):
            raise ValueError(f"{self.name}: cost coefficients must be finite")
        qlo, qhi = self.q_bounds_kvar
        if qlo > qhi:
            raise ValueError(f"{self.name}: reactive bounds out of order")

    @property
    def n_phases(self) -> int:
        return int(sum(self.phases))

    @property
    def b_q_eff(self) -> float:
        return Q_PRICE_RATIO * self.b_p if self.b_q is None else self.b_q

    @property
    def q_bounds_kvar(self) -> tuple[float, float]:
        """Total reactive bounds; defaults to the PF cone at nameplate."""
        t = pf_slope(self.pf_min) * self.p_max_kw
        lo = -t if self.q_min_kvar is None else self.q_min_kvar
        hi = t if self.q_max_kvar is None else self.q_max_kvar
        return lo, hi


@dataclass(frozen=True)
class Load:
    bus: int
    p_kw: np.ndarray  # (3,) per-phase demand
    q_kvar: np.ndarray
    alpha_p: float = 0.0
    alpha_q: float = 0.0
    p_min_kw: np.ndarray | None = None  # flexibility band; None = fixed
    p_max_kw: np.ndarray | None = None

    @property
    def flexible(self) -> bool:
        return self.p_min_kw is not None and self.p_max_kw is not None


@dataclass(frozen=True)
class DeviceSet:
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()

    def validate(self, net: NetworkModel) -> None:
        ids = {b.id: b for b in net.buses}
        names = set()
        for g in self.generators:
            if g.name in names:
                raise FeederError(f"duplicate generator name {g.name}")
            names.add(g.name)
            if g.bus not in ids:
                raise FeederError(f"generator {g.name} references unknown bus {g.bus}")
            if np.any(np.array(g.phases) & ~ids[g.bus].phase_mask):
                raise FeederError(f"generator {g.name} uses a phase missing at bus {g.bus}")
            if ids[g.bus].is_slack:
                raise FeederError(f"generator {g.name} sits on the slack bus")
        for ld in self.loads:
            if ld.bus not in ids:
                raise FeederError(f"load references unknown bus {ld.bus}")
            missing = ~ids[ld.bus].phase_mask
            if np.any(np.abs(ld.p_kw[missing]) > 0) or np.any(np.abs(ld.q_kvar[missing]) > 0):
                raise FeederError(f"load at bus {ld.bus} uses a missing phase")
            if ld.flexible and np.any(ld.p_min_kw > ld.p_max_kw):
                raise FeederError(f"load at bus {ld.bus} has inverted flexibility bounds")

    @property
    def nameplate_kw(self) -> float:
        return float(sum(g.p_max_kw for g in self.generators))

    def with_generators(self, gens) -> "DeviceSet":
        return replace(self, generators=tuple(gens))


@dataclass(frozen=True)
class PeriodInput:
    """Everything that changes from one 5-minute slot to the next."""

    slot: int
    gen_cap_kw: np.ndarray  # (n_gen,) available real power, all phases together
    load_p_kw: np.ndarray  # (n_load, 3)
    load_q_kvar: np.ndarray  # (n_load, 3)
    lmp: float  # wholesale price, $/kWh
    day: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.lmp) or self.lmp <= 0:
            raise ValueError("wholesale price must be finite and positive")
        if np.any(np.asarray(self.gen_cap_kw) < 0):
            raise ValueError("generator caps must be >= 0")
        if np.any(np.asarray(self.load_p_kw) < 0):
            raise ValueError("real-power demands must be >= 0")


def nominal_input(devices: DeviceSet, lmp: float = 0.05, pv: float = 1.0, load: float = 1.0,
                  slot: int = 0) -> PeriodInput:
    """Period with every load at ``load`` x nominal and PV at ``pv`` x nameplate."""
    n_load = len(devices.loads)
    return PeriodInput(
        slot=slot,
        gen_cap_kw=np.array([pv * g.p_max_kw for g in devices.generators], dtype=float),
        load_p_kw=load * np.array([ld.p_kw for ld in devices.loads], dtype=float).reshape(n_load, 3),
        load_q_kvar=load * np.array([ld.q_kvar for ld in devices.loads], dtype=float).reshape(n_load, 3),
        lmp=lmp,
    )


# --- CSV readers ----------------------------------------------------------------

def _float(row, key, default=None):
    v = row.get(key)
    if v is None or str(v).strip() == "":
        if default is None:
            raise KeyError(key)
        return default
    return float(v)


def read_generators(path: str | Path) -> list[Generator]:
    gens = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            try:
                b_q = row.get("b_q")
                gens.append(Generator(
                    name=row.get("name") or f"g{k}",
                    bus=int(row["bus"]),
                    phases=parse_phases(row.get("phases") or "abc"),
                    p_max_kw=_float(row, "p_max_kw"),
                    pf_min=_float(row, "pf_min", 1.0),
                    a_p=_float(row, "a_p", 0.0),
                    b_p=_float(row, "b_p", 0.0),
                    a_q=_float(row, "a_q", 0.0),
                    b_q=None if b_q is None or b_q.strip() == "" else float(b_q),
                ))
            except (KeyError, ValueError) as exc:
                raise FeederError(f"{path}: generator row {k + 1}: {exc}") from None
    return gens


def read_loads(path: str | Path) -> list[Load]:
    by_bus: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            try:
                bus = int(row["bus"])
                ph = PHASES.index(row["phase"].strip().lower())
                rec = by_bus.setdefault(bus, {"p": np.zeros(3), "q": np.zeros(3),
                                              "pmin": None, "pmax": None, "ap": 0.0, "aq": 0.0})
                rec["p"][ph] += _float(row, "p_kw")
                rec["q"][ph] += _float(row, "q_kvar", 0.0)
                rec["ap"] = _float(row, "alpha_p", rec["ap"])
                rec["aq"] = _float(row, "alpha_q", rec["aq"])
                if row.get("p_min_kw") not in (None, ""):
                    rec["pmin"] = rec["pmin"] if rec["pmin"] is not None else rec["p"].copy() * 0
                    rec["pmax"] = rec["pmax"] if rec["pmax"] is not None else rec["p"].copy() * 0
                    rec["pmin"][ph] = _float(row, "p_min_kw")
                    rec["pmax"][ph] = _float(row, "p_max_kw")
            except (KeyError, ValueError) as exc:
                raise FeederError(f"{path}: load row {k + 1}: {exc}") from None
    return [Load(b, r["p"], r["q"], r["ap"], r["aq"], r["pmin"], r["pmax"])
            for b, r in sorted(by_bus.items())]


def read_profile(path: str | Path) -> np.ndarray:
    """Profile CSV with columns ``slot, value``; returns values ordered by slot."""
    slots, vals = [], []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            try:
                slots.append(int(row["slot"]))
                vals.append(float(row["value"]))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: profile row {k + 1}: {exc}") from None
    order = np.argsort(slots, kind="stable")
    return np.asarray(vals)[order]


def write_profile(path: str | Path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "value"])
        for k, v in enumerate(values):
            w.writerow([k, repr(float(v))])
