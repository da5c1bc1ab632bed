"""Unbalanced three-phase feeder model.

All quantities inside :class:`NetworkModel` are per-unit. Powers are
normalised by the single-phase base ``base_kva / 3`` and impedances by
``base_kv**2 / (base_kva / 1000)``, so a phase-to-neutral voltage of
``base_kv / sqrt(3)`` is 1.0 p.u.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PHASES = ("a", "b", "c")
PHASE_ANGLES = np.deg2rad([0.0, -120.0, 120.0])


class FeederError(ValueError):
    """Raised when a feeder description violates the schema or topology rules."""


def parse_phases(spec: str) -> tuple[bool, bool, bool]:
    spec = spec.lower()
    bad = set(spec) - set(PHASES)
    if bad or not spec:
        raise FeederError(f"invalid phase string {spec!r}")
    return tuple(p in spec for p in PHASES)


def phase_string(mask) -> str:
    return "".join(p for p, on in zip(PHASES, mask) if on)


@dataclass(frozen=True, eq=False)
class Bus:
    id: int
    phases: tuple[bool, bool, bool]
    is_slack: bool = False
    vmin: float = 0.95
    vmax: float = 1.05
    name: str = ""

    @property
    def phase_mask(self) -> np.ndarray:
        return np.array(self.phases, dtype=bool)


@dataclass(frozen=True, eq=False)
class Line:
    from_bus: int
    to_bus: int
    phases: tuple[bool, bool, bool]
    impedance: np.ndarray  # 3x3 complex, p.u.
    ampacity: np.ndarray | None = None  # per-phase current magnitude, p.u.
    name: str = ""

    @property
    def phase_mask(self) -> np.ndarray:
        return np.array(self.phases, dtype=bool)


@dataclass(frozen=True, eq=False)
class CapacitorBank:
    bus: int
    capacity: np.ndarray  # per-phase reactive capacity, p.u.
    name: str = ""


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    capacitor_banks: tuple[CapacitorBank, ...] = ()
    base_kva: float = 1000.0
    base_kv: float = 4.16
    name: str = ""
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.base_kva <= 0 or self.base_kv <= 0:
            raise FeederError("per-unit bases must be positive")
        index = {}
        for k, bus in enumerate(self.buses):
            if bus.id in index:
                raise FeederError(f"duplicate bus id {bus.id}")
            index[bus.id] = k
        self._index.update(index)
        validate(self)

    # --- sizes and lookups -------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus {bus_id}") from None

    @property
    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_slack)

    @property
    def bus_phases(self) -> np.ndarray:
        """(N, 3) boolean mask of present phases."""
        return np.array([b.phases for b in self.buses], dtype=bool)

    @property
    def line_phases(self) -> np.ndarray:
        return np.array([ln.phases for ln in self.lines], dtype=bool).reshape(-1, 3)

    @property
    def line_ends(self) -> np.ndarray:
        """(E, 2) array of (from, to) bus indices."""
        return np.array(
            [(self.bus_index(ln.from_bus), self.bus_index(ln.to_bus)) for ln in self.lines],
            dtype=int,
        ).reshape(-1, 2)

    # --- per-unit bases ----------------------------------------------------
    @property
    def s_base_phase_kva(self) -> float:
        return self.base_kva / 3.0

    @property
    def z_base_ohm(self) -> float:
        return self.base_kv**2 / (self.base_kva / 1000.0)

    @property
    def i_base_amp(self) -> float:
        return self.s_base_phase_kva / (self.base_kv / np.sqrt(3.0))

    def kw_to_pu(self, kw):
        return np.asarray(kw, dtype=float) / self.s_base_phase_kva

    def pu_to_kw(self, pu):
        return np.asarray(pu, dtype=float) * self.s_base_phase_kva

    def ohm_to_pu(self, z):
        return np.asarray(z) / self.z_base_ohm

    def pu_to_ohm(self, z):
        return np.asarray(z) * self.z_base_ohm

    # --- topology ----------------------------------------------------------
    def children(self) -> list[list[int]]:
        """Child line indices per bus for the tree rooted at the slack."""
        kids = [[] for _ in self.buses]
        for e, (f, _t) in enumerate(self.line_ends):
            kids[f].append(e)
        return kids

    def parent_line(self) -> np.ndarray:
        """Index of the line feeding each bus (-1 at the slack)."""
        parent = np.full(self.n_bus, -1, dtype=int)
        for e, (_f, t) in enumerate(self.line_ends):
            parent[t] = e
        return parent

    def bfs_order(self) -> list[int]:
        """Buses in breadth-first order from the slack (parents before children)."""
        kids = self.children()
        ends = self.line_ends
        order, queue = [], deque([self.slack_index])
        while queue:
            k = queue.popleft()
            order.append(k)
            queue.extend(int(ends[e, 1]) for e in kids[k])
        return order

    def slack_voltage(self) -> np.ndarray:
        """Balanced 1.0 p.u. phasors at the slack, zero on absent phases."""
        v = np.exp(1j * PHASE_ANGLES)
        return np.where(self.buses[self.slack_index].phase_mask, v, 0.0)


def validate(net: NetworkModel) -> None:
    slack = [b.id for b in net.buses if b.is_slack]
    if len(slack) != 1:
        raise FeederError(f"exactly one slack bus required, found {len(slack)}")
    for b in net.buses:
        if not any(b.phases):
            raise FeederError(f"bus {b.id} has no phases")
        if not 0 < b.vmin <= b.vmax:
            raise FeederError(f"bus {b.id} has invalid voltage limits")
    for ln in net.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in net._index:
                raise FeederError(f"line {ln.name or '?'} references unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            raise FeederError(f"line {ln.name or '?'} is a self-loop at bus {ln.from_bus}")
        z = ln.impedance
        if z.shape != (3, 3) or not np.allclose(z, z.T, rtol=0, atol=1e-12):
            raise FeederError(f"line {ln.name or '?'} impedance must be a symmetric 3x3 block")
        mask = ln.phase_mask
        if np.any(np.abs(np.diag(z))[mask] == 0):
            raise FeederError(f"line {ln.name or '?'} has a zero self-impedance on a present phase")
        if np.any(np.abs(z[~mask, :]) > 0) or np.any(np.abs(z[:, ~mask]) > 0):
            raise FeederError(f"line {ln.name or '?'} has impedance on an absent phase")
        for end in (ln.from_bus, ln.to_bus):
            bus_mask = net.buses[net._index[end]].phase_mask
            if np.any(mask & ~bus_mask):
                raise FeederError(f"line {ln.name or '?'} uses a phase missing at bus {end}")
    for cap in net.capacitor_banks:
        if cap.bus not in net._index:
            raise FeederError(f"capacitor bank references unknown bus {cap.bus}")
        if np.any(np.asarray(cap.capacity) < 0):
            raise FeederError(f"capacitor bank at bus {cap.bus} has negative capacity")

    n = net.n_bus
    if net.n_line != n - 1 or not _connected(net):
        if not _connected(net):
            raise FeederError("feeder graph is disconnected")
        raise FeederError("meshed feeders are not supported (need exactly N-1 lines)")
    # orientation: every bus except the slack must be fed by exactly one line
    into = np.bincount(net.line_ends[:, 1], minlength=n) if net.n_line else np.zeros(n, int)
    if into[net.slack_index] != 0 or np.any(np.delete(into, net.slack_index) != 1):
        raise FeederError("lines must be oriented away from the slack bus")


def _connected(net: NetworkModel) -> bool:
    if net.n_bus == 0:
        return False
    adj = [[] for _ in range(net.n_bus)]
    for f, t in net.line_ends:
        adj[f].append(t)
        adj[t].append(f)
    seen = {0}
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for m in adj[k]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    return len(seen) == net.n_bus


# --- structures for the OPF -------------------------------------------------

def build_incidence(net: NetworkModel) -> sp.csr_matrix:
    """3E x 3N incidence: +1 on the from-bus phase, -1 on the to-bus phase."""
    rows, cols, vals = [], [], []
    for e, ((f, t), mask) in enumerate(zip(net.line_ends, net.line_phases)):
        for p in np.flatnonzero(mask):
            rows += [3 * e + p, 3 * e + p]
            cols += [3 * f + p, 3 * t + p]
            vals += [1.0, -1.0]
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * net.n_line, 3 * net.n_bus))


def build_branch_impedance(net: NetworkModel) -> sp.csr_matrix:
    """Block-diagonal 3E x 3E complex impedance, one 3x3 block per line."""
    blocks = []
    for ln in net.lines:
        d = np.abs(np.diag(ln.impedance))
        if np.any(d[ln.phase_mask] == 0):
            raise FeederError(f"line {ln.name or '?'} has a singular self-impedance")
        blocks.append(sp.csr_matrix(ln.impedance))
    if not blocks:
        return sp.csr_matrix((0, 0), dtype=complex)
    return sp.block_diag(blocks, format="csr")


# --- file I/O ---------------------------------------------------------------

def load_network(feeder_file: str | Path) -> NetworkModel:
    """Read a feeder JSON file (ohms, kV, kVA) and convert it to per-unit.

    Schema::

        {"base_kva": 1000, "base_kv": 4.16,
         "buses":    [{"id": 1, "phases": "abc", "slack": true, "vmin": 0.95, "vmax": 1.05}],
         "lines":    [{"from": 1, "to": 2, "phases": "abc", "r": [[..]], "x": [[..]],
                       "length": 1.0, "ampacity": [400, 400, 400]}],
         "capbanks": [{"bus": 2, "kvar": [100, 100, 100]}]}

    ``r`` and ``x`` are ohms per unit length, ``ampacity`` is in amperes.
    """
    path = Path(feeder_file)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: not valid JSON ({exc})") from None
    return network_from_dict(doc)


def network_from_dict(doc: dict) -> NetworkModel:
    for key in ("buses", "lines"):
        if key not in doc:
            raise FeederError(f"feeder is missing the {key!r} section")
    base_kva = float(doc.get("base_kva", 1000.0))
    base_kv = float(doc.get("base_kv", 4.16))
    if base_kva <= 0 or base_kv <= 0:
        raise FeederError("per-unit bases must be positive")
    z_base = base_kv**2 / (base_kva / 1000.0)
    i_base = (base_kva / 3.0) / (base_kv / np.sqrt(3.0))
    s_base = base_kva / 3.0

    buses = []
    for k, rec in enumerate(doc["buses"]):
        try:
            buses.append(
                Bus(
                    id=int(rec["id"]),
                    phases=parse_phases(rec.get("phases", "abc")),
                    is_slack=bool(rec.get("slack", False)),
                    vmin=float(rec.get("vmin", 0.95)),
                    vmax=float(rec.get("vmax", 1.05)),
                    name=str(rec.get("name", rec["id"])),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"bus record {k}: {exc}") from None
    ids = {b.id for b in buses}

    lines = []
    for k, rec in enumerate(doc["lines"]):
        name = str(rec.get("name", f"line{k}"))
        try:
            f, t = int(rec["from"]), int(rec["to"])
            mask = parse_phases(rec.get("phases", "abc"))
            r = np.asarray(rec["r"], dtype=float)
            x = np.asarray(rec["x"], dtype=float)
            length = float(rec.get("length", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"line record {k} ({name}): {exc}") from None
        for end in (f, t):
            if end not in ids:
                raise FeederError(f"line record {k} ({name}) references unknown bus {end}")
        if r.shape != (3, 3) or x.shape != (3, 3):
            raise FeederError(f"line record {k} ({name}): r and x must be 3x3")
        if length <= 0:
            raise FeederError(f"line record {k} ({name}): length must be positive")
        amp = rec.get("ampacity")
        amp_pu = None if amp is None else np.broadcast_to(np.asarray(amp, float), (3,)) / i_base
        lines.append(
            Line(f, t, mask, (r + 1j * x) * length / z_base, ampacity=amp_pu, name=name)
        )

    caps = []
    for k, rec in enumerate(doc.get("capbanks", [])):
        try:
            bus = int(rec["bus"])
            kvar = np.broadcast_to(np.asarray(rec["kvar"], dtype=float), (3,))
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"capbank record {k}: {exc}") from None
        if bus not in ids:
            raise FeederError(f"capbank record {k} references unknown bus {bus}")
        caps.append(CapacitorBank(bus, kvar / s_base, name=str(rec.get("name", f"cap{k}"))))

    return NetworkModel(
        tuple(buses), tuple(lines), tuple(caps), base_kva, base_kv, str(doc.get("name", ""))
    )


def network_to_dict(net: NetworkModel) -> dict:
    """Inverse of :func:`network_from_dict` (lengths folded into r and x)."""
    z_base, s_base = net.z_base_ohm, net.s_base_phase_kva
    return {
        "name": net.name,
        "base_kva": net.base_kva,
        "base_kv": net.base_kv,
        "buses": [
            {"id": b.id, "name": b.name, "phases": phase_string(b.phases),
             "slack": b.is_slack, "vmin": b.vmin, "vmax": b.vmax}
            for b in net.buses
        ],
        "lines": [
            {"name": ln.name, "from": ln.from_bus, "to": ln.to_bus,
             "phases": phase_string(ln.phases),
             "r": (ln.impedance.real * z_base).tolist(),
             "x": (ln.impedance.imag * z_base).tolist(),
             "length": 1.0,
             "ampacity": None if ln.ampacity is None else (ln.ampacity * net.i_base_amp).tolist()}
            for ln in net.lines
        ],
        "capbanks": [
            {"name": c.name, "bus": c.bus, "kvar": (np.asarray(c.capacity) * s_base).tolist()}
            for c in net.capacitor_banks
        ],
    }
