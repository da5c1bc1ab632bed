"""Current-injection OPF with McCormick-relaxed power definitions.

One period becomes a convex QP in standard form

    min 1/2 x'Mx + c'x   s.t.  G x = b,  H x <= d

over per-unit rectangular currents and voltages. The objective is scaled by
``1 / (lambda_P * S_phase)`` so the slack's real-power price is 1; a dual
``mu`` multiplies back to $/kWh as ``mu * lambda_P``.

Sign convention for every multiplier: stationarity reads
``M x + c + G' mu + H' lam = 0``. The P- and Q-definition rows are written
as ``w - P = 0`` so that their multipliers are marginal costs of withdrawal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bounds import NodalBounds, tighten_bounds
from .devices import DeviceSet, PeriodInput, Q_PRICE_RATIO, pf_slope
from .mccormick import envelope_coefficients, DEGENERATE_TOL
from .network import NetworkModel

NODE_SYMBOLS = ("IR", "II", "VR", "VI", "P", "Q", "WRR", "WII", "WRI", "WIR")
VOLTAGE_SYMBOLS = ("VR", "VI")
# (w symbol, voltage factor, current factor)
PRODUCTS = (("WRR", "VR", "IR"), ("WII", "VI", "II"), ("WRI", "VR", "II"), ("WIR", "VI", "IR"))


class IndefiniteObjective(ValueError):
    def __init__(self, min_eig):
        super().__init__(f"objective Hessian is not PSD (minimum eigenvalue {min_eig:.3e})")
        self.min_eig = min_eig


@dataclass
class OPFOptions:
    zeta: float = 0.1
    q_price_ratio: float = Q_PRICE_RATIO
    allow_export: bool = False  # slack real power may flow back upstream
    theta_deg: float = 10.0
    rounds: int = 3
    min_current_width: float = 0.0

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class IndexMap:
    """Variable and row metadata; arrays are aligned with x / rows of G, H."""

    var_symbol: np.ndarray
    var_bus: np.ndarray  # owning bus index
    var_phase: np.ndarray
    var_elem: np.ndarray  # bus / line / generator / capbank / load index, by symbol
    eq_kind: np.ndarray
    eq_bus: np.ndarray
    eq_phase: np.ndarray
    ineq_kind: np.ndarray
    ineq_bus: np.ndarray
    ineq_phase: np.ndarray
    period: int = 0
    lookup: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.var_symbol)

    def var(self, symbol, elem, phase) -> int:
        return self.lookup[(symbol, int(elem), int(phase))]

    def vars_of(self, symbol):
        return np.flatnonzero(self.var_symbol == symbol)

    def rows_of(self, kind, eq=True):
        return np.flatnonzero((self.eq_kind if eq else self.ineq_kind) == kind)


@dataclass
class StandardFormQP:
    M: sp.csr_matrix
    c: np.ndarray
    G: sp.csr_matrix
    b: np.ndarray
    H: sp.csr_matrix
    d: np.ndarray
    index: IndexMap
    lmp: float = 1.0
    s_base_kva: float = 1.0
    const: float = 0.0

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.M @ x) + self.c @ x + self.const)

    def residuals(self, x) -> dict:
        eq = self.G @ x - self.b
        ineq = self.H @ x - self.d
        return {"eq": float(np.max(np.abs(eq), initial=0.0)),
                "ineq": float(np.max(ineq, initial=0.0).clip(min=0.0))}

    def to_json(self) -> str:
        def smat(m):
            m = m.tocoo()
            return {"shape": list(m.shape), "row": m.row.tolist(), "col": m.col.tolist(),
                    "val": m.data.tolist()}
        ix = self.index
        return json.dumps({
            "M": smat(self.M), "c": self.c.tolist(), "G": smat(self.G), "b": self.b.tolist(),
            "H": smat(self.H), "d": self.d.tolist(), "lmp": self.lmp,
            "index_map": {"symbol": ix.var_symbol.tolist(), "bus": ix.var_bus.tolist(),
                          "phase": ix.var_phase.tolist(), "elem": ix.var_elem.tolist(),
                          "eq_kind": ix.eq_kind.tolist(), "ineq_kind": ix.ineq_kind.tolist()},
        })


class _Rows:
    def __init__(self):
        self.r, self.c, self.v = [], [], []
        self.rhs, self.kind, self.bus, self.phase = [], [], [], []

    def add(self, cols, vals, rhs, kind, bus, phase=-1):
        k = len(self.rhs)
        self.r.extend([k] * len(cols))
        self.c.extend(cols)
        self.v.extend(vals)
        self.rhs.append(rhs)
        self.kind.append(kind)
        self.bus.append(bus)
        self.phase.append(phase)

    def matrix(self, n):
        return sp.csr_matrix((self.v, (self.r, self.c)), shape=(len(self.rhs), n))


def load_phases(ld, mask_k) -> np.ndarray:
    """Phases on which a load can draw anything."""
    on = (np.asarray(ld.p_kw) != 0) | (np.asarray(ld.q_kvar) != 0)
    if ld.flexible:
        on |= np.asarray(ld.p_max_kw) > 0
    return np.asarray(mask_k, bool) & on


def injection_mask(net: NetworkModel, devices: DeviceSet) -> np.ndarray:
    """(N, 3) bus-phases that can inject or withdraw power.

    Elsewhere the injection is identically zero: such phases carry only a
    voltage, and their power-definition rows would be redundant (their
    multipliers are not identified), so they are left out.
    """
    mask = net.bus_phases
    inj = np.zeros_like(mask)
    inj[net.slack_index] = mask[net.slack_index]
    for gen in devices.generators:
        inj[net.bus_index(gen.bus)] |= np.asarray(gen.phases, bool)
    for cap in net.capacitor_banks:
        inj[net.bus_index(cap.bus)] |= np.asarray(cap.capacity) > 0
    for ld in devices.loads:
        k = net.bus_index(ld.bus)
        inj[k] |= load_phases(ld, mask[k])
    return inj & mask


def build_layout(net: NetworkModel, devices: DeviceSet, period: int = 0):
    """Variable ordering; only present phases get variables."""
    sym, bus, ph, elem = [], [], [], []

    def add(s, b, p, e):
        sym.append(s)
        bus.append(b)
        ph.append(p)
        elem.append(e)

    mask = net.bus_phases
    inj = injection_mask(net, devices)
    for k in range(net.n_bus):
        for p in np.flatnonzero(mask[k]):
            for s in NODE_SYMBOLS if inj[k, p] else VOLTAGE_SYMBOLS:
                add(s, k, p, k)
    ends = net.line_ends
    for e, lm in enumerate(net.line_phases):
        for p in np.flatnonzero(lm):
            for s in ("FR", "FI"):
                add(s, ends[e, 0], p, e)
    s_idx = net.slack_index
    for p in np.flatnonzero(mask[s_idx]):
        add("PS", s_idx, p, s_idx)
        add("QS", s_idx, p, s_idx)
    for g, gen in enumerate(devices.generators):
        k = net.bus_index(gen.bus)
        for p in np.flatnonzero(gen.phases):
            add("PG", k, p, g)
            add("QG", k, p, g)
    for cidx, cap in enumerate(net.capacitor_banks):
        k = net.bus_index(cap.bus)
        for p in np.flatnonzero(np.asarray(cap.capacity) > 0):
            add("QC", k, p, cidx)
    for l, ld in enumerate(devices.loads):
        k = net.bus_index(ld.bus)
        for p in np.flatnonzero(load_phases(ld, mask[k])):
            add("PL", k, p, l)
            add("QL", k, p, l)
    lookup = {(s, e, p): i for i, (s, e, p) in enumerate(zip(sym, elem, ph))}
    return (np.array(sym), np.array(bus, dtype=int), np.array(ph, dtype=int),
            np.array(elem, dtype=int), lookup)


def assemble_objective(net, devices: DeviceSet, inp: PeriodInput, zeta: float, layout,
                       q_price_ratio: float = Q_PRICE_RATIO, include_losses: bool = True):
    """Return (M, c, const) for the scaled objective."""
    if zeta < 0:
        raise ValueError("zeta must be >= 0")
    sym, _bus, ph, elem, lookup = layout
    n = len(sym)
    s1 = net.s_base_phase_kva
    lam = inp.lmp
    diag = np.zeros(n)
    c = np.zeros(n)
    const = 0.0
    for i in np.flatnonzero(sym == "PS"):
        c[i] = 1.0
    for i in np.flatnonzero(sym == "QS"):
        c[i] = q_price_ratio
    for i in np.flatnonzero((sym == "PG") | (sym == "QG")):
        g = devices.generators[elem[i]]
        if sym[i] == "PG":
            diag[i] = 2.0 * g.a_p * s1 / lam
            c[i] = g.b_p / lam
        else:
            diag[i] = 2.0 * g.a_q * s1 / lam
            c[i] = g.b_q_eff / lam
    for i in np.flatnonzero(sym == "PL"):
        ld = devices.loads[elem[i]]
        if ld.flexible and ld.alpha_p:
            # disutility -alpha (P - P_min)^2, with the sign it carries in the objective
            pmin = net.kw_to_pu(ld.p_min_kw[ph[i]])
            a = ld.alpha_p * s1 / lam
            diag[i] += -2.0 * a
            c[i] += 2.0 * a * pmin
            const += -a * pmin**2
    M = sp.diags(diag, format="csr")
    if include_losses and zeta > 0:
        r, cc, v = [], [], []
        for e, ln in enumerate(net.lines):
            R = ln.impedance.real
            on = np.flatnonzero(ln.phase_mask)
            for s in ("FR", "FI"):
                idx = [lookup[(s, e, p)] for p in on]
                for a_, ia in zip(on, idx):
                    for b_, ib in zip(on, idx):
                        r.append(ia)
                        cc.append(ib)
                        v.append(2.0 * zeta * R[a_, b_])
        M = M + sp.csr_matrix((v, (r, cc)), shape=(n, n))
    neg = diag < 0
    if np.any(neg):
        raise IndefiniteObjective(float(diag[neg].min()))
    return M.tocsr(), c, const


def line_losses(net: NetworkModel, flows: np.ndarray) -> np.ndarray:
    """Per-line Re(I^H R I) for complex flows of shape (E, 3), p.u."""
    out = np.zeros(net.n_line)
    for e, ln in enumerate(net.lines):
        f = flows[e]
        R = ln.impedance.real
        out[e] = float(f.real @ R @ f.real + f.imag @ R @ f.imag)
    return out


def assemble_qp(net: NetworkModel, devices: DeviceSet, inp: PeriodInput,
                bounds: NodalBounds | None = None, zeta: float = 0.1,
                options: OPFOptions | None = None) -> StandardFormQP:
    opts = options or OPFOptions(zeta=zeta)
    if options is not None:
        zeta = opts.zeta
    devices.validate(net)
    if bounds is None:
        bounds = tighten_bounds(net, devices, inp, rounds=opts.rounds, theta_deg=opts.theta_deg,
                                min_width=opts.min_current_width)
    layout = build_layout(net, devices, inp.slot)
    sym, vbus, vph, velem, lookup = layout
    n = len(sym)
    if len(lookup) != n:
        raise ValueError("index-map collision")
    M, c, const = assemble_objective(net, devices, inp, zeta, layout, opts.q_price_ratio)

    V = lambda s, k, p: lookup[(s, k, p)]  # noqa: E731
    eq, iq = _Rows(), _Rows()
    mask = net.bus_phases
    inj = injection_mask(net, devices)
    ends = net.line_ends
    s_idx = net.slack_index

    # Ohm's law per line-phase, owned by the to-bus: V_f - V_t - Z F = 0
    for e, ln in enumerate(net.lines):
        f, t = ends[e]
        on = np.flatnonzero(ln.phase_mask)
        R, X = ln.impedance.real, ln.impedance.imag
        for p in on:
            cols = [V("VR", f, p), V("VR", t, p)]
            vals = [1.0, -1.0]
            for q in on:
                cols += [V("FR", e, q), V("FI", e, q)]
                vals += [-R[p, q], X[p, q]]
            eq.add(cols, vals, 0.0, "ohm_r", t, p)
            cols = [V("VI", f, p), V("VI", t, p)]
            vals = [1.0, -1.0]
            for q in on:
                cols += [V("FI", e, q), V("FR", e, q)]
                vals += [-R[p, q], -X[p, q]]
            eq.add(cols, vals, 0.0, "ohm_i", t, p)

    # KCL: I_k - sum(out) + sum(in) = 0
    out_lines = net.children()
    in_line = net.parent_line()
    for k in range(net.n_bus):
        for p in np.flatnonzero(mask[k]):
            for s_i, s_f in (("IR", "FR"), ("II", "FI")):
                cols, vals = ([V(s_i, k, p)], [1.0]) if inj[k, p] else ([], [])
                for e in out_lines[k]:
                    if net.lines[e].phases[p]:
                        cols.append(V(s_f, e, p))
                        vals.append(-1.0)
                e = in_line[k]
                if e >= 0 and net.lines[e].phases[p]:
                    cols.append(V(s_f, e, p))
                    vals.append(1.0)
                eq.add(cols, vals, 0.0, "kcl_r" if s_i == "IR" else "kcl_i", k, p)

    # power definitions through the product variables
    for k in range(net.n_bus):
        for p in np.flatnonzero(inj[k]):
            eq.add([V("WRR", k, p), V("WII", k, p), V("P", k, p)], [1.0, 1.0, -1.0], 0.0,
                   "pdef", k, p)
            eq.add([V("WRI", k, p), V("WIR", k, p), V("Q", k, p)], [-1.0, 1.0, -1.0], 0.0,
                   "qdef", k, p)

    # nodal balance: P = sum(gen) - sum(load)
    dev_at: dict = {}
    for i in np.flatnonzero(np.isin(sym, ["PS", "QS", "PG", "QG", "QC", "PL", "QL"])):
        dev_at.setdefault((vbus[i], vph[i], sym[i]), []).append(i)
    for k in range(net.n_bus):
        for p in np.flatnonzero(inj[k]):
            cols, vals = [V("P", k, p)], [1.0]
            for s, sign in (("PS", -1.0), ("PG", -1.0), ("PL", 1.0)):
                for i in dev_at.get((k, p, s), []):
                    cols.append(i)
                    vals.append(sign)
            eq.add(cols, vals, 0.0, "pbal", k, p)
            cols, vals = [V("Q", k, p)], [1.0]
            for s, sign in (("QS", -1.0), ("QG", -1.0), ("QC", -1.0), ("QL", 1.0)):
                for i in dev_at.get((k, p, s), []):
                    cols.append(i)
                    vals.append(sign)
            eq.add(cols, vals, 0.0, "qbal", k, p)

    # slack voltage
    vs = net.slack_voltage()
    for p in np.flatnonzero(mask[s_idx]):
        eq.add([V("VR", s_idx, p)], [1.0], float(vs[p].real), "slack_v", s_idx, p)
        eq.add([V("VI", s_idx, p)], [1.0], float(vs[p].imag), "slack_v", s_idx, p)

    # fixed loads (flexible ones get a box instead)
    for l, ld in enumerate(devices.loads):
        k = net.bus_index(ld.bus)
        pl = net.kw_to_pu(inp.load_p_kw[l])
        ql = net.kw_to_pu(inp.load_q_kvar[l])
        for p in np.flatnonzero(load_phases(ld, mask[k])):
            if ld.flexible:
                lo, hi = net.kw_to_pu(ld.p_min_kw[p]), net.kw_to_pu(ld.p_max_kw[p])
                iq.add([V("PL", l, p)], [1.0], float(hi), "load_box", k, p)
                iq.add([V("PL", l, p)], [-1.0], float(-lo), "load_box", k, p)
            else:
                eq.add([V("PL", l, p)], [1.0], float(pl[p]), "fix", k, p)
            eq.add([V("QL", l, p)], [1.0], float(ql[p]), "fix", k, p)

    # McCormick envelopes and boxes, written in the frame the bounds were computed in
    box = {"VR": bounds.vr, "VI": bounds.vi, "IR": bounds.ir, "II": bounds.ii}
    frame = np.asarray(bounds.frame, dtype=float)

    def form(s, k, p):
        """Linear form of a rotated coordinate in terms of global variables."""
        cs, sn = np.cos(frame[p]), np.sin(frame[p])
        re, im = ("VR", "VI") if s[0] == "V" else ("IR", "II")
        if s[1] == "R":
            terms = [(V(re, k, p), cs), (V(im, k, p), sn)]
        else:
            terms = [(V(im, k, p), cs), (V(re, k, p), -sn)]
        return [(i, c) for i, c in terms if abs(c) > 1e-15]

    def add_linear(rows, parts, rhs, kind, k, p):
        acc: dict = {}
        for scale, terms in parts:
            for i, c in terms:
                acc[i] = acc.get(i, 0.0) + scale * c
        rows.add(list(acc), list(acc.values()), rhs, kind, k, p)

    for k in range(net.n_bus):
        for p in np.flatnonzero(inj[k]):
            for w, xs, ys in PRODUCTS:
                xl, xu = box[xs][0, k, p], box[xs][1, k, p]
                yl, yu = box[ys][0, k, p], box[ys][1, k, p]
                iw = V(w, k, p)
                fx, fy = form(xs, k, p), form(ys, k, p)
                if xu - xl <= DEGENERATE_TOL:
                    add_linear(eq, [(1.0, [(iw, 1.0)]), (-0.5 * (xl + xu), fy)], 0.0,
                               "mc_exact", k, p)
                    continue
                if yu - yl <= DEGENERATE_TOL:
                    add_linear(eq, [(1.0, [(iw, 1.0)]), (-0.5 * (yl + yu), fx)], 0.0,
                               "mc_exact", k, p)
                    continue
                cx, cy, cw, rhs = envelope_coefficients(xl, xu, yl, yu)
                for r in range(4):
                    add_linear(iq, [(float(cx[r]), fx), (float(cy[r]), fy),
                                    (float(cw[r]), [(iw, 1.0)])], float(rhs[r]), "mc", k, p)

    # voltage and current boxes (the slack voltage is pinned by equalities)
    for k in range(net.n_bus):
        for p in np.flatnonzero(mask[k]):
            for s in ("VR", "VI", "IR", "II"):
                if k == s_idx and s in ("VR", "VI"):
                    continue
                if s[0] == "I" and not inj[k, p]:
                    continue
                lo, hi = box[s][0, k, p], box[s][1, k, p]
                f = form(s, k, p)
                add_linear(iq, [(1.0, f)], float(hi), "box", k, p)
                add_linear(iq, [(-1.0, f)], float(-lo), "box", k, p)

    # generators: capability box and PF cone
    for g, gen in enumerate(devices.generators):
        k = net.bus_index(gen.bus)
        nph = gen.n_phases
        t = pf_slope(gen.pf_min)
        p_hi = net.kw_to_pu(inp.gen_cap_kw[g]) / nph
        p_lo = min(net.kw_to_pu(gen.p_min_kw) / nph, p_hi)
        qlo, qhi = (net.kw_to_pu(q) / nph for q in gen.q_bounds_kvar)
        for p in np.flatnonzero(gen.phases):
            ip, iqv = V("PG", g, p), V("QG", g, p)
            iq.add([ip], [1.0], float(p_hi), "gen_box", k, p)
            iq.add([ip], [-1.0], float(-p_lo), "gen_box", k, p)
            iq.add([iqv], [1.0], float(qhi), "gen_box", k, p)
            iq.add([iqv], [-1.0], float(-qlo), "gen_box", k, p)
            iq.add([iqv, ip], [1.0, -t], 0.0, "pf", k, p)
            iq.add([iqv, ip], [-1.0, -t], 0.0, "pf", k, p)

    # slack source: no export unless allowed
    if not opts.allow_export:
        for p in np.flatnonzero(mask[s_idx]):
            iq.add([V("PS", s_idx, p)], [-1.0], 0.0, "slack_box", s_idx, p)

    # capacitor banks
    for cidx, cap in enumerate(net.capacitor_banks):
        k = net.bus_index(cap.bus)
        for p in np.flatnonzero(np.asarray(cap.capacity) > 0):
            i = V("QC", cidx, p)
            iq.add([i], [1.0], float(cap.capacity[p]), "cap", k, p)
            iq.add([i], [-1.0], 0.0, "cap", k, p)

    # ampacity on flow components, owned by the from-bus
    for e, ln in enumerate(net.lines):
        if ln.ampacity is None:
            continue
        for p in np.flatnonzero(ln.phase_mask):
            for s in ("FR", "FI"):
                i = V(s, e, p)
                iq.add([i], [1.0], float(ln.ampacity[p]), "amp", ends[e, 0], p)
                iq.add([i], [-1.0], float(ln.ampacity[p]), "amp", ends[e, 0], p)

    index = IndexMap(
        sym, vbus, vph, velem,
        np.array(eq.kind), np.array(eq.bus, dtype=int), np.array(eq.phase, dtype=int),
        np.array(iq.kind), np.array(iq.bus, dtype=int), np.array(iq.phase, dtype=int),
        period=inp.slot, lookup=lookup,
    )
    return StandardFormQP(M, c, eq.matrix(n), np.array(eq.rhs, float), iq.matrix(n),
                          np.array(iq.rhs, float), index, lmp=inp.lmp,
                          s_base_kva=net.s_base_phase_kva, const=const)


@dataclass
class PQRecovery:
    P: np.ndarray  # (N, 3)
    Q: np.ndarray
    gap_p: np.ndarray  # |P - (VR IR + VI II)|
    gap_q: np.ndarray
    bilinear_gap: float
    relative_gap: np.ndarray  # max(gap_p, gap_q) / |S| where |S| > 0

    @property
    def max_relative_gap(self) -> float:
        return float(np.max(self.relative_gap, initial=0.0))


def grid(qp: StandardFormQP, x: np.ndarray, symbol: str, n_elem: int) -> np.ndarray:
    """Scatter a per-phase variable family into an (n_elem, 3) array."""
    out = np.zeros((n_elem, 3))
    ix = qp.index
    idx = ix.vars_of(symbol)
    out[ix.var_elem[idx], ix.var_phase[idx]] = x[idx]
    return out


def recover_pq(qp: StandardFormQP, x: np.ndarray, s_floor: float = 1e-6) -> PQRecovery:
    if x.shape != (qp.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({qp.n},)")
    n_bus = int(qp.index.var_bus.max()) + 1
    g = {s: grid(qp, x, s, n_bus) for s in ("P", "Q", "VR", "VI", "IR", "II")}
    gp = np.abs(g["P"] - (g["VR"] * g["IR"] + g["VI"] * g["II"]))
    gq = np.abs(g["Q"] - (g["VI"] * g["IR"] - g["VR"] * g["II"]))
    smag = np.hypot(g["P"], g["Q"])
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(smag > s_floor, np.maximum(gp, gq) / smag, 0.0)
    return PQRecovery(g["P"], g["Q"], gp, gq, float(max(gp.max(initial=0), gq.max(initial=0))), rel)
