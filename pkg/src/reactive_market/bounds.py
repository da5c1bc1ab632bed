"""Interval bound tightening for the nodal currents and voltages.

A forward-backward sweep over the radial feeder:

1. initial voltage boxes are the bounding boxes of the annular sectors
   ``vmin <= |V| <= vmax``, ``|angle - phase angle| <= theta``; the slack is a point;
2. nodal current boxes are the exact bounding boxes of ``conj(S / V)`` over
   the device power polytope and the current voltage box;
3. flow boxes are subtree sums of the injections (backward pass);
4. voltage boxes follow from interval Ohm's law from the slack (forward pass)
   and are intersected with the previous boxes, so rounds only ever shrink them.

Boxes live in a phase-aligned frame: phase p quantities are multiplied by
``exp(-1j * frame[p])`` (frame = nominal phase angles by default), so every
box is centred on the positive real axis. Line impedances transform as
``Z'[p, q] = Z[p, q] * exp(-1j * (frame[p] - frame[q]))``; complex power is
unchanged by the rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .devices import DeviceSet, PeriodInput, pf_slope
from .network import PHASE_ANGLES, PHASES, NetworkModel


class InfeasibleBounds(ValueError):
    """Raised when an interval becomes empty; carries the offending node-phase."""

    def __init__(self, bus_id, phase, what):
        super().__init__(f"empty {what} interval at bus {bus_id} phase {PHASES[phase]}")
        self.bus_id, self.phase, self.what = bus_id, phase, what


@dataclass
class NodalBounds:
    """Per node-phase lower/upper bounds, arrays of shape (N, 3) (flows: (E, 3))."""

    ir: np.ndarray  # (2, N, 3): [lo, hi]
    ii: np.ndarray
    vr: np.ndarray
    vi: np.ndarray
    fr: np.ndarray  # (2, E, 3)
    fi: np.ndarray
    rounds_used: int = 0
    frame: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def current_magnitude_max(self) -> np.ndarray:
        """Largest |I| over each current box (its farthest corner)."""
        r = np.max(np.abs(self.ir), axis=0)
        i = np.max(np.abs(self.ii), axis=0)
        return np.hypot(r, i)

    def contains(self, other: "NodalBounds", tol: float = 0.0) -> bool:
        """True if every box of ``other`` lies inside the matching box of ``self``."""
        for a, b in zip(self._boxes(), other._boxes()):
            if np.any(b[0] < a[0] - tol) or np.any(b[1] > a[1] + tol):
                return False
        return True

    def _boxes(self):
        return (self.ir, self.ii, self.vr, self.vi, self.fr, self.fi)

    def width(self) -> dict:
        return {k: float(np.max(b[1] - b[0])) if b.size else 0.0
                for k, b in zip(("ir", "ii", "vr", "vi", "fr", "fi"), self._boxes())}


# --- geometry helpers -----------------------------------------------------------

def sector_box(vmin, vmax, centre, theta):
    """Bounding box of {r e^{j a}: vmin<=r<=vmax, |a - centre|<=theta} (elementwise)."""
    vmin, vmax, centre = np.broadcast_arrays(*(np.asarray(v, float) for v in (vmin, vmax, centre)))
    angles = [centre - theta, centre + theta]
    pts = [r * np.exp(1j * a) for r in (vmin, vmax) for a in angles]
    # axis directions inside the window reach the outer radius
    for axis in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
        delta = np.angle(np.exp(1j * (axis - centre)))
        inside = np.abs(delta) <= theta
        pts.append(np.where(inside, vmax * np.exp(1j * axis), pts[0]))
    pts = np.stack(pts)
    return (pts.real.min(0), pts.real.max(0)), (pts.imag.min(0), pts.imag.max(0))


def _real_quotient_extremes(C, vr_lo, vr_hi, vi_lo, vi_hi):
    """min / max of Re(C / V) over the box vr x vi (box excludes 0).

    ``C`` has a trailing vertex axis (..., K); boxes have shape (...).
    The extremum of a linear functional over the image of the box under
    z -> 1/z lies on the image of its boundary; on each edge the critical
    points solve a real quadratic, so the bound is exact.
    """
    corners = [
        (vr_lo + 1j * vi_lo, vr_hi + 1j * vi_lo),
        (vr_hi + 1j * vi_lo, vr_hi + 1j * vi_hi),
        (vr_hi + 1j * vi_hi, vr_lo + 1j * vi_hi),
        (vr_lo + 1j * vi_hi, vr_lo + 1j * vi_lo),
    ]
    lo = np.full(C.shape, np.inf)
    hi = np.full(C.shape, -np.inf)
    for a, b in corners:
        v0 = a[..., None]
        d = (b - a)[..., None]
        cands = [np.zeros(C.shape), np.ones(C.shape)]
        k = C * d
        cv0 = np.conj(v0)
        cd = np.conj(d)
        qa = np.real(k * cd * cd)
        qb = 2.0 * np.real(k * cv0 * cd)
        qc = np.real(k * cv0 * cv0)
        disc = qb * qb - 4 * qa * qc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            lin = np.abs(qa) < 1e-300
            r1 = np.where(lin, np.where(np.abs(qb) > 0, -qc / qb, 0.0), (-qb + sq) / (2 * qa))
            r2 = np.where(lin, r1, (-qb - sq) / (2 * qa))
        for r in (r1, r2):
            r = np.where(ok & np.isfinite(r), np.clip(r, 0.0, 1.0), 0.0)
            cands.append(r)
        for s in cands:
            f = np.real(C / (v0 + s * d))
            lo = np.minimum(lo, f)
            hi = np.maximum(hi, f)
    return lo.min(-1), hi.max(-1)


def current_box(S_vertices, vr_lo, vr_hi, vi_lo, vi_hi):
    """Bounding box of I = conj(S / V) for S in conv(vertices), V in the box."""
    ir = _real_quotient_extremes(S_vertices, vr_lo, vr_hi, vi_lo, vi_hi)
    # II = -Im(S/V) = Re(1j * S / V)
    ii = _real_quotient_extremes(1j * S_vertices, vr_lo, vr_hi, vi_lo, vi_hi)
    return ir, ii


def _polygon_vertices(halfplanes):
    """Vertices of {(p, q): a p + b q <= c} for a short list of halfplanes."""
    pts = []
    n = len(halfplanes)
    for i in range(n):
        for j in range(i + 1, n):
            a1, b1, c1 = halfplanes[i]
            a2, b2, c2 = halfplanes[j]
            det = a1 * b2 - a2 * b1
            if abs(det) < 1e-14:
                continue
            p = (c1 * b2 - c2 * b1) / det
            q = (a1 * c2 - a2 * c1) / det
            scale = 1e-9 * (1 + abs(p) + abs(q))
            if all(a * p + b * q <= c + scale for a, b, c in halfplanes):
                pts.append(complex(p, q))
    if not pts:
        return []
    return sorted(set(np.round(pts, 15)), key=lambda z: (z.real, z.imag))


def generator_polygon(p_lo, p_hi, q_lo, q_hi, slope):
    """Vertices of the per-phase generator capability region (p.u.)."""
    hp = [(-1.0, 0.0, -p_lo), (1.0, 0.0, p_hi), (0.0, -1.0, -q_lo), (0.0, 1.0, q_hi),
          (-slope, 1.0, 0.0), (-slope, -1.0, 0.0)]
    return _polygon_vertices(hp)


def injection_vertices(net: NetworkModel, devices: DeviceSet, inp: PeriodInput):
    """Vertices of the net-injection polytope per node-phase, shape (N, 3, K), p.u."""
    n = net.n_bus
    verts = [[[0j] for _ in range(3)] for _ in range(n)]

    def minkowski(k, ph, pts):
        base = verts[k][ph]
        merged = {np.round(a + b, 15) for a in base for b in pts}
        verts[k][ph] = sorted(merged, key=lambda z: (z.real, z.imag))

    for l, ld in enumerate(devices.loads):
        k = net.bus_index(ld.bus)
        s = -(net.kw_to_pu(inp.load_p_kw[l]) + 1j * net.kw_to_pu(inp.load_q_kvar[l]))
        for ph in range(3):
            if ld.flexible:
                lo = net.kw_to_pu(ld.p_min_kw[ph])
                hi = net.kw_to_pu(ld.p_max_kw[ph])
                q = -net.kw_to_pu(inp.load_q_kvar[l][ph])
                minkowski(k, ph, [complex(-hi, q), complex(-lo, q)])
            else:
                minkowski(k, ph, [s[ph]])
    for g_idx, g in enumerate(devices.generators):
        k = net.bus_index(g.bus)
        nph = g.n_phases
        qlo, qhi = g.q_bounds_kvar
        p_hi = net.kw_to_pu(inp.gen_cap_kw[g_idx]) / nph
        p_lo = min(net.kw_to_pu(g.p_min_kw) / nph, p_hi)
        poly = generator_polygon(p_lo, p_hi, net.kw_to_pu(qlo) / nph, net.kw_to_pu(qhi) / nph,
                                 pf_slope(g.pf_min))
        if not poly:
            poly = [0j]
        for ph in np.flatnonzero(g.phases):
            minkowski(k, ph, poly)
    for cap in net.capacitor_banks:
        k = net.bus_index(cap.bus)
        for ph in range(3):
            if cap.capacity[ph] > 0:
                minkowski(k, ph, [0j, 1j * cap.capacity[ph]])
    K = max(len(v) for row in verts for v in row)
    out = np.zeros((n, 3, K), dtype=complex)
    for k in range(n):
        for ph in range(3):
            v = verts[k][ph]
            out[k, ph, :] = v + [v[0]] * (K - len(v))
    return out


def _interval_matvec(Mat, lo, hi):
    pos, neg = np.maximum(Mat, 0.0), np.minimum(Mat, 0.0)
    return pos @ lo + neg @ hi, pos @ hi + neg @ lo


def tighten_bounds(net: NetworkModel, devices: DeviceSet, inp: PeriodInput, rounds: int = 3,
                   theta_deg: float = 10.0, tol: float = 1e-6, pad_rel: float = 1e-6,
                   pad_abs: float = 1e-7, aligned: bool = True,
                   min_width: float = 0.0) -> NodalBounds:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    n, m = net.n_bus, net.n_line
    mask = net.bus_phases
    lmask = net.line_phases
    theta = np.deg2rad(theta_deg)
    frame = PHASE_ANGLES.copy() if aligned else np.zeros(3)
    rot = np.exp(-1j * frame)
    vmin = np.array([b.vmin for b in net.buses])[:, None] * np.ones(3)
    vmax = np.array([b.vmax for b in net.buses])[:, None] * np.ones(3)
    (vr0_lo, vr0_hi), (vi0_lo, vi0_hi) = sector_box(vmin, vmax, (PHASE_ANGLES - frame)[None, :],
                                                    theta)
    s = net.slack_index
    vs = net.slack_voltage() * rot
    vr0_lo[s], vr0_hi[s] = vs.real, vs.real
    vi0_lo[s], vi0_hi[s] = vs.imag, vs.imag
    vr = np.stack([vr0_lo, vr0_hi]).copy()
    vi = np.stack([vi0_lo, vi0_hi]).copy()
    vr0, vi0 = vr.copy(), vi.copy()

    S = injection_vertices(net, devices, inp)
    order = net.bfs_order()
    ends = net.line_ends
    parent = net.parent_line()
    kids = net.children()
    amp = np.full((m, 3), np.inf)
    for e, ln in enumerate(net.lines):
        if ln.ampacity is not None:
            amp[e] = ln.ampacity

    ir = np.zeros((2, n, 3))
    ii = np.zeros((2, n, 3))
    fr = np.zeros((2, m, 3))
    fi = np.zeros((2, m, 3))
    used = 0
    for rnd in range(rounds):
        used = rnd + 1
        prev = (vr.copy(), vi.copy(), ir.copy(), ii.copy())
        (irl, irh), (iil, iih) = current_box(S, vr[0], vr[1], vi[0], vi[1])
        pad_r = pad_rel * np.maximum(np.abs(irl), np.abs(irh)) + pad_abs
        pad_i = pad_rel * np.maximum(np.abs(iil), np.abs(iih)) + pad_abs
        new_ir = np.stack([irl - pad_r, irh + pad_r])
        new_ii = np.stack([iil - pad_i, iih + pad_i])
        if rnd > 0:
            new_ir = np.stack([np.maximum(new_ir[0], ir[0]), np.minimum(new_ir[1], ir[1])])
            new_ii = np.stack([np.maximum(new_ii[0], ii[0]), np.minimum(new_ii[1], ii[1])])
        ir, ii = new_ir, new_ii

        # backward pass: flow into bus t is minus the sum of injections in its subtree
        sub_r = -ir[::-1].copy()  # [lo, hi] of -I
        sub_i = -ii[::-1].copy()
        acc_r = sub_r.copy()
        acc_i = sub_i.copy()
        for k in reversed(order):
            e = parent[k]
            if e < 0:
                continue
            f = ends[e, 0]
            fr[:, e] = np.where(lmask[e], acc_r[:, k], 0.0)
            fi[:, e] = np.where(lmask[e], acc_i[:, k], 0.0)
            fr[0, e] = np.maximum(fr[0, e], -amp[e])
            fr[1, e] = np.minimum(fr[1, e], amp[e])
            fi[0, e] = np.maximum(fi[0, e], -amp[e])
            fi[1, e] = np.minimum(fi[1, e], amp[e])
            if f != s:
                acc_r[:, f] += fr[:, e]
                acc_i[:, f] += fi[:, e]
        # slack injection equals the sum of its out-flows
        ir[:, s] = 0.0
        ii[:, s] = 0.0
        for e in kids[s]:
            ir[:, s] += fr[:, e]
            ii[:, s] += fi[:, e]

        # forward pass: V_t = V_f - Z F
        for k in order:
            e = parent[k]
            if e < 0:
                continue
            f = ends[e, 0]
            Z = net.lines[e].impedance * np.outer(rot, np.conj(rot))
            R, X = Z.real, Z.imag
            a_lo, a_hi = _interval_matvec(R, fr[0, e], fr[1, e])
            b_lo, b_hi = _interval_matvec(X, fi[0, e], fi[1, e])
            c_lo, c_hi = _interval_matvec(R, fi[0, e], fi[1, e])
            d_lo, d_hi = _interval_matvec(X, fr[0, e], fr[1, e])
            dr_lo, dr_hi = a_lo - b_hi, a_hi - b_lo
            di_lo, di_hi = c_lo + d_lo, c_hi + d_hi
            on = lmask[e]
            cand_r = np.stack([vr[0, f] - dr_hi, vr[1, f] - dr_lo])
            cand_i = np.stack([vi[0, f] - di_hi, vi[1, f] - di_lo])
            vr[0, k] = np.where(on, np.maximum(vr[0, k], cand_r[0]), vr[0, k])
            vr[1, k] = np.where(on, np.minimum(vr[1, k], cand_r[1]), vr[1, k])
            vi[0, k] = np.where(on, np.maximum(vi[0, k], cand_i[0]), vi[0, k])
            vi[1, k] = np.where(on, np.minimum(vi[1, k], cand_i[1]), vi[1, k])

        for box, what in ((vr, "voltage (real)"), (vi, "voltage (imag)"),
                          (ir, "current (real)"), (ii, "current (imag)")):
            bad = (box[0] > box[1] + 1e-12) & mask
            if np.any(bad):
                k, ph = np.argwhere(bad)[0]
                raise InfeasibleBounds(net.buses[k].id, int(ph), what)
        change = max(np.max(np.abs(a - b)) for a, b in zip((vr, vi, ir, ii), prev))
        if rnd > 0 and change < tol:
            break

    for box in (vr, vi, ir, ii):
        box[:, ~mask] = 0.0
    for box in (fr, fi):
        box[:, ~lmask] = 0.0
    # guard against round-off inversions on tight boxes
    for box in (vr, vi, ir, ii, fr, fi):
        lo, hi = np.minimum(box[0], box[1]), np.maximum(box[0], box[1])
        box[0], box[1] = lo, hi
    if min_width > 0:
        # widening a current box is always sound and keeps envelope slabs from
        # getting razor thin; voltage boxes also carry the voltage limits
        for box, sel in ((ir, mask), (ii, mask)):
            mid = 0.5 * (box[0] + box[1])
            half = np.maximum(0.5 * (box[1] - box[0]), 0.5 * min_width)
            box[0] = np.where(sel, mid - half, box[0])
            box[1] = np.where(sel, mid + half, box[1])
    del vr0, vi0
    return NodalBounds(ir, ii, vr, vi, fr, fi, rounds_used=used, frame=frame)
