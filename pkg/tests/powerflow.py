"""Backward-forward sweep load flow, used as an independent physics oracle."""

import numpy as np


def nodal_injection_kw(net, dev, inp, gen_p_kw=None, gen_q_kvar=None):
    """Net complex injection per bus-phase in p.u. (generation minus load)."""
    S = np.zeros((net.n_bus, 3), complex)
    for l, ld in enumerate(dev.loads):
        k = net.bus_index(ld.bus)
        S[k] -= net.kw_to_pu(inp.load_p_kw[l]) + 1j * net.kw_to_pu(inp.load_q_kvar[l])
    for g, gen in enumerate(dev.generators):
        k = net.bus_index(gen.bus)
        on = np.array(gen.phases)
        p = inp.gen_cap_kw[g] if gen_p_kw is None else gen_p_kw[g]
        q = 0.0 if gen_q_kvar is None else gen_q_kvar[g]
        S[k, on] += (net.kw_to_pu(p) + 1j * net.kw_to_pu(q)) / on.sum()
    return S


def sweep(net, S, iters=200, tol=1e-12):
    """Solve V, nodal injection currents I and line flows F for injections S (p.u.)."""
    mask = net.bus_phases
    V = np.tile(net.slack_voltage(), (net.n_bus, 1)) * mask
    order = net.bfs_order()
    parent = net.parent_line()
    ends = net.line_ends
    s = net.slack_index
    for _ in range(iters):
        I = np.where(mask, np.conj(S / np.where(mask, V, 1.0)), 0.0)
        F = np.zeros((net.n_line, 3), complex)
        acc = -I.copy()  # current drawn at each bus
        for k in reversed(order):
            e = parent[k]
            if e >= 0:
                F[e] = acc[k] * net.lines[e].phase_mask
                acc[ends[e, 0]] += F[e]
        Vn = V.copy()
        for k in order:
            e = parent[k]
            if e >= 0:
                f = ends[e, 0]
                Vn[k] = (Vn[f] - net.lines[e].impedance @ F[e]) * mask[k]
        done = np.max(np.abs(Vn - V)) < tol
        V = Vn
        if done:
            break
    I = np.where(mask, np.conj(S / np.where(mask, V, 1.0)), 0.0)
    # slack injection closes KCL
    out = np.zeros(3, complex)
    for e in net.children()[s]:
        out += F[e]
    I[s] = out
    return V, I, F


def feasible_point(qp, net, dev, inp, bounds, V, I, F, gen_p_kw=None):
    """Assemble the QP vector for a load-flow solution, with exact products."""
    x = np.zeros(qp.n)
    lk = qp.index.lookup
    rot = np.exp(-1j * bounds.frame)
    S = V * np.conj(I)
    for (s, e, p), i in lk.items():
        if s in ("VR", "VI", "IR", "II", "P", "Q") or s.startswith("W"):
            v, c = V[e, p], I[e, p]
            vals = {"VR": v.real, "VI": v.imag, "IR": c.real, "II": c.imag,
                    "P": S[e, p].real, "Q": S[e, p].imag}
            if s in vals:
                x[i] = vals[s]
            else:
                vr, ir = v * rot[p], c * rot[p]
                x[i] = {"WRR": vr.real * ir.real, "WII": vr.imag * ir.imag,
                        "WRI": vr.real * ir.imag, "WIR": vr.imag * ir.real}[s]
        elif s in ("FR", "FI"):
            x[i] = F[e, p].real if s == "FR" else F[e, p].imag
        elif s in ("PS", "QS"):
            x[i] = S[e, p].real if s == "PS" else S[e, p].imag
        elif s in ("PG", "QG"):
            gen = dev.generators[e]
            p_kw = inp.gen_cap_kw[e] if gen_p_kw is None else gen_p_kw[e]
            x[i] = net.kw_to_pu(p_kw) / gen.n_phases if s == "PG" else 0.0
        elif s in ("PL", "QL"):
            arr = inp.load_p_kw if s == "PL" else inp.load_q_kvar
            x[i] = net.kw_to_pu(arr[e, p])
        elif s == "QC":
            x[i] = 0.0
    return x
