"""Translate the IEEE 13- and 123-bus OpenDSS decks into the package feeder schema.

Usage::

    python tools/dss_translate.py /path/to/cases/dss  src/reactive_market/data

The decks are the stock ones (as distributed e.g. with the ``distopf`` wheel).
Simplifications applied here:

* ideal regulators are collapsed into their primary bus,
* normally open switches and the unloaded 480 V transformer branch are dropped,
* IEEE-13: bus 670 (a mid-line spot load) is folded into the 632-671 segment,
  its load split equally between the two ends, and XFM1 (633-634) becomes a
  series impedance referred to 4.16 kV.

Delta loads are split equally across their two phases; three-phase loads
equally across a, b, c.
"""

from __future__ import annotations

import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

KFT_PER_MILE = 5.28


def _lower_tri(text: str, n: int) -> np.ndarray:
    rows = [r.split() for r in text.strip().strip("[]()").split("|")]
    m = np.zeros((n, n))
    for i, r in enumerate(rows):
        for j, v in enumerate(r):
            m[i, j] = m[j, i] = float(v)
    return m


def parse_linecodes(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray, str]]:
    """name -> (r, x, unit) with r, x in the natural phase order of the code."""
    codes: dict = {}
    current = None
    text = path.read_text().replace("\r", "")
    # stock 13-bus file comments out the original 606 code with /* ... */
    text = re.sub(r"/\*.*?\*/", "", text, flags=re.S)
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("!") or line.startswith("//"):
            continue
        m = re.match(r"new\s+linecode\.(\S+)(.*)", line, re.I)
        if m:
            current = m.group(1).lower()
            nph = int(re.search(r"nphases=(\d)", line, re.I).group(1))
            unit = re.search(r"units=(\w+)", line, re.I)
            codes[current] = {"n": nph, "unit": unit.group(1).lower() if unit else "kft"}
            continue
        if current is None or not line.startswith("~"):
            continue
        for key in ("rmatrix", "xmatrix"):
            mm = re.search(key + r"\s*=\s*([\[(][^\])]*[\])])", line, re.I)
            if mm:
                codes[current][key[0]] = _lower_tri(mm.group(1), codes[current]["n"])
        mu = re.search(r"units=(\w+)", line, re.I)
        if mu:
            codes[current]["unit"] = mu.group(1).lower()
    return {k: (v["r"], v["x"], v["unit"]) for k, v in codes.items() if "r" in v}


def _bus_nodes(token: str, nphases: int) -> tuple[str, list[int]]:
    parts = token.split(".")
    name = parts[0].lower()
    nodes = [int(p) for p in parts[1:] if p not in ("0",)]
    if not nodes:
        nodes = [1, 2, 3][:nphases]
    return name, nodes


def _embed(r: np.ndarray, x: np.ndarray, nodes: list[int]):
    R = np.zeros((3, 3))
    X = np.zeros((3, 3))
    for i, a in enumerate(nodes):
        for j, b in enumerate(nodes):
            R[a - 1, b - 1] = r[i, j]
            X[a - 1, b - 1] = x[i, j]
    return R, X


def _seq_block(r1, r0, x1, x0, nodes):
    zs = (2 * complex(r1, x1) + complex(r0, x0)) / 3
    zm = (complex(r0, x0) - complex(r1, x1)) / 3
    n = len(nodes)
    z = np.full((n, n), zm) + np.eye(n) * (zs - zm)
    return _embed(z.real, z.imag, nodes)


def _props(line: str) -> dict:
    return {k.lower(): v for k, v in re.findall(r"(\w+)\s*=\s*(\S+)", line)}


def parse_lines(master: Path, codes) -> list[dict]:
    out = []
    for raw in master.read_text().replace("\r", "").splitlines():
        line = raw.strip()
        m = re.match(r"new\s+line\.(\S+)\s+(.*)", line, re.I)
        if not m:
            continue
        name, props = m.group(1), _props(m.group(2))
        nph = int(props.get("phases", 3))
        b1, n1 = _bus_nodes(props["bus1"], nph)
        b2, n2 = _bus_nodes(props["bus2"], nph)
        if n1 != n2:
            raise ValueError(f"{name}: mismatched node lists")
        length = float(props.get("length", 1.0))
        if "linecode" in props:
            r, x, unit = codes[props["linecode"].lower()]
            lunit = props.get("units", unit).lower()
            if unit == "mi" and lunit == "ft":
                r, x = r / 5280.0, x / 5280.0
            elif unit != lunit and not (unit == "kft" and lunit == "kft"):
                raise ValueError(f"{name}: unit mismatch {unit}/{lunit}")
            R, X = _embed(r, x, n1)
        else:
            R, X = _seq_block(float(props.get("r1", 0)), float(props.get("r0", 0)),
                              float(props.get("x1", 0)), float(props.get("x0", 0)), n1)
        out.append({"name": name, "from": b1, "to": b2,
                    "phases": "".join("abc"[k - 1] for k in sorted(n1)),
                    "r": R, "x": X, "length": length})
    return out


def parse_loads(path: Path) -> list[tuple[str, str, float, float]]:
    rows = []
    for raw in path.read_text().replace("\r", "").splitlines():
        line = raw.strip()
        m = re.match(r"new\s+load\.(\S+)\s+(.*)", line, re.I)
        if not m:
            continue
        props = _props(m.group(2))
        nph = int(props.get("phases", 1))
        bus, nodes = _bus_nodes(props["bus1"], 3 if nph == 3 else 1)
        kw, kvar = float(props["kw"]), float(props["kvar"])
        delta = props.get("conn", "wye").lower() == "delta"
        if nph == 3:
            nodes = [1, 2, 3]
        elif delta and len(nodes) == 1:
            # 1-phase delta on node k connects k to k+1
            nodes = [nodes[0], nodes[0] % 3 + 1]
        for k in nodes:
            rows.append((bus, "abc"[k - 1], kw / len(nodes), kvar / len(nodes)))
    return rows


def parse_caps(master: Path) -> list[tuple[str, list[float]]]:
    caps = []
    for raw in master.read_text().replace("\r", "").splitlines():
        m = re.match(r"new\s+capacitor\.(\S+)\s+(.*)", raw.strip(), re.I)
        if not m:
            continue
        props = _props(m.group(2))
        nph = int(props.get("phases", 3))
        bus, nodes = _bus_nodes(props["bus1"], nph)
        kvar = [0.0, 0.0, 0.0]
        for k in nodes:
            kvar[k - 1] = float(props["kvar"]) / len(nodes)
        caps.append((bus, kvar))
    return caps


def _finish(name, lines, loads, caps, slack, renames, drop, out_dir, ampacity_a=None):
    def ren(b):
        return renames.get(b, b)

    kept = []
    for ln in lines:
        f, t = ren(ln["from"]), ren(ln["to"])
        if ln["name"].lower() in drop or f == t:
            continue
        kept.append(dict(ln, **{"from": f, "to": t}))

    # orient away from the slack, assign integer ids (slack = 1, BFS order)
    adj: dict[str, list] = {}
    for ln in kept:
        adj.setdefault(ln["from"], []).append(ln)
        adj.setdefault(ln["to"], []).append(ln)
    order, seen, oriented = [slack], {slack}, []
    k = 0
    while k < len(order):
        b = order[k]
        k += 1
        for ln in adj.get(b, []):
            other = ln["to"] if ln["from"] == b else ln["from"]
            if other in seen:
                continue
            seen.add(other)
            order.append(other)
            oriented.append(dict(ln, **{"from": b, "to": other}))
    if len(oriented) != len(kept):
        raise ValueError(f"{name}: feeder is not a tree ({len(kept)} lines, {len(order)} buses)")
    ids = {b: i + 1 for i, b in enumerate(order)}

    phases = {b: set() for b in order}
    phases[slack] = set("abc")
    for ln in oriented:
        phases[ln["from"]] |= set(ln["phases"])
        phases[ln["to"]] |= set(ln["phases"])

    buses = [{"id": ids[b], "name": b, "phases": "".join(sorted(phases[b])),
              "slack": b == slack, "vmin": 0.95, "vmax": 1.05} for b in order]
    jlines = []
    for ln in oriented:
        rec = {"name": ln["name"], "from": ids[ln["from"]], "to": ids[ln["to"]],
               "phases": ln["phases"], "r": np.round(ln["r"], 12).tolist(),
               "x": np.round(ln["x"], 12).tolist(), "length": ln["length"]}
        if ampacity_a is not None:
            rec["ampacity"] = [ampacity_a] * 3
        jlines.append(rec)
    jcaps = [{"name": f"cap_{ren(b)}", "bus": ids[ren(b)], "kvar": kv} for b, kv in caps]
    doc = {"name": name, "base_kva": 1000.0, "base_kv": 4.16, "length_unit": "kft",
           "buses": buses, "lines": jlines, "capbanks": jcaps}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")

    agg: dict = {}
    for bus, ph, kw, kvar in loads:
        bus = ren(bus)
        if bus not in ids:
            raise ValueError(f"{name}: load on dropped bus {bus}")
        if ph not in phases[bus]:
            raise ValueError(f"{name}: load on missing phase {bus}.{ph}")
        key = (ids[bus], ph)
        p, q = agg.get(key, (0.0, 0.0))
        agg[key] = (p + kw, q + kvar)
    with open(out_dir / f"{name}_loads.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", "p_kw", "q_kvar"])
        for (b, ph), (p, q) in sorted(agg.items()):
            w.writerow([b, ph, f"{p:.6g}", f"{q:.6g}"])
    print(f"{name}: {len(buses)} buses, {len(jlines)} lines, {len(agg)} load entries, "
          f"{sum(p for p, _ in agg.values()):.1f} kW")


def translate_123(src: Path, out_dir: Path):
    d = src / "ieee123_dss"
    codes = parse_linecodes(d / "IEEELineCodes.DSS")
    lines = parse_lines(d / "IEEE123Master.dss", codes)
    loads = parse_loads(d / "IEEE123Loads.DSS")
    caps = parse_caps(d / "IEEE123Master.dss")
    renames = {"150r": "150", "149": "150", "9r": "9", "25r": "25", "160r": "160"}
    drop = {"sw1", "sw6", "sw7", "sw8"}
    _finish("ieee123", lines, loads, caps, "150", renames, drop, out_dir)


def translate_13(src: Path, out_dir: Path):
    d = src / "ieee13_dss"
    master = d / "IEEE13Nodeckt.dss"
    codes = parse_linecodes(master)
    lines = parse_lines(master, codes)
    loads = parse_loads(master)
    caps = parse_caps(master)
    by_name = {ln["name"].lower(): ln for ln in lines}
    a, b = by_name.pop("632670"), by_name.pop("670671")
    merged = {"name": "632671", "from": "632", "to": "671", "phases": "abc",
              "r": a["r"] * a["length"] + b["r"] * b["length"],
              "x": a["x"] * a["length"] + b["x"] * b["length"], "length": 1.0}
    for ln in by_name.values():
        # r, x already per ft; report the line in kft
        ln["r"], ln["x"], ln["length"] = ln["r"] * 1000, ln["x"] * 1000, ln["length"] / 1000
    # XFM1: 500 kVA, %r = 0.55 per winding, X = 2 %, referred to 4.16 kV
    zb = 4.16**2 / 0.5
    xfm = {"name": "xfm1", "from": "633", "to": "634", "phases": "abc",
           "r": np.eye(3) * 0.011 * zb, "x": np.eye(3) * 0.02 * zb, "length": 1.0}
    lines = list(by_name.values()) + [merged, xfm]
    split = []
    for bus, ph, kw, kvar in loads:
        if bus == "670":
            split += [("632", ph, kw / 2, kvar / 2), ("671", ph, kw / 2, kvar / 2)]
        else:
            split.append((bus, ph, kw, kvar))
    # the 671-692 switch is closed with ~zero impedance: treat 692 as part of 671
    _finish("ieee13", lines, split, caps, "650", {"rg60": "650", "692": "671"}, set(), out_dir)


if __name__ == "__main__":
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2])
    translate_123(src, dst)
    translate_13(src, dst)
