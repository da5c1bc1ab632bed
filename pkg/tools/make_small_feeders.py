"""Write the hand-built 2-bus and 5-bus test feeders (IEEE-123 line codes 1, 7, 11)."""

import csv
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from dss_translate import _embed, parse_linecodes  # noqa: E402


def _line(name, f, t, phases, code, length):
    r, x, _ = code
    nodes = ["abc".index(p) + 1 for p in phases]
    R, X = _embed(r, x, nodes)
    return {"name": name, "from": f, "to": t, "phases": phases,
            "r": np.round(R, 12).tolist(), "x": np.round(X, 12).tolist(),
            "length": length, "ampacity": [400.0 if len(phases) == 3 else 200.0] * 3}


def _write(out, name, buses, lines, caps, loads, gens):
    doc = {"name": name, "base_kva": 1000.0, "base_kv": 4.16, "length_unit": "kft",
           "buses": buses, "lines": lines, "capbanks": caps}
    (out / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
    with open(out / f"{name}_loads.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", "p_kw", "q_kvar"])
        w.writerows(loads)
    with open(out / f"{name}_generators.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "bus", "phases", "p_max_kw", "pf_min", "a_p", "b_p", "a_q", "b_q"])
        w.writerows(gens)


def main(dss_dir: Path, out: Path):
    codes = parse_linecodes(dss_dir / "ieee123_dss" / "IEEELineCodes.DSS")
    bus = lambda i, ph, slack=False: {"id": i, "name": str(i), "phases": ph, "slack": slack,
                                      "vmin": 0.95, "vmax": 1.05}
    _write(out, "bus2",
           [bus(1, "abc", True), bus(2, "abc")],
           [_line("l12", 1, 2, "abc", codes["1"], 2.0)],
           [],
           [[2, "a", 60, 25], [2, "b", 60, 25], [2, "c", 60, 25]],
           [["pv2", 2, "abc", 90, 0.9, 0, 0.01, 0, ""]])
    _write(out, "bus5",
           [bus(1, "abc", True), bus(2, "abc"), bus(3, "abc"), bus(4, "ac"), bus(5, "c")],
           [_line("l12", 1, 2, "abc", codes["1"], 1.0),
            _line("l23", 2, 3, "abc", codes["1"], 0.8),
            _line("l34", 3, 4, "ac", codes["7"], 0.5),
            _line("l45", 4, 5, "c", codes["11"], 0.4)],
           [{"name": "cap3", "bus": 3, "kvar": [15.0, 15.0, 15.0]}],
           [[2, "a", 40, 20], [2, "b", 25, 12], [2, "c", 30, 15],
            [3, "a", 20, 10], [3, "b", 45, 22], [3, "c", 15, 8],
            [4, "a", 35, 18], [4, "c", 20, 10], [5, "c", 30, 14]],
           [["pv3", 3, "abc", 60, 0.9, 0, 0.01, 0, ""],
            ["pv5", 5, "c", 25, 0.9, 0, 0.01, 0, ""]])


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
