"""TOML run configuration.

Sections mirror the library objects: ``[scenario]`` -> ScenarioConfig,
``[profiles]`` -> ProfileShape (or CSV paths), ``[solver]`` -> SolverConfig,
``[pac]`` -> PacConfig, ``[opf]`` -> OPFOptions, ``[sweep]`` for sweep
levels and ``[compare]`` for the PAC-vs-oracle check. Unknown keys are an
error so that typos do not silently fall back to defaults. Relative paths
resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .market import SolverConfig
from .opf import OPFOptions
from .pac import PacConfig
from .scenarios import DATA, PENETRATION_SWEEP, PF_SWEEP, ProfileShape, ScenarioConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    out: Path
    seed: int | None
    sweep_axis: str = "pf"
    sweep_levels: tuple = ()
    compare_slot: int = 144
    compare_day: int = 0
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def workers(self) -> int:
        return self.scenario.workers


def _build(cls, table: dict, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(table) - names)
    if bad:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(bad)}")
    kwargs = dict(table)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) and f.type in ("tuple", tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _resolve(base: Path, p):
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def parse_config(doc: dict, base: Path = Path("."), source: Path | None = None) -> RunConfig:
    allowed = {"seed", "out", "scenario", "profiles", "solver", "pac", "opf", "sweep", "compare"}
    bad = sorted(set(doc) - allowed)
    if bad:
        raise ConfigError(f"unknown sections or keys: {', '.join(bad)}")
    pac = _build(PacConfig, doc.get("pac", {}), "pac")
    opf = _build(OPFOptions, doc.get("opf", {}), "opf")
    solver_t = dict(doc.get("solver", {}))
    solver = _build(SolverConfig, solver_t, "solver", pac=pac, opf=opf)
    prof_t = dict(doc.get("profiles", {}))
    csv_paths = {k: _resolve(base, prof_t.pop(k)) for k in ("pv", "load", "lmp") if k in prof_t}
    if csv_paths and len(csv_paths) != 3:
        raise ConfigError("[profiles] CSV overrides need all of pv, load and lmp")
    shape = _build(ProfileShape, prof_t, "profiles")
    sc_t = dict(doc.get("scenario", {}))
    for key in ("loads", "generators"):
        if key in sc_t and str(sc_t[key]).endswith(".csv"):
            sc_t[key] = _resolve(base, sc_t[key])
    if "feeder" in sc_t and str(sc_t["feeder"]).endswith(".json"):
        sc_t["feeder"] = _resolve(base, sc_t["feeder"])
    seed = doc.get("seed")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    scenario = _build(ScenarioConfig, sc_t, "scenario", shape=shape, solver=solver,
                      profile_csv=csv_paths or None, seed=seed if seed is not None else 0)
    sw = dict(doc.get("sweep", {}))
    axis = sw.pop("axis", "pf")
    if axis not in ("pf", "penetration"):
        raise ConfigError(f"[sweep] axis must be 'pf' or 'penetration', got {axis!r}")
    levels = tuple(float(v) for v in sw.pop("levels", PF_SWEEP if axis == "pf" else PENETRATION_SWEEP))
    if sw:
        raise ConfigError(f"[sweep] unknown keys: {', '.join(sorted(sw))}")
    cmp_t = dict(doc.get("compare", {}))
    slot = int(cmp_t.pop("slot", 144))
    day = int(cmp_t.pop("day", 0))
    if cmp_t:
        raise ConfigError(f"[compare] unknown keys: {', '.join(sorted(cmp_t))}")
    out = Path(_resolve(base, doc.get("out", "out")))
    return RunConfig(scenario, out, seed, axis, levels, slot, day, source, doc)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, path.parent, path)


def validate_paths(cfg: RunConfig) -> list[str]:
    """Problems with referenced files; empty when everything exists."""
    from .scenarios import feeder_paths, generator_path

    problems = []
    sc = cfg.scenario
    f, loads = feeder_paths(sc)
    for label, p in (("feeder", f), ("loads", loads)):
        if not Path(p).is_file():
            problems.append(f"{label} file not found: {p}")
    g = generator_path(sc)
    if g is not None and not g.is_file():
        problems.append(f"generators file not found: {g}")
    for k, p in (sc.profile_csv or {}).items():
        if not Path(p).is_file():
            problems.append(f"{k} profile not found: {p}")
    if not (DATA.is_dir()):
        problems.append("package data directory missing")
    return problems
