from pathlib import Path

import numpy as np
import pytest

from reactive_market.devices import DeviceSet, nominal_input, read_generators, read_loads
from reactive_market.network import load_network

DATA = Path(__file__).resolve().parents[1] / "src" / "reactive_market" / "data"
ROOT = Path(__file__).resolve().parents[1]

# operating points used wherever a feeder is solved at "nominal" conditions
LOAD_LEVEL = {"bus2": 1.0, "bus5": 1.0, "ieee13": 0.4, "ieee123": 0.35}


def feeder(name, with_generators=True):
    net = load_network(DATA / f"{name}.json")
    gpath = DATA / f"{name}_generators.csv"
    gens = tuple(read_generators(gpath)) if with_generators and gpath.exists() else ()
    dev = DeviceSet(gens, tuple(read_loads(DATA / f"{name}_loads.csv")))
    return net, dev


def nominal(name, pv=0.8, lmp=0.05):
    net, dev = feeder(name)
    return net, dev, nominal_input(dev, lmp=lmp, pv=pv, load=LOAD_LEVEL[name])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bus2_day():
    """One cleared day on the 2-bus feeder with its fixed 90 kW PV."""
    from reactive_market.scenarios import ProfileShape, ScenarioConfig, run_point

    return run_point(ScenarioConfig(feeder="bus2", generators="bus2",
                                    shape=ProfileShape(load_mean=0.8), seed=1))
