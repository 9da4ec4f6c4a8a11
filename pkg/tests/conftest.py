import copy
import math

import numpy as np
import pytest

from tubedmpc import config
from tubedmpc.model import LinearLTI, SubsystemDynamics
from tubedmpc.refupdate import consistency_sets
from tubedmpc.scenarios import scenario_from_dict
from tubedmpc.setgeom import Box
from tubedmpc.subsystem import SubsystemSpec
from tubedmpc.tube import build_tube

C_BAR = 0.05

# Two planar single integrators x+ = x + u that must stay within 2 m of each other.
LINEAR_PAIR = {
    "name": "pair",
    "description": "two planar single integrators with a connectivity constraint",
    "dt": 1.0,
    "horizon": 5,
    "tsim": 6,
    "control_substeps": 1,
    "disturbance_scale": 1.0,
    "c_bar": C_BAR,
    "defaults": {
        "model": {"kind": "lti", "A": [[1.0, 0.0], [0.0, 1.0]], "B": [[1.0, 0.0], [0.0, 1.0]], "discrete": True},
        "lambda": [0.5, 0.5],
        "W": [0.02, 0.02],
        "U": [1.0, 1.0],
        "Q": 1.0,
        "R": 1.0,
    },
    "agents": [
        {"id": 1, "x0": [0.0, 0.0], "xi": [1.0, 0.0]},
        {"id": 2, "x0": [0.0, 1.0], "xi": [1.0, 1.0]},
    ],
    "constraints": [{"kind": "connectivity", "participants": [1, 2], "d_max": 2.0}],
}


def linear_pair(**changes):
    data = copy.deepcopy(LINEAR_PAIR)
    data.update(changes)
    return data


def linear_spec(agent, x0, xi, c_bar=C_BAR):
    """Planar single integrator with the tube of the pair scenario and its consistency sets."""
    model = LinearLTI(np.eye(2), np.eye(2), discrete=True)
    tube = build_tube(model, 0.5 * np.eye(2), Box.symmetric([0.02, 0.02]), Box.symmetric([1.0, 1.0]), dt=1.0)
    r = math.sqrt(2) * c_bar
    spec = SubsystemSpec(agent, SubsystemDynamics(model, dt=1.0, substeps=1), tube, np.eye(2), np.eye(2),
                         np.array(x0, float), np.array(xi, float), np.zeros(2), r, r)
    return spec.evolve(consistency=consistency_sets(spec, c_bar))


@pytest.fixture(autouse=True)
def tubedmpc_home(tmp_path, monkeypatch):
    """Point the config directory and event log at a temporary home."""
    home = tmp_path / "tubedmpc-home"
    monkeypatch.setattr(config, "CONFIG_DIR", home)
    monkeypatch.setattr(config, "CONFIG_FILE", home / "config.json")
    monkeypatch.setattr(config, "RUNS_DIR", home / "runs")
    monkeypatch.setitem(config.DEFAULT_CONFIG, "output_dir", str(home / "runs"))
    return home


@pytest.fixture(scope="session")
def pair_scenario():
    return scenario_from_dict(linear_pair())


@pytest.fixture(scope="session")
def pair_init(pair_scenario):
    from tubedmpc.harness import initialize

    return initialize(pair_scenario, certify_samples=200)
