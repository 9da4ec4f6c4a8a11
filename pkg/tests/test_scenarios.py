import json
import math

import numpy as np
import pytest

from conftest import linear_pair
from tubedmpc.errors import ScenarioError
from tubedmpc.scenarios import apply_override, list_scenarios, load_scenario, resolve_alias, scenario_from_dict


def test_bundled_scenarios_are_listed():
    names = [s["name"] for s in list_scenarios()]
    assert names == ["collision", "connectivity"]


def test_connectivity_scenario():
    sc = load_scenario("connectivity")
    assert sc.agent_ids == [1, 2, 3]
    assert sc.horizon == 36
    assert sc.dt == pytest.approx(1 / 3)
    assert sc.c_bar == 0.125
    assert sc.alpha == pytest.approx(math.sqrt(2) * 0.125)
    assert [c.label for c in sc.constraints] == ["connectivity[1, 2]", "connectivity[1, 3]", "connectivity[2, 3]"]
    np.testing.assert_allclose(sc.agent(1).Q, 100 * np.eye(3))
    np.testing.assert_allclose(sc.agent(2).Q, np.diag([1.0, 1.0, 50.0]))
    np.testing.assert_allclose(sc.agent(3).xi, [1.0, 1.0, 7 * math.pi / 4])
    assert not sc.agent(1).model.discrete


def test_collision_scenario():
    sc = load_scenario("collision")
    assert len(sc.agents) == 4
    assert len(sc.constraints) == 6
    assert sc.init_guess == "clockwise"
    assert sc.graph().neighbors(1) == [2, 3, 4]


def test_overrides_and_aliases():
    sc = load_scenario("connectivity", {"xi11": 3.0, "cbar": 0.1, "tsim": 10})
    assert sc.agent(1).xi[0] == 3.0
    assert sc.c_bar == 0.1
    assert sc.tsim == 10
    assert resolve_alias("xi23") == "agents[1].xi[2]"
    assert resolve_alias("substeps") == "control_substeps"


def test_override_paths():
    data = {"agents": [{"x0": [0, 0]}]}
    apply_override(data, "agents[0].x0[1]", 2)
    apply_override(data, "latency.jitter", 0.01)
    assert data == {"agents": [{"x0": [0, 2]}], "latency": {"jitter": 0.01}}
    with pytest.raises(ScenarioError):
        apply_override(data, "agents[3].x0", [1, 1])


def test_scenario_from_file(tmp_path):
    path = tmp_path / "mine.json"
    path.write_text(json.dumps(linear_pair()))
    sc = load_scenario(str(path))
    assert sc.name == "pair"
    assert sc.agent(2).model.discrete
    np.testing.assert_allclose(sc.agent(1).u_xi, [0.0, 0.0])


@pytest.mark.parametrize("changes, message", [
    ({"agents": []}, "no agents"),
    ({"horizon": 0}, "horizon"),
    ({"c_bar": -1.0}, "positive"),
    ({"disturbance_scale": -0.5}, "disturbance_scale"),
    ({"constraints": [{"kind": "connectivity", "participants": [1, 7], "d_max": 2.0}]}, "unknown agents"),
])
def test_invalid_scenarios(changes, message):
    with pytest.raises(ScenarioError, match=message):
        scenario_from_dict(linear_pair(**changes))


def test_duplicate_agent_ids():
    data = linear_pair()
    data["agents"][1]["id"] = 1
    with pytest.raises(ScenarioError, match="duplicate"):
        scenario_from_dict(data)


def test_steady_input_outside_input_set():
    data = linear_pair()
    data["defaults"]["model"]["A"] = [[0.5, 0.0], [0.0, 0.5]]
    data["agents"][0]["xi"] = [4.0, 0.0]
    with pytest.raises(ScenarioError, match="outside U"):
        scenario_from_dict(data)


def test_wrong_dimensions():
    data = linear_pair()
    data["agents"][0]["x0"] = [0.0, 0.0, 0.0]
    with pytest.raises(ScenarioError, match="x0"):
        scenario_from_dict(data)


def test_missing_scenario():
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario("nowhere")
