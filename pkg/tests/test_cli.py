import json

import pytest

from conftest import linear_pair
from tubedmpc import __version__, config, events
from tubedmpc.agents import ControllerMode
from tubedmpc.cli import main, parse_mode
from tubedmpc.errors import ScenarioError


@pytest.fixture
def pair_file(tmp_path):
    path = tmp_path / "pair.json"
    path.write_text(json.dumps(linear_pair()))
    config.set_config_value("certify_samples", 100)
    return str(path)


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out


def test_lists_bundled_scenarios(capsys):
    main(["scenarios"])
    out = capsys.readouterr().out
    assert "Bundled Scenarios (2)" in out
    assert "connectivity" in out


def test_config_roundtrip(capsys):
    main(["config", "set", "runs", "4"])
    main(["config", "get", "runs"])
    main(["config", "list"])
    out = capsys.readouterr().out
    assert "Set runs: 4" in out
    assert "runs: 4" in out
    assert "certify_samples: 1000" in out


def test_config_errors_exit(capsys):
    with pytest.raises(SystemExit) as info:
        main(["config", "set", "colour", "blue"])
    assert info.value.code == 1
    assert "Error: unknown config key" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        main(["config", "get"])


def test_unknown_scenario_exits(capsys):
    with pytest.raises(SystemExit) as info:
        main(["init-report", "--scenario", "nowhere"])
    assert info.value.code == 1
    assert "not found" in capsys.readouterr().out


@pytest.mark.parametrize("text, expected", [
    ("proposed", ControllerMode.proposed()),
    ("proposed:3", ControllerMode.proposed(3)),
    ("fixedref", ControllerMode.fixed_reference()),
    ("sequential", ControllerMode("sequential")),
])
def test_parse_mode(text, expected):
    assert parse_mode(text) == expected


@pytest.mark.parametrize("text", ["fixedref:2", "jacobi"])
def test_parse_mode_errors(text):
    with pytest.raises(ScenarioError):
        parse_mode(text)


def test_init_report(pair_file, tmp_path, capsys):
    out_dir = tmp_path / "ingredients"
    main(["init-report", "--scenario", pair_file, "--out", str(out_dir)])
    out = capsys.readouterr().out
    assert "Initialization: pair" in out
    assert "Terminal certificate: OK" in out
    assert (out_dir / "pair_init.json").exists()
    assert events.get_recent_events(1)[0]["event"] == "initialized"


def test_run_writes_results(pair_file, tmp_path, capsys):
    out_dir = tmp_path / "runs"
    main(["run", "--scenario", pair_file, "--runs", "1", "--seed", "2", "--tsim", "3", "--out", str(out_dir),
          "--set", "agents[1].x0[0]=0.5"])
    out = capsys.readouterr().out
    assert "pair / proposed (1 run(s))" in out
    with open(out_dir / "pair_proposed_2_metrics.json") as f:
        data = json.load(f)
    assert data["settings"]["overrides"] == ["agents[1].x0[0]=0.5"]
    assert data["runs"][0]["steps"] == 3
    assert events.get_run_stats("pair")["runs_finished"] == 1


def test_run_rejects_iterations_for_baselines(pair_file, capsys):
    with pytest.raises(SystemExit):
        main(["run", "--scenario", pair_file, "--mode", "fixedref", "--iterations", "2"])
    assert "--iterations only applies" in capsys.readouterr().out


def test_compare_writes_table(pair_file, tmp_path, capsys):
    out_dir = tmp_path / "cmp"
    main(["compare", "--scenario", pair_file, "--modes", "proposed", "sequential", "--runs", "1", "--tsim", "2",
          "--no-disturbance", "--out", str(out_dir)])
    out = capsys.readouterr().out
    assert "normalized by proposed" in out
    assert "sequential-direct" in out
    assert (out_dir / "pair_compare_0.csv").exists()


def test_events_command(capsys):
    events.log_event("theorem_violation", "pair", "proposed", 0, 1, 3, kind="tube_membership")
    main(["events", "--limit", "5"])
    out = capsys.readouterr().out
    assert "Guarantee violations:  1" in out
    assert "tube_membership: 1" in out
    assert "theorem violation  pair proposed run 0 agent 1 k=3" in out
