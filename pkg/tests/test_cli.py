"""Command line: subcommands, output and exit codes."""

import json
import sys

import pytest
from loguru import logger

from mmwave_uav_sim import __version__
from mmwave_uav_sim.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main
from mmwave_uav_sim.dataset import write_dataset
from tests.test_dataset import tiny_dataset


@pytest.fixture(autouse=True)
def restore_default_sink():
    """main() points loguru at the captured stderr; put the default sink back afterwards."""
    yield
    logger.remove()
    logger.add(sys.stderr)


@pytest.fixture
def dataset_dir(tmp_path):
    write_dataset(tiny_dataset(), tmp_path / "ds", config_hash="abc")
    return tmp_path / "ds"


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_generate_scenario_prints_paths(tmp_path, capsys):
    assert main(["generate-scenario", "--out", str(tmp_path), "--seed", "7"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines == [str(tmp_path / "scene.json"), str(tmp_path / "routes.json")]


def test_simulate_missing_config_is_exit_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_simulate_invalid_config_is_exit_2(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"altitudes": [-1]}))
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_simulate_prints_dataset_hash(tmp_path, small_inputs, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_inputs))
    code = main(["simulate", "--config", str(path), "--out", str(tmp_path / "out"), "--seed", "3"])
    assert code == EXIT_OK
    digest = capsys.readouterr().out.strip()
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert digest == manifest["dataset_hash"]


def test_export_sql_to_file(dataset_dir, tmp_path):
    out = tmp_path / "dump.sql"
    assert main(["export-sql", "--dataset", str(dataset_dir), "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert text.count("CREATE TABLE") == 4
    assert text.count("INSERT INTO rays") == 2


def test_plot_data_to_stdout(dataset_dir, capsys):
    args = ["plot-data", "--dataset", str(dataset_dir), "--uav", "0", "--episode", "0", "--metric", "delay"]
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "time_s,strongest,aggregate"


def test_plot_data_unknown_episode_is_exit_3(dataset_dir):
    args = ["plot-data", "--dataset", str(dataset_dir), "--uav", "0", "--episode", "9"]
    assert main(args) == EXIT_RUNTIME


def test_missing_dataset_is_exit_3(tmp_path):
    assert main(["export-sql", "--dataset", str(tmp_path / "nothing")]) == EXIT_RUNTIME


def test_mimo_prints_matrix(dataset_dir, tmp_path, capsys):
    array = tmp_path / "rx.json"
    array.write_text(json.dumps({"elements": [[0, 0, 0], [0, 0.5, 0]]}))
    assert main(["mimo", "--dataset", str(dataset_dir), "--receiver", "0", "--rx-array", str(array)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["rank"] == 1
    assert len(doc["real"]) == 2 and len(doc["real"][0]) == 1
    assert doc["f"] == 60e9


def test_mimo_unknown_receiver_is_exit_3(dataset_dir):
    assert main(["mimo", "--dataset", str(dataset_dir), "--receiver", "99"]) == EXIT_RUNTIME


def test_mimo_bad_array_file_is_exit_2(dataset_dir, tmp_path):
    array = tmp_path / "tx.json"
    array.write_text(json.dumps({"elements": []}))
    assert main(["mimo", "--dataset", str(dataset_dir), "--receiver", "0", "--tx-array", str(array)]) == EXIT_CONFIG
