"""Run config validation, presets and hashing."""

import json
from dataclasses import replace

import pytest

from mmwave_uav_sim.config import ArraySettings, RunConfig, build_config, config_hash, parse_config
from mmwave_uav_sim.electromagnetics import AntennaKind
from mmwave_uav_sim.errors import ConfigError
from mmwave_uav_sim.raytracer import TRACE_PRESETS


def test_empty_config_uses_reference_defaults():
    cfg = build_config({})
    assert cfg.frequency == 60e9
    assert cfg.altitudes == [50.0, 100.0, 150.0]
    assert cfg.t_sam == 0.1
    assert cfg.seed == 42
    assert cfg.trace_config() == replace(TRACE_PRESETS["reference"], f=60e9, tx_power=0.0)
    assert cfg.antennas().tx.kind is AntennaKind.HALF_WAVE_DIPOLE


def test_preset_with_overrides():
    cfg = build_config({"tx_power": 10.0, "trace": {"preset": "fast", "l_max": 10, "diffuse": False}})
    trace = cfg.trace_config()
    assert trace.ray_spacing_deg == 5.0
    assert trace.l_max == 10
    assert trace.diffuse is False
    assert trace.tx_power == 10.0


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="frequncy"):
        build_config({"frequncy": 28e9})


@pytest.mark.parametrize(
    "data",
    [
        {"altitudes": []},
        {"altitudes": [100.0, -5.0]},
        {"altitudes": [100.0, 100.0]},
        {"t_sam": 0.0},
        {"scattering": {"concrete": 1.0}},
        {"trace": {"preset": "slow"}},
        {"trace": {"tile_area": 0.0}},
        {"tx_antenna": "horn"},
    ],
)
def test_invalid_fields(data):
    with pytest.raises(ConfigError, match="Invalid config"):
        build_config(data)


def test_config_must_be_an_object():
    with pytest.raises(ConfigError):
        build_config([1, 2, 3])


def test_isotropic_antennas():
    pair = build_config({"tx_antenna": "isotropic", "rx_antenna": "isotropic"}).antennas()
    assert pair.tx.kind is AntennaKind.ISOTROPIC
    assert pair.rx.kind is AntennaKind.ISOTROPIC


def test_parse_config_resolves_relative_paths(tmp_path):
    (tmp_path / "scene.json").write_text("{}")
    (tmp_path / "routes.json").write_text("{}")
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"scene_path": "scene.json", "routes_path": "routes.json", "output_dir": "out"}))
    cfg = parse_config(path)
    assert cfg.scene_path == tmp_path / "scene.json"
    assert cfg.routes_path == tmp_path / "routes.json"
    assert cfg.output_dir == tmp_path / "out"


def test_parse_config_missing_inputs(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"scene_path": "nope.json", "routes_path": "nope.json"}))
    with pytest.raises(ConfigError, match="file not found"):
        parse_config(path)

    (tmp_path / "scene.json").write_text("{}")
    path.write_text(json.dumps({"scene_path": "scene.json"}))
    with pytest.raises(ConfigError, match="together"):
        parse_config(path)


def test_parse_config_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(path)


def test_hash_ignores_paths_but_not_physics(tmp_path):
    a = RunConfig(output_dir=tmp_path / "a")
    b = RunConfig(output_dir=tmp_path / "b")
    assert config_hash(a.snapshot()) == config_hash(b.snapshot())
    assert config_hash(a.snapshot()) != config_hash(RunConfig(seed=7).snapshot())
    assert config_hash(a.snapshot()) != config_hash(a.snapshot(tx_position=(1.0, 2.0, 3.0)))
    assert len(config_hash(a.snapshot())) == 64


def test_snapshot_records_resolved_trace():
    snap = build_config({"trace": {"preset": "fast"}}).snapshot(scene_sha256="x")
    assert snap["trace"]["ray_spacing_deg"] == 5.0
    assert snap["scene_sha256"] == "x"
    assert "output_dir" not in snap


def test_array_settings():
    tx, rx = ArraySettings(tx=[(0.0, 0.0, 0.0), (0.0, 0.5, 0.0)]).descriptors()
    assert len(tx) == 2 and len(rx) == 1
    with pytest.raises(ValueError):
        ArraySettings(rx=[])
