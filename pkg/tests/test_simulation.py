"""End-to-end runs: record layout, determinism, checkpoints and config errors."""

import os
from collections import defaultdict

import pytest

from mmwave_uav_sim.config import build_config
from mmwave_uav_sim.dataset import read_dataset
from mmwave_uav_sim.errors import ConfigError
from mmwave_uav_sim.simulation import (
    PARTIAL_DIR,
    SceneJob,
    SceneResult,
    SceneState,
    SceneTracer,
    SimulationRunner,
    run_simulation,
)


def test_run_writes_expected_records(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    manifest = run_simulation(cfg, out_dir=tmp_path / "out")
    assert manifest.counts["episodes"] == 1
    assert manifest.counts["scenes"] == 3
    assert manifest.counts["receivers"] == 6

    data = read_dataset(tmp_path / "out")
    data.validate(l_max=5)
    assert [s.time for s in data.scenes] == [0.0, 0.1, 0.2]
    assert [r.receiver_id for r in data.receivers] == list(range(6))
    assert [r.uav_id for r in data.receivers] == [0, 1] * 3

    first = data.receivers[0]
    # domestico: 0.196 m tall body, antenna 5 cm below it
    assert first.rx_position == pytest.approx([-40.0, -5.0, 20.0 - 0.098 - 0.05])
    assert first.los
    assert first.ray_count >= 2
    assert first.total_power_coherent is not None

    for ray in data.rays:
        assert ray.ray_id == ray.receiver_id * 5 + ray.rank
        assert ray.rank < 5
    los_rays = [r for r in data.rays if r.receiver_id == 0 and r.signature == "Tx-Rx"]
    assert len(los_rays) == 1

    pose = data.scenes[1].poses[0]
    assert pose.position == pytest.approx([-39.0, -5.0, 20.0])
    assert data.episodes[0].config["trace"]["l_max"] == 5
    assert not (tmp_path / "out" / PARTIAL_DIR).exists()


def test_identical_runs_give_identical_datasets(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    a = run_simulation(cfg, out_dir=tmp_path / "a")
    b = run_simulation(cfg, out_dir=tmp_path / "b")
    assert a.dataset_hash == b.dataset_hash
    assert (tmp_path / "a" / "rays.jsonl").read_bytes() == (tmp_path / "b" / "rays.jsonl").read_bytes()


def test_seed_changes_config_hash(tmp_path, small_inputs):
    a = SimulationRunner(build_config(small_inputs), out_dir=tmp_path / "a")
    b = SimulationRunner(build_config({**small_inputs, "seed": 9}), out_dir=tmp_path / "b")
    a.prepare()
    b.prepare()
    assert a.config_hash != b.config_hash


async def test_runner_resumes_from_checkpoint(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    reference = await SimulationRunner(cfg, out_dir=tmp_path / "reference").run()

    runner = SimulationRunner(cfg, out_dir=tmp_path / "resumed")
    runner.prepare()
    job = runner.jobs[0][1]
    result = SceneTracer(runner.context).trace_scene(job)
    runner._save_checkpoint(job, result)

    manifest = await runner.run()
    assert manifest.dataset_hash == reference.dataset_hash
    states = [j.state for j in runner.jobs[0]]
    assert states == [SceneState.DONE, SceneState.RESUMED, SceneState.DONE]


async def test_unreadable_checkpoint_is_retraced(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    runner = SimulationRunner(cfg, out_dir=tmp_path / "out")
    runner.prepare()
    path = runner._checkpoint_path(runner.jobs[0][0])
    path.parent.mkdir(parents=True)
    path.write_text("{truncated")

    await runner.run()
    assert runner.jobs[0][0].state is SceneState.DONE


def test_scene_result_json_round_trip(small_inputs, tmp_path):
    runner = SimulationRunner(build_config(small_inputs), out_dir=tmp_path)
    runner.prepare()
    job = SceneJob(episode_id=0, scene_index=0, scene_id=0, altitude=20.0, time=0.0)
    result = SceneTracer(runner.context).trace_scene(job)
    again = SceneResult.from_json(result.to_json())
    assert again.to_json() == result.to_json()
    assert job.tag == "[ep 0 scene 0]"


def test_altitude_below_body_is_a_config_error(tmp_path, small_inputs):
    cfg = build_config({**small_inputs, "altitudes": [0.15]})
    with pytest.raises(ConfigError, match="does not clear"):
        SimulationRunner(cfg, out_dir=tmp_path).prepare()


def test_runner_argument_errors(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    with pytest.raises(ConfigError):
        SimulationRunner(cfg, out_dir=tmp_path, parallel=0)
    with pytest.raises(ConfigError, match="output directory"):
        SimulationRunner(cfg)


def test_broken_scene_file_is_a_config_error(tmp_path, small_inputs):
    bad = tmp_path / "bad_scene.json"
    bad.write_text('{"materials": {}, "boxes": [{"min": [0, 0, 0], "max": [1, 1, 1], "material": "x"}]}')
    cfg = build_config({**small_inputs, "scene_path": str(bad)})
    with pytest.raises(ConfigError, match="unknown material"):
        run_simulation(cfg, out_dir=tmp_path / "out")
    assert not (tmp_path / "out" / "manifest.json").exists()


@pytest.mark.slow
def test_parallel_run_matches_serial(tmp_path, small_inputs):
    cfg = build_config(small_inputs)
    serial = run_simulation(cfg, out_dir=tmp_path / "serial")
    parallel = run_simulation(cfg, out_dir=tmp_path / "parallel", parallel=2)
    assert parallel.dataset_hash == serial.dataset_hash


@pytest.mark.slow
def test_generated_scenario_run(tmp_path):
    cfg = build_config({"altitudes": [100.0], "duration": 0.0, "trace": {"preset": "fast", "l_max": 10}})
    manifest = run_simulation(cfg, out_dir=tmp_path)
    assert (tmp_path / "scenario" / "scene.json").is_file()
    assert manifest.counts["receivers"] == 10
    read_dataset(tmp_path).validate(l_max=10)


@pytest.mark.slow
def test_default_config_canonical_episode(tmp_path):
    """One 100 m episode with every reference default: top-L respected, both LOS and
    NLOS receivers, and strong power swings along the routes."""
    cfg = build_config({"altitudes": [100.0]})
    assert cfg.trace.preset == "reference" and cfg.duration == 5.0
    run_simulation(cfg, out_dir=tmp_path, parallel=min(4, os.cpu_count() or 1))
    data = read_dataset(tmp_path)
    data.validate(l_max=25)

    assert len(data.scenes) == 51
    assert all(r.ray_count <= 25 for r in data.receivers)
    assert any(not r.los for r in data.receivers)
    assert any(r.los for r in data.receivers)

    powers = defaultdict(list)
    states = defaultdict(set)
    for r in data.receivers:
        states[r.uav_id].add(r.los)
        if r.total_power_coherent is not None:
            powers[r.uav_id].append(r.total_power_coherent)
    swing = {uav: max(p) - min(p) for uav, p in powers.items()}
    assert len(swing) == 10
    # UAVs that pass behind the corner block lose the direct ray
    crossing = [uav for uav, seen in states.items() if seen == {True, False}]
    assert crossing
    assert max(swing[uav] for uav in crossing) >= 20.0
    assert sum(s >= 20.0 for s in swing.values()) >= 5
