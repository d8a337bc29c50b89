"""Episode and scene loop: place UAVs, trace every receiver, persist records.

One episode per configured altitude; one scene per sample time ``k * t_sam``.
Each finished scene is checkpointed under ``<out>/.partial/<config_hash>/`` so
an interrupted run resumes where it stopped and still produces the same
bytes. Scenes may be traced in a process pool; results are consumed and
checkpointed strictly in scene order.
"""

import asyncio
import json
import os
import shutil
import time
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from mmwave_uav_sim import canonical
from mmwave_uav_sim.channel import (
    AntennaPair,
    ChannelRay,
    compute_metrics,
    mean_delay,
    rms_delay_spread,
    total_power,
)
from mmwave_uav_sim.config import RunConfig, config_hash
from mmwave_uav_sim.dataset import (
    Dataset,
    EpisodeRecord,
    InteractionRecord,
    Manifest,
    PoseRecord,
    RayRecord,
    ReceiverRecord,
    SceneRecord,
    write_dataset,
)
from mmwave_uav_sim.electromagnetics import itu_material
from mmwave_uav_sim.errors import ConfigError, RouteError, SceneError
from mmwave_uav_sim.geometry import Scene, load_scene
from mmwave_uav_sim.mobility import (
    RoutePlan,
    VehicleModel,
    load_routes_file,
    pose_at,
    sample_count,
    vehicle_model,
    vehicle_placement,
)
from mmwave_uav_sim.raytracer import TraceConfig, Tracer, select_top_l
from mmwave_uav_sim.scenario import ScenarioParams, generate_scenario

PARTIAL_DIR = ".partial"
SCENARIO_DIR = "scenario"


class SceneState(Enum):
    """Scene lifecycle inside a run."""

    PENDING = "pending"  # Not traced yet
    RESUMED = "resumed"  # Loaded from a checkpoint
    TRACING = "tracing"  # Submitted for tracing
    DONE = "done"  # Traced and checkpointed


@dataclass
class SceneResult:
    """Records produced by one scene."""

    scene: SceneRecord
    receivers: list[ReceiverRecord]
    rays: list[RayRecord]

    def to_json(self) -> str:
        return canonical.dumps(
            {
                "scene": self.scene.model_dump(mode="json"),
                "receivers": [r.model_dump(mode="json") for r in self.receivers],
                "rays": [r.model_dump(mode="json") for r in self.rays],
            },
            sort_keys=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneResult":
        data = json.loads(text)
        return cls(
            scene=SceneRecord.model_validate(data["scene"]),
            receivers=[ReceiverRecord.model_validate(r) for r in data["receivers"]],
            rays=[RayRecord.model_validate(r) for r in data["rays"]],
        )


@dataclass
class SceneJob:
    episode_id: int
    scene_index: int
    scene_id: int
    altitude: float  # m
    time: float  # s
    state: SceneState = SceneState.PENDING
    result: Optional[SceneResult] = field(default=None, repr=False)

    @property
    def tag(self) -> str:
        return f"[ep {self.episode_id} scene {self.scene_index}]"


@dataclass(frozen=True, eq=False)
class RunContext:
    """Everything a worker needs to trace any scene of the run."""

    scene: Scene
    plan: RoutePlan
    trace: TraceConfig
    antennas: AntennaPair
    tx: tuple[float, float, float]


class SceneTracer:
    """Turns scene jobs into records. One instance per process."""

    def __init__(self, context: RunContext):
        self.context = context
        self.tracer = Tracer(context.scene, context.trace, np.asarray(context.tx, dtype=np.float64))
        self.models: list[VehicleModel] = [vehicle_model(v.model) for v in context.plan.vehicles]

    def trace_scene(self, job: SceneJob) -> SceneResult:
        ctx = self.context
        cfg = ctx.trace
        start = time.perf_counter()
        vehicles = ctx.plan.vehicles
        placements = [
            vehicle_placement(v, ctx.plan, job.time, job.altitude, rx_offset=cfg.rx_offset, model=m)
            for v, m in zip(vehicles, self.models)
        ]
        snapshot = self.tracer.snapshot([p.body_mesh for p in placements])
        materials = snapshot.scene.materials

        poses = []
        for v, model in zip(vehicles, self.models):
            pose = pose_at(ctx.plan.route(v.route_id), job.time, v.start_offset_m)
            poses.append(
                PoseRecord(
                    uav_id=v.vehicle_id,
                    model=model.name,
                    position=[float(pose.position[0]), float(pose.position[1]), float(job.altitude)]
                    if v.kind == "uav"
                    else [float(c) for c in pose.position],
                    heading=[float(c) for c in pose.heading],
                )
            )

        receivers: list[ReceiverRecord] = []
        rays: list[RayRecord] = []
        for index, (v, placement) in enumerate(zip(vehicles, placements)):
            receiver_id = job.scene_id * len(vehicles) + index
            paths = snapshot.trace(placement.rx_position, snapshot.body_exclusion(index))
            scored = []
            for path in paths:
                metrics = compute_metrics(path, materials, ctx.antennas, cfg)
                if metrics.linear_power > 0.0:
                    scored.append(ChannelRay(path=path, metrics=metrics))
            by_path = {id(r.path): r for r in scored}
            top = [
                by_path[id(path)]
                for path, _ in select_top_l([(r.path, r.metrics.power) for r in scored], cfg.l_max)
            ]
            metrics_list = [r.metrics for r in top]
            amplitudes = [m.amplitude for m in metrics_list]
            receivers.append(
                ReceiverRecord(
                    receiver_id=receiver_id,
                    scene_id=job.scene_id,
                    uav_id=v.vehicle_id,
                    rx_position=[float(c) for c in placement.rx_position],
                    total_power_coherent=total_power(amplitudes, "coherent", cfg.tx_power),
                    total_power_noncoherent=total_power(amplitudes, "noncoherent", cfg.tx_power),
                    mean_delay=mean_delay(metrics_list),
                    rms_delay_spread=rms_delay_spread(metrics_list),
                    los=any(m.los for m in metrics_list),
                    ray_count=len(top),
                )
            )
            for rank, ray in enumerate(top):
                m = ray.metrics
                rays.append(
                    RayRecord(
                        ray_id=receiver_id * cfg.l_max + rank,
                        receiver_id=receiver_id,
                        rank=rank,
                        power=m.power,
                        delay=m.delay,
                        aod_az=m.aod_az,
                        aod_el=m.aod_el,
                        aoa_az=m.aoa_az,
                        aoa_el=m.aoa_el,
                        signature=ray.path.signature,
                        los=m.los,
                        length_m=ray.path.length,
                        amplitude_re=m.amplitude.real,
                        amplitude_im=m.amplitude.imag,
                        interactions=[InteractionRecord(**hit.to_dict()) for hit in ray.path.interactions],
                    )
                )
            logger.debug(
                f"{job.tag} rx {v.vehicle_id}: {len(paths)} paths, kept {len(top)}, "
                f"total {receivers[-1].total_power_coherent} dBm"
            )

        elapsed = time.perf_counter() - start
        outages = sum(1 for r in receivers if r.ray_count == 0)
        logger.info(
            f"{job.tag} t={job.time:.2f}s: {len(rays)} rays for {len(receivers)} receivers "
            f"({outages} in outage) in {elapsed:.2f}s"
        )
        scene = SceneRecord(
            scene_id=job.scene_id,
            episode_id=job.episode_id,
            scene_index=job.scene_index,
            time=job.time,
            poses=poses,
        )
        return SceneResult(scene=scene, receivers=receivers, rays=rays)


# Per-process tracer for pool workers
_WORKER: Optional[SceneTracer] = None


def _init_worker(context: RunContext) -> None:
    global _WORKER
    _WORKER = SceneTracer(context)


def _trace_in_worker(job: SceneJob) -> SceneResult:
    assert _WORKER is not None, "worker not initialized"
    return _WORKER.trace_scene(job)


class SimulationRunner:
    """Runs every episode of a config and writes the dataset.

    Args:
        cfg: Validated run configuration.
        out_dir: Dataset directory; defaults to ``cfg.output_dir``.
        parallel: Number of worker processes tracing scenes of an episode.
    """

    def __init__(self, cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None, parallel: int = 1):
        if parallel < 1:
            raise ConfigError(f"parallel must be >= 1, got {parallel}")
        out = out_dir if out_dir is not None else cfg.output_dir
        if out is None:
            raise ConfigError("No output directory: pass one or set output_dir in the config")
        self.cfg = cfg
        self.out_dir = Path(out)
        self.parallel = parallel
        self.context: Optional[RunContext] = None
        self.snapshot: dict = {}
        self.config_hash = ""
        self.jobs: list[list[SceneJob]] = []

    @property
    def partial_dir(self) -> Path:
        return self.out_dir / PARTIAL_DIR / self.config_hash

    def _resolve_inputs(self) -> tuple[Path, Path]:
        cfg = self.cfg
        if cfg.scene_path is not None and cfg.routes_path is not None:
            return cfg.scene_path, cfg.routes_path
        params = ScenarioParams(frequency=cfg.frequency, scattering=dict(cfg.scattering))
        return generate_scenario(self.out_dir / SCENARIO_DIR, cfg.seed, params)

    def prepare(self) -> None:
        """Load inputs and validate them against the config. No tracing happens here."""
        cfg = self.cfg
        trace = cfg.trace_config()
        scene_path, routes_path = self._resolve_inputs()
        try:
            scene = load_scene(scene_path)
            plan = load_routes_file(routes_path)
        except (SceneError, RouteError) as e:
            raise ConfigError(str(e)) from e
        if not plan.vehicles:
            raise ConfigError(f"{routes_path}: routes file lists no vehicles to trace")

        for v in plan.vehicles:
            model = vehicle_model(v.model)
            if v.kind == "uav" and min(cfg.altitudes) <= model.size_m[2]:
                raise ConfigError(
                    f"altitudes: {min(cfg.altitudes)} m does not clear the body of UAV "
                    f"{v.vehicle_id} ({model.name})"
                )

        tx = cfg.tx_position or scene.transmitter
        if tx is None:
            raise ConfigError("tx_position: not set and the scene file has no transmitter")
        tx = (float(tx[0]), float(tx[1]), float(tx[2]))

        body_material = itu_material("metal", cfg.frequency, cfg.scattering.get("metal"))
        scene = scene.with_materials({"metal": body_material})

        self.snapshot = cfg.snapshot(
            tx_position=tx,
            scene_sha256=canonical.sha256_text(scene_path.read_text(encoding="utf-8")),
            routes_sha256=canonical.sha256_text(routes_path.read_text(encoding="utf-8")),
        )
        self.config_hash = config_hash(self.snapshot)
        self.context = RunContext(scene=scene, plan=plan, trace=trace, antennas=cfg.antennas(), tx=tx)

        n_scenes = sample_count(cfg.t_sam, cfg.duration)
        self.jobs = [
            [
                SceneJob(
                    episode_id=episode_id,
                    scene_index=k,
                    scene_id=episode_id * n_scenes + k,
                    altitude=altitude,
                    time=k * cfg.t_sam,
                )
                for k in range(n_scenes)
            ]
            for episode_id, altitude in enumerate(cfg.altitudes)
        ]
        logger.info(
            f"Run {self.config_hash[:12]}: {len(scene.faces)} faces, {len(plan.vehicles)} receivers, "
            f"{len(cfg.altitudes)} episodes x {n_scenes} scenes, preset '{cfg.trace.preset}', "
            f"parallel={self.parallel}"
        )

    def _checkpoint_path(self, job: SceneJob) -> Path:
        return self.partial_dir / f"e{job.episode_id}_s{job.scene_index}.json"

    def _load_checkpoint(self, job: SceneJob) -> Optional[SceneResult]:
        path = self._checkpoint_path(job)
        if not path.is_file():
            return None
        try:
            result = SceneResult.from_json(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError, KeyError, ValidationError) as e:
            logger.warning(f"{job.tag} Ignoring unreadable checkpoint {path.name}: {e}")
            return None
        if result.scene.scene_id != job.scene_id:
            logger.warning(f"{job.tag} Checkpoint {path.name} belongs to scene {result.scene.scene_id}")
            return None
        return result

    def _save_checkpoint(self, job: SceneJob, result: SceneResult) -> None:
        path = self._checkpoint_path(job)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(result.to_json() + "\n", encoding="utf-8")
        os.replace(tmp, path)

    async def _run_episode(
        self, jobs: list[SceneJob], local: Optional[SceneTracer], executor: Optional[Executor]
    ) -> None:
        loop = asyncio.get_event_loop()
        for job in jobs:
            cached = self._load_checkpoint(job)
            if cached is not None:
                job.result, job.state = cached, SceneState.RESUMED
        resumed = sum(1 for j in jobs if j.state is SceneState.RESUMED)
        if resumed:
            logger.info(f"[ep {jobs[0].episode_id}] Resuming: {resumed}/{len(jobs)} scenes from checkpoints")

        pending = [j for j in jobs if j.state is SceneState.PENDING]
        futures = {}
        if executor is not None:
            for job in pending:
                job.state = SceneState.TRACING
                futures[job.scene_index] = loop.run_in_executor(executor, _trace_in_worker, job)

        for job in pending:
            if executor is not None:
                result = await futures[job.scene_index]
            else:
                assert local is not None
                job.state = SceneState.TRACING
                result = await loop.run_in_executor(None, local.trace_scene, job)
            self._save_checkpoint(job, result)
            job.result, job.state = result, SceneState.DONE

    async def run(self) -> Manifest:
        if self.context is None:
            self.prepare()
        assert self.context is not None
        start = time.perf_counter()

        executor: Optional[Executor] = None
        local: Optional[SceneTracer] = None
        if self.parallel > 1:
            executor = ProcessPoolExecutor(
                max_workers=self.parallel, initializer=_init_worker, initargs=(self.context,)
            )
        else:
            local = SceneTracer(self.context)

        dataset = Dataset()
        try:
            for episode_id, (altitude, jobs) in enumerate(zip(self.cfg.altitudes, self.jobs)):
                logger.info(f"[ep {episode_id}] Altitude {altitude:g} m, {len(jobs)} scenes")
                await self._run_episode(jobs, local, executor)
                dataset.episodes.append(
                    EpisodeRecord(
                        episode_id=episode_id,
                        altitude=altitude,
                        scene_count=len(jobs),
                        config_hash=self.config_hash,
                        config=self.snapshot,
                    )
                )
                for job in jobs:
                    assert job.result is not None
                    dataset.scenes.append(job.result.scene)
                    dataset.receivers.extend(job.result.receivers)
                    dataset.rays.extend(job.result.rays)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        dataset.validate(l_max=self.context.trace.l_max)
        manifest = write_dataset(dataset, self.out_dir, self.config_hash)
        shutil.rmtree(self.partial_dir, ignore_errors=True)
        partial_root = self.out_dir / PARTIAL_DIR
        if partial_root.is_dir() and not any(partial_root.iterdir()):
            partial_root.rmdir()
        logger.info(
            f"Run {self.config_hash[:12]} finished in {time.perf_counter() - start:.1f}s, "
            f"dataset hash {manifest.dataset_hash[:12]}"
        )
        return manifest


def run_simulation(
    cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None, parallel: int = 1
) -> Manifest:
    """Run every episode of ``cfg`` and write the dataset.

    Raises:
        ConfigError: invalid inputs, raised before any scene is traced.
    """
    runner = SimulationRunner(cfg, out_dir=out_dir, parallel=parallel)
    runner.prepare()
    return asyncio.run(runner.run())
