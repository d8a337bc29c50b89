"""Route ingestion, trajectory sampling and UAV placement.

Routes are planar polylines walked at constant speed. Every scene is one
sample time ``k * t_sam``; vehicles that reach the end of their route stay
parked on the final waypoint. Altitude is not part of a route: it comes from
the episode and is applied by :func:`place_uav`.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from mmwave_uav_sim.errors import RouteError
from mmwave_uav_sim.geometry import Box

DEFAULT_RX_OFFSET = 0.05


@dataclass(frozen=True)
class VehicleModel:
    """Airframe (or car body) approximated by its bounding box."""

    name: str
    length_mm: float
    width_mm: float
    height_mm: float
    v_max: float  # m/s
    material_id: str = "metal"

    def __post_init__(self) -> None:
        dims = (self.length_mm, self.width_mm, self.height_mm)
        if not all(math.isfinite(d) and d > 0 for d in dims):
            raise RouteError(f"Vehicle model '{self.name}' needs positive dimensions, got {dims}")
        if not (math.isfinite(self.v_max) and self.v_max > 0):
            raise RouteError(f"Vehicle model '{self.name}' needs v_max > 0, got {self.v_max}")

    @property
    def size_m(self) -> tuple[float, float, float]:
        return (self.length_mm / 1000.0, self.width_mm / 1000.0, self.height_mm / 1000.0)


# Delivery, domestic and rural airframes
UAV_MODELS: dict[str, VehicleModel] = {
    "entregas": VehicleModel("entregas", 914.0, 914.0, 336.0, v_max=24.5),
    "domestico": VehicleModel("domestico", 289.5, 289.5, 196.0, v_max=20.0),
    "rural": VehicleModel("rural", 716.0, 220.0, 236.0, v_max=23.0),
}

GROUND_MODELS: dict[str, VehicleModel] = {
    "carro": VehicleModel("carro", 4500.0, 1800.0, 1500.0, v_max=16.7),
}


def vehicle_model(name: str) -> VehicleModel:
    model = UAV_MODELS.get(name) or GROUND_MODELS.get(name)
    if model is None:
        known = sorted(UAV_MODELS) + sorted(GROUND_MODELS)
        raise RouteError(f"Unknown vehicle model '{name}' (known: {known})")
    return model


@dataclass(frozen=True, eq=False)
class Route:
    route_id: str
    waypoints: NDArray[np.float64]  # (n, 3), z = 0
    speed: float  # m/s
    cumulative: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        pts = np.asarray(self.waypoints, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise RouteError(f"Route '{self.route_id}' needs at least 2 waypoints")
        if not np.all(np.isfinite(pts)):
            raise RouteError(f"Route '{self.route_id}' has non-finite waypoints")
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise RouteError(f"Route '{self.route_id}': speed must be positive, got {self.speed}")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg == 0.0):
            raise RouteError(f"Route '{self.route_id}' repeats a waypoint")
        object.__setattr__(self, "waypoints", pts)
        object.__setattr__(self, "cumulative", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    @property
    def duration(self) -> float:
        return self.length / self.speed

    def position_at(self, s: float) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Point and unit heading at arc length ``s`` (clamped to the route)."""
        s = min(max(s, 0.0), self.length)
        n_seg = len(self.waypoints) - 1
        i = int(np.searchsorted(self.cumulative, s, side="right")) - 1
        i = min(max(i, 0), n_seg - 1)
        a, b = self.waypoints[i], self.waypoints[i + 1]
        seg_len = self.cumulative[i + 1] - self.cumulative[i]
        heading = (b - a) / seg_len
        if s >= self.length:
            return self.waypoints[-1].copy(), heading
        return a + (s - self.cumulative[i]) * heading, heading


@dataclass(frozen=True, eq=False)
class PoseSample:
    time: float
    position: NDArray[np.float64]
    heading: NDArray[np.float64]


@dataclass(frozen=True)
class VehicleAssignment:
    """Which vehicle drives which route, as listed in the routes file."""

    vehicle_id: int
    route_id: str
    model: str
    start_offset_m: float = 0.0
    kind: Literal["uav", "ground"] = "uav"


@dataclass(frozen=True)
class RoutePlan:
    routes: tuple[Route, ...]
    vehicles: tuple[VehicleAssignment, ...] = ()

    def route(self, route_id: str) -> Route:
        for route in self.routes:
            if route.route_id == route_id:
                return route
        raise RouteError(f"Unknown route '{route_id}'")

    @property
    def uavs(self) -> tuple[VehicleAssignment, ...]:
        return tuple(v for v in self.vehicles if v.kind == "uav")


@dataclass(frozen=True, eq=False)
class Placement:
    """A vehicle body drawn into one scene plus its receive antenna point."""

    uav_id: int
    body_mesh: Box
    rx_position: NDArray[np.float64]


# ----------------------------------------------------------------------------
# Routes file
# ----------------------------------------------------------------------------


class _RouteEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    route_id: str = Field(alias="id")
    speed_mps: float
    waypoints: list[list[float]]


class _VehicleEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    vehicle_id: int = Field(alias="id", ge=0)
    route: str
    model: str
    start_offset_m: float = Field(default=0.0, ge=0.0)
    kind: Literal["uav", "ground"] = "uav"


class _RoutesDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    routes: list[_RouteEntry]
    vehicles: list[_VehicleEntry] = []


def _to_route(entry: _RouteEntry) -> Route:
    for wp in entry.waypoints:
        if len(wp) not in (2, 3):
            raise RouteError(f"Route '{entry.route_id}': waypoint {wp} must be [x, y]")
    pts = np.array([[wp[0], wp[1], 0.0] for wp in entry.waypoints], dtype=np.float64)
    if len(pts) < 2:
        raise RouteError(f"Route '{entry.route_id}' needs at least 2 waypoints")
    return Route(route_id=entry.route_id, waypoints=pts, speed=entry.speed_mps)


def parse_routes(data: object) -> RoutePlan:
    """Validate a decoded routes document."""
    try:
        doc = _RoutesDocument.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise RouteError(f"Invalid routes document: {problems}") from e

    routes = tuple(_to_route(entry) for entry in doc.routes)
    ids = [r.route_id for r in routes]
    if len(set(ids)) != len(ids):
        raise RouteError(f"Duplicate route ids in {ids}")

    plan = RoutePlan(routes=routes)
    vehicles = []
    for entry in doc.vehicles:
        model = vehicle_model(entry.model)
        route = plan.route(entry.route)
        if route.speed > model.v_max:
            raise RouteError(
                f"Route '{route.route_id}' speed {route.speed} m/s exceeds v_max "
                f"{model.v_max} m/s of model '{model.name}' (vehicle {entry.vehicle_id})"
            )
        vehicles.append(
            VehicleAssignment(
                vehicle_id=entry.vehicle_id,
                route_id=entry.route,
                model=entry.model,
                start_offset_m=entry.start_offset_m,
                kind=entry.kind,
            )
        )
    vehicle_ids = [v.vehicle_id for v in vehicles]
    if len(set(vehicle_ids)) != len(vehicle_ids):
        raise RouteError(f"Duplicate vehicle ids in {vehicle_ids}")
    if not routes:
        logger.warning("Routes document contains no routes")
    return RoutePlan(routes=routes, vehicles=tuple(sorted(vehicles, key=lambda v: v.vehicle_id)))


def load_routes_file(path: Union[str, Path]) -> RoutePlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise RouteError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise RouteError(f"{path}: cannot read routes file ({e})") from e
    plan = parse_routes(data)
    logger.debug(f"Loaded {len(plan.routes)} routes and {len(plan.vehicles)} vehicles from {path.name}")
    return plan


def ingest_routes(path: Union[str, Path]) -> list[Route]:
    """Validated routes from a routes JSON file."""
    return list(load_routes_file(path).routes)


def routes_document(plan: RoutePlan) -> dict:
    return {
        "routes": [
            {
                "id": r.route_id,
                "speed_mps": r.speed,
                "waypoints": [[float(p[0]), float(p[1])] for p in r.waypoints],
            }
            for r in plan.routes
        ],
        "vehicles": [
            {
                "id": v.vehicle_id,
                "route": v.route_id,
                "model": v.model,
                "start_offset_m": v.start_offset_m,
                "kind": v.kind,
            }
            for v in plan.vehicles
        ],
    }


# ----------------------------------------------------------------------------
# Sampling and placement
# ----------------------------------------------------------------------------


def sample_count(t_sam: float, duration: float) -> int:
    """Number of samples at k * t_sam for 0 <= k * t_sam <= duration."""
    if not t_sam > 0:
        raise RouteError(f"t_sam must be positive, got {t_sam}")
    if duration < 0:
        raise RouteError(f"duration must be non-negative, got {duration}")
    return int(math.floor(duration / t_sam + 1e-9)) + 1


def pose_at(route: Route, time: float, start_offset_m: float = 0.0) -> PoseSample:
    position, heading = route.position_at(start_offset_m + route.speed * time)
    return PoseSample(time=time, position=position, heading=heading)


def sample_trajectory(
    route: Route, t_sam: float, duration: float, start_offset_m: float = 0.0
) -> list[PoseSample]:
    """Poses at t = k * t_sam along ``route``, held at the last waypoint once finished."""
    n = sample_count(t_sam, duration)
    return [pose_at(route, k * t_sam, start_offset_m) for k in range(n)]


def _body_box(
    center_xy: NDArray[np.float64], z_min: float, model: VehicleModel, heading: NDArray[np.float64]
) -> Box:
    length, width, height = model.size_m
    # Axis-aligned: the long side follows whichever planar axis dominates the heading
    if abs(float(heading[0])) >= abs(float(heading[1])):
        half_x, half_y = length / 2.0, width / 2.0
    else:
        half_x, half_y = width / 2.0, length / 2.0
    x, y = float(center_xy[0]), float(center_xy[1])
    return Box(
        min=(x - half_x, y - half_y, z_min),
        max=(x + half_x, y + half_y, z_min + height),
        material=model.material_id,
    )


def place_uav(
    pose: PoseSample,
    model: VehicleModel,
    altitude: float,
    uav_id: int = 0,
    rx_offset: float = DEFAULT_RX_OFFSET,
) -> Placement:
    """Body box centred at (pose.xy, altitude) with the antenna ``rx_offset`` below it."""
    _, _, height = model.size_m
    if not altitude > height:
        raise RouteError(
            f"altitude {altitude} m is below ground clearance for model '{model.name}' "
            f"(body height {height} m)"
        )
    if rx_offset <= 0:
        raise RouteError(f"rx_offset must be positive, got {rx_offset}")
    body = _body_box(pose.position, altitude - height / 2.0, model, pose.heading)
    rx = np.array(
        [pose.position[0], pose.position[1], altitude - height / 2.0 - rx_offset], dtype=np.float64
    )
    return Placement(uav_id=uav_id, body_mesh=body, rx_position=rx)


def place_ground_vehicle(
    pose: PoseSample,
    model: VehicleModel,
    vehicle_id: int = 0,
    rx_offset: float = DEFAULT_RX_OFFSET,
) -> Placement:
    """Body resting on z = 0 with the antenna ``rx_offset`` above the roof."""
    _, _, height = model.size_m
    body = _body_box(pose.position, 0.0, model, pose.heading)
    rx = np.array([pose.position[0], pose.position[1], height + rx_offset], dtype=np.float64)
    return Placement(uav_id=vehicle_id, body_mesh=body, rx_position=rx)


def assign_models(
    n_uavs: int, models: Sequence[VehicleModel], seed: Union[int, np.random.SeedSequence]
) -> list[VehicleModel]:
    """Seeded draw with replacement of one model per UAV (PCG64)."""
    if n_uavs < 1:
        raise RouteError(f"n_uavs must be >= 1, got {n_uavs}")
    if not models:
        raise RouteError("assign_models needs at least one model")
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.integers(0, len(models), size=n_uavs)
    return [models[int(i)] for i in picks]


def vehicle_placement(
    assignment: VehicleAssignment,
    plan: RoutePlan,
    time: float,
    altitude: float,
    rx_offset: float = DEFAULT_RX_OFFSET,
    model: Optional[VehicleModel] = None,
) -> Placement:
    """Pose and place one listed vehicle at ``time``."""
    route = plan.route(assignment.route_id)
    model = model or vehicle_model(assignment.model)
    pose = pose_at(route, time, assignment.start_offset_m)
    if assignment.kind == "ground":
        return place_ground_vehicle(pose, model, assignment.vehicle_id, rx_offset)
    return place_uav(pose, model, altitude, assignment.vehicle_id, rx_offset)
