"""Canonical urban scenario: two crossing streets, buildings, routes, UAVs.

Everything random is drawn from ``numpy.random.Generator(PCG64)`` streams
spawned from one ``SeedSequence(seed)`` (buildings, routes, model choice), so
a seed fully determines both output files byte for byte.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from loguru import logger

from mmwave_uav_sim import canonical
from mmwave_uav_sim.electromagnetics import DEFAULT_SCATTERING, itu_material
from mmwave_uav_sim.geometry import Box, Mesh, Scene, build_scene, save_scene
from mmwave_uav_sim.mobility import (
    UAV_MODELS,
    Route,
    RoutePlan,
    VehicleAssignment,
    assign_models,
    routes_document,
)

SCENE_FILE = "scene.json"
ROUTES_FILE = "routes.json"

# Quadrant signs in placement order: NE, NW, SW, SE
_QUADRANTS = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))
_CELL_COLUMNS = 3
_CELL_ROWS = 2


@dataclass(frozen=True)
class ScenarioParams:
    n_buildings: int = 20
    n_uavs: int = 10
    half_size: float = 130.0  # ground is a square of side 2 * half_size
    street_width: float = 20.0
    setback: float = 5.0  # gap between street edge and the first building cell
    height_range: tuple[float, float] = (10.0, 90.0)
    footprint_range: tuple[float, float] = (14.0, 22.0)
    # None places the antenna on the sidewalk of the north-east corner block
    tx_position: Optional[tuple[float, float, float]] = None
    tx_height: float = 5.0
    tx_inset: float = 1.5  # east of the corner building's west wall
    tx_curb: float = 0.5  # south of its south wall
    lane_offset: float = 4.0
    speed_range: tuple[float, float] = (10.0, 20.0)
    start_offset_step: float = 30.0
    frequency: float = 60e9
    scattering: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCATTERING))

    def __post_init__(self) -> None:
        slots = len(_QUADRANTS) * _CELL_COLUMNS * _CELL_ROWS
        if not 0 <= self.n_buildings <= slots:
            raise ValueError(f"n_buildings must be in [0, {slots}], got {self.n_buildings}")
        if self.n_uavs < 1:
            raise ValueError(f"n_uavs must be >= 1, got {self.n_uavs}")

    @property
    def concrete_name(self) -> str:
        return f"itu_concrete_{self.frequency / 1e9:g}ghz"


def _buildings(params: ScenarioParams, rng: np.random.Generator) -> list[Box]:
    """Boxes on a 3 x 2 cell grid per quadrant; one cell per building, so none overlap.

    The north-east cell at the crossing is always built on and comes first:
    it is the block the transmitter stands in front of.
    """
    inner = params.street_width / 2.0 + params.setback
    span = params.half_size - params.setback - inner
    cell_w, cell_h = span / _CELL_COLUMNS, span / _CELL_ROWS
    lo_fp, hi_fp = params.footprint_range
    lo_h, hi_h = params.height_range

    per_quadrant = [params.n_buildings // 4 + (1 if q < params.n_buildings % 4 else 0) for q in range(4)]
    boxes = []
    n_cells = _CELL_COLUMNS * _CELL_ROWS
    for q, ((sx, sy), count) in enumerate(zip(_QUADRANTS, per_quadrant)):
        if q == 0 and count:
            cells = np.concatenate([[0], 1 + rng.permutation(n_cells - 1)[: count - 1]])
        else:
            cells = rng.permutation(n_cells)[:count]
        for cell in sorted(int(c) for c in cells):
            col, row = cell % _CELL_COLUMNS, cell // _CELL_COLUMNS
            w, d = (round(float(v), 2) for v in rng.uniform(lo_fp, hi_fp, size=2))
            height = round(float(rng.uniform(lo_h, hi_h)), 2)
            # Centre jitter keeps the footprint inside its cell
            jx = float(rng.uniform(-0.5, 0.5)) * (cell_w - w)
            jy = float(rng.uniform(-0.5, 0.5)) * (cell_h - d)
            cx = round(inner + (col + 0.5) * cell_w + jx, 2)
            cy = round(inner + (row + 0.5) * cell_h + jy, 2)
            x0, x1 = sorted((sx * (cx - w / 2.0), sx * (cx + w / 2.0)))
            y0, y1 = sorted((sy * (cy - d / 2.0), sy * (cy + d / 2.0)))
            boxes.append(
                Box(
                    min=(round(x0, 3), round(y0, 3), 0.0),
                    max=(round(x1, 3), round(y1, 3), height),
                    material=params.concrete_name,
                )
            )
    return boxes


def corner_transmitter(params: ScenarioParams, boxes: list[Box]) -> tuple[float, float, float]:
    """Transmitter on the sidewalk in front of the north-east corner building.

    The corner building is the first north-east box, which the generator puts
    in the cell touching the crossing. Standing just south of it, the antenna
    sees the east-west street while the block hides the far end of the
    north-south street. An explicit ``params.tx_position`` wins.
    """
    if params.tx_position is not None:
        return params.tx_position
    block = next((b for b in boxes if b.min[0] > 0.0 and b.min[1] > 0.0), None)
    if block is None:
        corner = params.street_width / 2.0 + params.setback / 2.0
        return (corner, corner, params.tx_height)
    return (
        round(block.min[0] + params.tx_inset, 3),
        round(block.min[1] - params.tx_curb, 3),
        params.tx_height,
    )


def _routes(params: ScenarioParams, rng: np.random.Generator) -> list[Route]:
    end = params.half_size - 10.0
    lane = params.lane_offset
    # L-shaped routes enter halfway along their first arm so no two UAVs share a start
    layouts = {
        "eastbound": [(-end, -lane), (end, -lane)],
        "westbound": [(end, lane), (-end, lane)],
        "northbound": [(lane, -end), (lane, end)],
        "southbound": [(-lane, end), (-lane, -end)],
        "east_then_north": [(-end / 2.0, -lane), (lane, -lane), (lane, end)],
        "south_then_west": [(-lane, end / 2.0), (-lane, lane), (-end, lane)],
    }
    lo, hi = params.speed_range
    speeds = rng.uniform(lo, hi, size=len(layouts))
    return [
        Route(
            route_id=name,
            waypoints=np.array([[x, y, 0.0] for x, y in points], dtype=np.float64),
            speed=round(float(speed), 3),
        )
        for (name, points), speed in zip(layouts.items(), speeds)
    ]


def build_scenario(params: ScenarioParams, seed: int) -> tuple[Scene, RoutePlan]:
    """Scene and route plan of the canonical scenario for ``seed``."""
    building_seed, route_seed, model_seed = np.random.SeedSequence(seed).spawn(3)

    concrete = itu_material(
        "concrete", params.frequency, params.scattering.get("concrete", DEFAULT_SCATTERING["concrete"])
    )
    metal = itu_material("metal", params.frequency, params.scattering.get("metal", DEFAULT_SCATTERING["metal"]))
    materials = {
        params.concrete_name: replace(concrete, name=params.concrete_name),
        "metal": metal,
    }

    h = params.half_size
    ground = Mesh(
        vertices=((-h, -h, 0.0), (h, -h, 0.0), (h, h, 0.0), (-h, h, 0.0)),
        triangles=((0, 1, 2), (0, 2, 3)),
        material=params.concrete_name,
    )
    boxes = _buildings(params, np.random.Generator(np.random.PCG64(building_seed)))
    tx = corner_transmitter(params, boxes)
    scene = build_scene(materials, boxes=boxes, meshes=[ground], transmitter=tx)

    routes = _routes(params, np.random.Generator(np.random.PCG64(route_seed)))
    models = assign_models(params.n_uavs, list(UAV_MODELS.values()), model_seed)
    vehicles = tuple(
        VehicleAssignment(
            vehicle_id=i,
            route_id=routes[i % len(routes)].route_id,
            model=models[i].name,
            start_offset_m=params.start_offset_step * (i // len(routes)),
        )
        for i in range(params.n_uavs)
    )
    return scene, RoutePlan(routes=tuple(routes), vehicles=vehicles)


def generate_scenario(
    out_dir: Union[str, Path], seed: int, params: ScenarioParams = ScenarioParams()
) -> tuple[Path, Path]:
    """Write ``scene.json`` and ``routes.json`` for ``seed`` into ``out_dir``."""
    out_dir = Path(out_dir)
    scene, plan = build_scenario(params, seed)
    scene_path = save_scene(scene, out_dir / SCENE_FILE)
    routes_path = out_dir / ROUTES_FILE
    routes_path.write_text(canonical.dumps(routes_document(plan), indent=2) + "\n", encoding="utf-8")
    heights = [b.max[2] for b in scene.boxes]
    logger.info(
        f"Generated scenario seed={seed}: {len(scene.boxes)} buildings "
        f"(heights {min(heights, default=0):.1f}-{max(heights, default=0):.1f} m), "
        f"Tx at {scene.transmitter}, "
        f"{len(plan.routes)} routes, {len(plan.vehicles)} UAVs -> {out_dir}"
    )
    return scene_path, routes_path
