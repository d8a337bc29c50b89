"""Shared scenes and configs for the test suite."""

import json

import numpy as np
import pytest

from mmwave_uav_sim.electromagnetics import Material, itu_material
from mmwave_uav_sim.geometry import Box, Mesh, Scene, build_scene, save_scene
from mmwave_uav_sim.raytracer import TraceConfig

F = 60e9


def ground_mesh(half: float = 100.0, material: str = "concrete") -> Mesh:
    return Mesh(
        vertices=((-half, -half, 0.0), (half, -half, 0.0), (half, half, 0.0), (-half, half, 0.0)),
        triangles=((0, 1, 2), (0, 2, 3)),
        material=material,
    )


def wall_mesh(x: float, y: tuple[float, float], z: tuple[float, float], material: str = "concrete") -> Mesh:
    """Vertical rectangle in the plane x = const."""
    (y0, y1), (z0, z1) = y, z
    return Mesh(
        vertices=((x, y0, z0), (x, y1, z0), (x, y1, z1), (x, y0, z1)),
        triangles=((0, 1, 2), (0, 2, 3)),
        material=material,
    )


def wall_mesh_y(y: float, x: tuple[float, float], z: tuple[float, float], material: str = "concrete") -> Mesh:
    """Vertical rectangle in the plane y = const."""
    (x0, x1), (z0, z1) = x, z
    return Mesh(
        vertices=((x0, y, z0), (x1, y, z0), (x1, y, z1), (x0, y, z1)),
        triangles=((0, 1, 2), (0, 2, 3)),
        material=material,
    )


@pytest.fixture
def pec() -> Material:
    """Perfect mirror with no diffuse tiles."""
    return Material(name="pec", is_pec=True, scattering_s=0.0)


@pytest.fixture
def concrete() -> Material:
    return itu_material("concrete", F)


@pytest.fixture
def materials(concrete: Material) -> dict[str, Material]:
    return {"concrete": concrete, "metal": itu_material("metal", F)}


@pytest.fixture
def ground_scene(materials: dict[str, Material]) -> Scene:
    return build_scene(materials, meshes=[ground_mesh()])


@pytest.fixture
def pec_ground_scene(pec: Material) -> Scene:
    return build_scene({"pec": pec}, meshes=[ground_mesh(material="pec")])


@pytest.fixture
def unit_box_scene(materials: dict[str, Material]) -> Scene:
    return build_scene(materials, boxes=[Box(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0), material="concrete")])


@pytest.fixture
def screen_scene(materials: dict[str, Material]) -> Scene:
    """A 40 m wide, 10 m tall screen in the plane x = 0."""
    return build_scene(materials, meshes=[wall_mesh(0.0, (-20.0, 20.0), (0.0, 10.0))])


@pytest.fixture
def street_scene(materials: dict[str, Material]) -> Scene:
    """Ground plus one building whose west wall faces the transmitter."""
    building = Box(min=(20.0, -10.0, 0.0), max=(22.0, 10.0, 15.0), material="concrete")
    return build_scene(materials, boxes=[building], meshes=[ground_mesh(half=50.0)])


@pytest.fixture
def specular_cfg() -> TraceConfig:
    return TraceConfig(max_reflections=2, diffraction=False, diffuse=False, exhaustive_face_limit=64)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def small_inputs(tmp_path, materials: dict[str, Material]) -> dict:
    """One building, two UAVs on one street; returns a run config dict pointing at them."""
    building = Box(min=(20.0, -10.0, 0.0), max=(30.0, 10.0, 25.0), material="concrete")
    scene = build_scene(
        {"concrete": materials["concrete"]},
        boxes=[building],
        meshes=[ground_mesh(half=60.0)],
        transmitter=(0.0, 0.0, 5.0),
    )
    scene_path = save_scene(scene, tmp_path / "inputs" / "scene.json")
    routes_path = tmp_path / "inputs" / "routes.json"
    routes_path.write_text(
        json.dumps(
            {
                "routes": [{"id": "street", "speed_mps": 10.0, "waypoints": [[-40, -5], [40, -5]]}],
                "vehicles": [
                    {"id": 0, "route": "street", "model": "domestico"},
                    {"id": 1, "route": "street", "model": "rural", "start_offset_m": 20.0},
                ],
            }
        )
    )
    return {
        "altitudes": [20.0],
        "t_sam": 0.1,
        "duration": 0.2,
        "trace": {"preset": "fast", "tile_area": 25.0, "l_max": 5},
        "scene_path": str(scene_path),
        "routes_path": str(routes_path),
    }
