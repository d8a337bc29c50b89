"""Multipath search between the transmitter and each receiver.

Path families:

- LOS and specular reflections. Shooting-and-bouncing rays (SBR) over the
  launch grid only *discovers* face sequences; every candidate is rebuilt
  exactly with the image method and validated with occlusion tests.
- First-order knife-edge diffraction over static building edges, only when
  the direct path is blocked.
- Lambertian diffuse scattering from surface tiles, with exactly one S
  interaction and at most ``ds_max_interactions`` surface interactions.

A :class:`Tracer` holds the per-run static work (BVH, edges, tiles and tile
illumination from the transmitter). :meth:`Tracer.snapshot` adds the UAV
bodies of one scene and shoots the SBR grid once; :meth:`Snapshot.trace`
then serves every receiver of that scene.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from mmwave_uav_sim.electromagnetics import (
    fresnel_kirchhoff_nu,
    reflection_power_batch,
    wavelength,
)
from mmwave_uav_sim.errors import ConfigError, GeometryError
from mmwave_uav_sim.geometry import (
    BVH,
    EPS_RAY,
    Box,
    Edge,
    Scene,
    Vec3,
    build_accelerator,
    intersect_batch,
    mirror_point,
    normalize,
    occluded,
    occluded_batch,
    point_in_triangle,
    segment_faces,
)

# Launch segments that never hit anything are clipped here
_T_FAR = 1e5
_PLANE_TOL = 1e-9
_DUPLICATE_TOL = 1e-9
_EDGE_AXIS_TOL = 1e-6
_GROUND_Z_TOL = 1e-6


@dataclass(frozen=True)
class TraceConfig:
    """Tracing parameters. Defaults reproduce the reference 60 GHz setup."""

    ray_spacing_deg: float = 1.0
    max_reflections: int = 3
    l_max: int = 25
    ds_max_interactions: int = 2  # surface interactions on a diffuse path, S included
    tile_area: float = 1.0  # m^2
    f: float = 60e9  # Hz
    tx_power: float = 0.0  # dBm
    # Scenes with at most this many faces enumerate face sequences exhaustively
    exhaustive_face_limit: int = 12
    reception_factor: float = 1.0
    diffuse_path_limit: int = 100
    # Tiles (strongest Tx illumination first) considered for scatter-then-reflect paths
    scatter_tile_pool: int = 2048
    rx_offset: float = 0.05  # m
    diffraction: bool = True
    diffuse: bool = True

    def __post_init__(self) -> None:
        if not (math.isfinite(self.ray_spacing_deg) and self.ray_spacing_deg > 0):
            raise ConfigError(f"ray_spacing_deg must be > 0, got {self.ray_spacing_deg}")
        if self.max_reflections < 0:
            raise ConfigError(f"max_reflections must be >= 0, got {self.max_reflections}")
        if self.l_max < 1:
            raise ConfigError(f"l_max must be >= 1, got {self.l_max}")
        if self.ds_max_interactions < 1:
            raise ConfigError(f"ds_max_interactions must be >= 1, got {self.ds_max_interactions}")
        if not self.tile_area > 0:
            raise ConfigError(f"tile_area must be > 0, got {self.tile_area}")
        if not self.f > 0:
            raise ConfigError(f"f must be > 0, got {self.f}")
        if not math.isfinite(self.tx_power):
            raise ConfigError(f"tx_power must be finite, got {self.tx_power}")
        if not self.reception_factor > 0:
            raise ConfigError(f"reception_factor must be > 0, got {self.reception_factor}")
        if self.diffuse_path_limit < 0 or self.scatter_tile_pool < 0:
            raise ConfigError("diffuse_path_limit and scatter_tile_pool must be >= 0")
        if not self.rx_offset > 0:
            raise ConfigError(f"rx_offset must be > 0, got {self.rx_offset}")

    @property
    def wavelength(self) -> float:
        return wavelength(self.f)

    @property
    def spacing_rad(self) -> float:
        return math.radians(self.ray_spacing_deg)

    @property
    def sbr_depth(self) -> int:
        pre_scatter = self.ds_max_interactions - 1 if self.diffuse else 0
        return max(self.max_reflections, pre_scatter)


TRACE_PRESETS = {
    # Reference radio setup: 1 degree grid, L = 25, two diffuse interactions
    "reference": TraceConfig(),
    # Quick looks and CI: coarse grid, fewer bounces, larger tiles
    "fast": TraceConfig(
        ray_spacing_deg=5.0,
        max_reflections=2,
        tile_area=4.0,
        diffuse_path_limit=50,
        scatter_tile_pool=512,
    ),
    # Small validation scenes: enumerate every face sequence
    "oracle": TraceConfig(
        max_reflections=2,
        exhaustive_face_limit=64,
    ),
}


def launch_directions(spacing_deg: float) -> NDArray[np.float64]:
    """Azimuth/elevation launch grid, poles emitted once.

    Elevations run from -90 to +90 degrees in ``spacing_deg`` steps; each
    non-polar elevation carries a full azimuth ring with the same step.
    """
    if not (math.isfinite(spacing_deg) and spacing_deg > 0):
        raise ConfigError(f"Invalid ray spacing {spacing_deg}")
    steps = 90.0 / spacing_deg
    n = int(round(steps))
    if n < 1 or abs(steps - n) > 1e-9:
        raise ConfigError(f"Ray spacing {spacing_deg} deg must divide 90 evenly")

    el = np.radians(-90.0 + spacing_deg * np.arange(1, 2 * n))
    az = np.radians(spacing_deg * np.arange(4 * n))
    el_grid, az_grid = np.meshgrid(el, az, indexing="ij")
    ring = np.stack(
        [
            np.cos(el_grid) * np.cos(az_grid),
            np.cos(el_grid) * np.sin(az_grid),
            np.sin(el_grid),
        ],
        axis=-1,
    ).reshape(-1, 3)
    poles = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    dirs = np.concatenate([poles[:1], ring, poles[1:]])
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


# ----------------------------------------------------------------------------
# Paths
# ----------------------------------------------------------------------------


class InteractionKind(str, Enum):
    REFLECTION = "R"
    DIFFRACTION = "D"
    SCATTERING = "S"


@dataclass(frozen=True, eq=False)
class Interaction:
    kind: InteractionKind
    point: Vec3
    face_id: Optional[int] = None
    edge_id: Optional[int] = None
    material_id: Optional[str] = None
    normal: Optional[Vec3] = None
    nu: Optional[float] = None  # knife-edge parameter (D)
    area: Optional[float] = None  # tile area in m^2 (S)

    def to_dict(self) -> dict:
        entry: dict = {"kind": self.kind.value, "point": [float(c) for c in self.point]}
        if self.face_id is not None:
            entry["face_id"] = int(self.face_id)
        if self.edge_id is not None:
            entry["edge_id"] = int(self.edge_id)
        return entry


@dataclass(frozen=True, eq=False)
class RayPath:
    """Polyline tx -> interactions -> rx.

    ``arrival_dir`` is the propagation direction of the last segment (pointing
    into the receiver).
    """

    vertices: NDArray[np.float64]
    interactions: tuple[Interaction, ...] = ()
    length: float = field(init=False)
    departure_dir: Vec3 = field(init=False, repr=False)
    arrival_dir: Vec3 = field(init=False, repr=False)
    signature: str = field(init=False)

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.shape != (len(self.interactions) + 2, 3):
            raise GeometryError(
                f"Path with {len(self.interactions)} interactions needs "
                f"{len(self.interactions) + 2} vertices, got shape {verts.shape}"
            )
        seg = np.diff(verts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len == 0.0):
            raise GeometryError("Path has a zero-length segment")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "length", float(seg_len.sum()))
        object.__setattr__(self, "departure_dir", seg[0] / seg_len[0])
        object.__setattr__(self, "arrival_dir", seg[-1] / seg_len[-1])
        kinds = [i.kind.value for i in self.interactions]
        object.__setattr__(self, "signature", "-".join(["Tx", *kinds, "Rx"]))

    @property
    def is_los(self) -> bool:
        return not self.interactions

    @property
    def segment_lengths(self) -> NDArray[np.float64]:
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def face_sequence(self) -> tuple[int, ...]:
        return tuple(
            i.face_id if i.face_id is not None else -1 - (i.edge_id or 0) for i in self.interactions
        )

    @property
    def sort_key(self) -> tuple:
        return (self.signature, self.face_sequence, tuple(np.round(self.vertices, 9).ravel()))


def select_top_l(paths: Sequence[tuple[RayPath, float]], l_max: int) -> list[tuple[RayPath, float]]:
    """Strongest ``l_max`` (path, power) pairs.

    Sorted by power descending; ties by delay (path length) ascending, then
    signature, then interaction ids and points.
    """
    if l_max < 1:
        raise ConfigError(f"l_max must be >= 1, got {l_max}")
    ordered = sorted(paths, key=lambda item: (-item[1], item[0].length, item[0].sort_key))
    return ordered[:l_max]


# ----------------------------------------------------------------------------
# Static precomputation
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TileSet:
    """Diffuse scattering tiles and the coplanar face groups they come from.

    Every coplanar group of static faces (per structure) is a reflecting
    plane; groups whose material scatters also carry a uniform grid of tiles.
    """

    centers: NDArray[np.float64]
    normals: NDArray[np.float64]
    areas: NDArray[np.float64]
    face_ids: NDArray[np.int64]
    scattering: NDArray[np.float64]
    plane_point: NDArray[np.float64]  # (G, 3)
    plane_normal: NDArray[np.float64]  # (G, 3)
    plane_faces: tuple[tuple[int, ...], ...]
    face_group: NDArray[np.int64]  # static face id -> group
    grid_origin: NDArray[np.float64]
    grid_u: NDArray[np.float64]
    grid_v: NDArray[np.float64]
    grid_step: NDArray[np.float64]  # (G, 2)
    grid_shape: NDArray[np.int64]  # (G, 2), zeros for groups without tiles
    grid_offset: NDArray[np.int64]
    cell_tile: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.centers)

    def locate(self, points: NDArray[np.float64], face_ids: NDArray[np.int64]) -> NDArray[np.int64]:
        """Tile index containing each point on the given static face, -1 if none."""
        out = np.full(len(points), -1, dtype=np.int64)
        valid = (face_ids >= 0) & (face_ids < len(self.face_group))
        groups = np.full(len(points), -1, dtype=np.int64)
        groups[valid] = self.face_group[face_ids[valid]]
        valid &= groups >= 0
        valid[valid] &= self.grid_shape[groups[valid], 0] > 0
        if not np.any(valid):
            return out
        g = groups[valid]
        rel = points[valid] - self.grid_origin[g]
        cu = np.einsum("ij,ij->i", rel, self.grid_u[g])
        cv = np.einsum("ij,ij->i", rel, self.grid_v[g])
        i = np.clip(np.floor(cu / self.grid_step[g, 0]).astype(np.int64), 0, self.grid_shape[g, 0] - 1)
        j = np.clip(np.floor(cv / self.grid_step[g, 1]).astype(np.int64), 0, self.grid_shape[g, 1] - 1)
        out[valid] = self.cell_tile[self.grid_offset[g] + i * self.grid_shape[g, 1] + j]
        return out


def _plane_basis(normal: Vec3) -> tuple[Vec3, Vec3]:
    if abs(float(normal[2])) < 1.0 - 1e-9:
        u = normalize(np.cross(np.array([0.0, 0.0, 1.0]), normal))
    else:
        u = np.array([1.0, 0.0, 0.0])
    v = np.cross(normal, u)
    return u, v


def build_tiles(scene: Scene, tile_area: float) -> TileSet:
    """Group static faces into planes and grid the scattering ones into tiles.

    Cell counts per axis are ``round(extent / sqrt(tile_area))`` (at least 1),
    so tiles stay within [0.44, 4) x tile_area except on planes smaller than a
    single tile, which become one tile.
    """
    side = math.sqrt(tile_area)
    groups: dict[tuple, list[int]] = {}
    for face in scene.faces[: scene.static_face_count]:
        n = face.normal
        key = (
            face.structure_id,
            tuple(np.round(n, 9) + 0.0),
            round(float(n @ face.vertices[0]), 6) + 0.0,
        )
        groups.setdefault(key, []).append(face.face_id)

    face_group = np.full(scene.static_face_count, -1, dtype=np.int64)
    plane_point, plane_normal, plane_faces = [], [], []
    grid_origin, grid_u, grid_v, grid_step, grid_shape, grid_offset = [], [], [], [], [], []
    cells: list[NDArray[np.int64]] = []
    centers, normals, areas, face_ids, scattering = [], [], [], [], []
    n_tiles = 0
    n_cells = 0

    for g, (_, ids) in enumerate(sorted(groups.items(), key=lambda kv: kv[1][0])):
        faces = [scene.faces[i] for i in ids]
        n = faces[0].normal
        o = faces[0].vertices[0]
        face_group[ids] = g
        plane_point.append(o)
        plane_normal.append(n)
        plane_faces.append(tuple(ids))

        u, v = _plane_basis(n)
        verts = np.concatenate([f.vertices for f in faces]) - o
        pu, pv = verts @ u, verts @ v
        origin = o + pu.min() * u + pv.min() * v
        grid_origin.append(origin)
        grid_u.append(u)
        grid_v.append(v)
        grid_offset.append(n_cells)

        s = scene.materials[faces[0].material_id].scattering_s
        if s <= 0.0:
            grid_step.append((1.0, 1.0))
            grid_shape.append((0, 0))
            continue

        lu, lv = float(pu.max() - pu.min()), float(pv.max() - pv.min())
        nu = max(1, int(math.floor(lu / side + 0.5)))
        nv = max(1, int(math.floor(lv / side + 0.5)))
        du, dv = lu / nu, lv / nv
        grid_step.append((du, dv))
        grid_shape.append((nu, nv))

        cu, cv = np.meshgrid((np.arange(nu) + 0.5) * du, (np.arange(nv) + 0.5) * dv, indexing="ij")
        pts = origin + cu.reshape(-1, 1) * u + cv.reshape(-1, 1) * v
        owner = np.full(len(pts), -1, dtype=np.int64)
        for face in faces:
            inside = (owner < 0) & point_in_triangle(pts, face.vertices)
            owner[inside] = face.face_id
        keep = owner >= 0
        cell_tile = np.full(len(pts), -1, dtype=np.int64)
        cell_tile[keep] = n_tiles + np.arange(int(keep.sum()))
        cells.append(cell_tile)
        n_cells += len(pts)
        n_tiles += int(keep.sum())

        centers.append(pts[keep])
        normals.append(np.tile(n, (int(keep.sum()), 1)))
        areas.append(np.full(int(keep.sum()), du * dv))
        face_ids.append(owner[keep])
        scattering.append(np.full(int(keep.sum()), s))

    def _cat(parts: list, width: int = 0) -> NDArray:
        if parts:
            return np.concatenate(parts)
        return np.zeros((0, width)) if width else np.zeros(0)

    return TileSet(
        centers=_cat(centers, 3),
        normals=_cat(normals, 3),
        areas=_cat(areas),
        face_ids=_cat(face_ids).astype(np.int64),
        scattering=_cat(scattering),
        plane_point=np.array(plane_point, dtype=np.float64).reshape(-1, 3),
        plane_normal=np.array(plane_normal, dtype=np.float64).reshape(-1, 3),
        plane_faces=tuple(plane_faces),
        face_group=face_group,
        grid_origin=np.array(grid_origin, dtype=np.float64).reshape(-1, 3),
        grid_u=np.array(grid_u, dtype=np.float64).reshape(-1, 3),
        grid_v=np.array(grid_v, dtype=np.float64).reshape(-1, 3),
        grid_step=np.array(grid_step, dtype=np.float64).reshape(-1, 2),
        grid_shape=np.array(grid_shape, dtype=np.int64).reshape(-1, 2),
        grid_offset=np.array(grid_offset, dtype=np.int64),
        cell_tile=_cat(cells).astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class _TileIllumination:
    """Transmitter-side factors of the Lambertian weight, per tile."""

    visible: NDArray[np.bool_]
    side: NDArray[np.float64]  # n . (tx - c), signed
    distance: NDArray[np.float64]
    cos_i: NDArray[np.float64]
    gamma2: NDArray[np.float64]

    @property
    def factor(self) -> NDArray[np.float64]:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.visible, self.cos_i * self.gamma2 / self.distance**2, 0.0)


@dataclass(frozen=True, eq=False)
class _SbrLevel:
    """Segments after ``k`` reflections (``sequences`` has k columns)."""

    origins: NDArray[np.float64]
    dirs: NDArray[np.float64]
    t_end: NDArray[np.float64]
    unfolded: NDArray[np.float64]
    sequences: NDArray[np.int64]
    hit_face: NDArray[np.int64]


@dataclass(frozen=True, eq=False)
class _Candidate:
    chain: NDArray[np.float64]
    interactions: tuple[Interaction, ...]


def _face_normals(scene: Scene) -> NDArray[np.float64]:
    return np.array([f.normal for f in scene.faces], dtype=np.float64).reshape(-1, 3)


def _sequences(n_faces: int, max_len: int) -> list[tuple[int, ...]]:
    """All face sequences up to ``max_len`` without a face repeated back to back."""
    out: list[tuple[int, ...]] = []
    for k in range(1, max_len + 1):
        for seq in itertools.product(range(n_faces), repeat=k):
            if all(a != b for a, b in zip(seq, seq[1:])):
                out.append(seq)
    return out


def _diffraction_point(edge: Edge, tx: Vec3, rx: Vec3) -> Optional[Vec3]:
    """Point on the edge minimizing |tx - Q| + |Q - rx|, strictly inside the edge."""
    u = edge.direction
    a = edge.start
    a1 = float((tx - a) @ u)
    a2 = float((rx - a) @ u)
    r1 = float(np.linalg.norm(tx - a - a1 * u))
    r2 = float(np.linalg.norm(rx - a - a2 * u))
    if r1 < _PLANE_TOL or r2 < _PLANE_TOL:
        return None
    s = (a1 * r2 + a2 * r1) / (r1 + r2)
    if not _PLANE_TOL < s < edge.length - _PLANE_TOL:
        return None
    return a + s * u


class Tracer:
    """Per-run tracing state over the static scene for one transmitter.

    Args:
        scene: Static scene (buildings and ground).
        cfg: Tracing parameters.
        tx: Transmitter antenna position.
        bvh: Prebuilt accelerator for ``scene``; built here when omitted.
    """

    def __init__(
        self, scene: Scene, cfg: TraceConfig, tx: Vec3, bvh: Optional[BVH] = None
    ) -> None:
        tx = np.asarray(tx, dtype=np.float64)
        if tx.shape != (3,) or not np.all(np.isfinite(tx)):
            raise GeometryError(f"Transmitter position must be a finite 3-vector, got {tx}")
        self.scene = scene
        self.cfg = cfg
        self.tx = tx
        self.static_bvh = bvh if bvh is not None else build_accelerator(scene)

        self.edges_by_structure: dict[int, list[Edge]] = {}
        for edge in scene.edges:
            if max(abs(float(edge.start[2])), abs(float(edge.end[2]))) <= _GROUND_Z_TOL:
                continue
            dz = abs(float(edge.direction[2]))
            if dz >= 1.0 - _EDGE_AXIS_TOL or dz <= _EDGE_AXIS_TOL:
                self.edges_by_structure.setdefault(edge.structure_id, []).append(edge)

    @cached_property
    def directions(self) -> NDArray[np.float64]:
        return launch_directions(self.cfg.ray_spacing_deg)

    @cached_property
    def tiles(self) -> TileSet:
        tiles = build_tiles(self.scene, self.cfg.tile_area)
        logger.debug(f"Built {len(tiles)} diffuse tiles over {len(tiles.plane_faces)} planes")
        return tiles

    @cached_property
    def illumination(self) -> _TileIllumination:
        """Direct illumination of every tile from the transmitter (static geometry)."""
        tiles = self.tiles
        delta = self.tx - tiles.centers
        distance = np.linalg.norm(delta, axis=1)
        side = np.einsum("ij,ij->i", tiles.normals, delta)
        visible = (np.abs(side) > _PLANE_TOL) & (distance > 2 * EPS_RAY)
        if np.any(visible):
            idx = np.flatnonzero(visible)
            blocked = occluded_batch(
                self.static_bvh, np.tile(self.tx, (len(idx), 1)), tiles.centers[idx]
            )
            visible[idx[blocked]] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            cos_i = np.where(distance > 0, np.abs(side) / distance, 0.0)
        return _TileIllumination(
            visible=visible,
            side=side,
            distance=distance,
            cos_i=cos_i,
            gamma2=self._tile_gamma2(tiles.face_ids, cos_i),
        )

    @cached_property
    def scatter_pool(self) -> NDArray[np.int64]:
        """Tiles eligible for scatter-then-reflect paths, strongest Tx illumination first."""
        lit = self.illumination
        weight = self.tiles.scattering**2 * self.tiles.areas * lit.factor
        idx = np.flatnonzero(weight > 0)
        order = idx[np.lexsort((idx, -weight[idx]))]
        if len(self.scene.faces) > self.cfg.exhaustive_face_limit:
            order = order[: self.cfg.scatter_tile_pool]
        return order

    def _tile_gamma2(self, face_ids: NDArray[np.int64], cos_i: NDArray[np.float64]) -> NDArray[np.float64]:
        gamma2 = np.zeros(len(face_ids))
        materials = np.array([self.scene.faces[int(f)].material_id for f in face_ids], dtype=object)
        for name in sorted(set(materials.tolist())):
            mask = materials == name
            gamma2[mask] = reflection_power_batch(self.scene.materials[name], cos_i[mask], self.cfg.f)
        return gamma2

    def snapshot(self, dynamic_boxes: Sequence[Box] = ()) -> "Snapshot":
        """Scene with the given UAV bodies inserted, SBR already shot."""
        if dynamic_boxes:
            scene, ranges = self.scene.with_boxes(dynamic_boxes)
            bvh = build_accelerator(scene)
        else:
            scene, ranges, bvh = self.scene, [], self.static_bvh
        return Snapshot(self, scene, bvh, ranges)


class Snapshot:
    """One scene (static geometry plus UAV bodies) ready to serve receivers."""

    def __init__(self, tracer: Tracer, scene: Scene, bvh: BVH, body_faces: list[range]) -> None:
        self.tracer = tracer
        self.cfg = tracer.cfg
        self.tx = tracer.tx
        self.scene = scene
        self.bvh = bvh
        self.body_faces = body_faces
        self.normals = _face_normals(scene)
        self.exhaustive = len(scene.faces) <= self.cfg.exhaustive_face_limit
        self.levels: list[_SbrLevel] = [] if self.exhaustive else self._shoot()

    def body_exclusion(self, index: int) -> frozenset[int]:
        """Face ids of the ``index``-th inserted body (a receiver's own UAV)."""
        return frozenset(self.body_faces[index])

    # ------------------------------------------------------------------
    # SBR

    def _shoot(self) -> list[_SbrLevel]:
        dirs = self.tracer.directions
        n = len(dirs)
        origins = np.tile(self.tx, (n, 1))
        unfolded = np.zeros(n)
        sequences = np.zeros((n, 0), dtype=np.int64)
        levels = []
        depth = self.cfg.sbr_depth
        for level in range(depth + 1):
            hits = intersect_batch(self.bvh, origins, dirs, _T_FAR)
            t_end = np.where(hits.hit, hits.t, _T_FAR)
            levels.append(_SbrLevel(origins, dirs, t_end, unfolded, sequences, hits.face_id))
            alive = hits.hit
            if level == depth or not np.any(alive):
                break
            fid = hits.face_id[alive]
            nrm = self.normals[fid]
            d = dirs[alive]
            origins = origins[alive] + t_end[alive, None] * d
            dirs = d - 2.0 * np.einsum("ij,ij->i", d, nrm)[:, None] * nrm
            unfolded = unfolded[alive] + t_end[alive]
            sequences = np.column_stack([sequences[alive], fid])
        logger.debug(
            f"SBR: {n} launches, {len(levels)} levels, "
            f"{sum(len(lv.origins) for lv in levels)} segments"
        )
        return levels

    def _received(self, level: _SbrLevel, rx: Vec3) -> NDArray[np.bool_]:
        w = rx - level.origins
        t = np.clip(np.einsum("ij,ij->i", w, level.dirs), 0.0, level.t_end)
        miss = np.linalg.norm(w - t[:, None] * level.dirs, axis=1)
        radius = (level.unfolded + t) * self.cfg.spacing_rad * self.cfg.reception_factor
        return miss <= radius

    @cached_property
    def _all_sequences(self) -> list[tuple[int, ...]]:
        return _sequences(len(self.scene.faces), self.cfg.max_reflections)

    def specular_candidates(self, rx: Vec3) -> list[tuple[int, ...]]:
        """Face sequences worth refining for this receiver."""
        if self.exhaustive:
            return self._all_sequences
        found: set[tuple[int, ...]] = set()
        for level in self.levels[1 : self.cfg.max_reflections + 1]:
            mask = self._received(level, rx)
            if np.any(mask):
                for row in np.unique(level.sequences[mask], axis=0):
                    found.add(tuple(int(x) for x in row))
        return sorted(found, key=lambda s: (len(s), s))

    # ------------------------------------------------------------------
    # Exact construction

    def _image_chain(self, source: Vec3, seq: Sequence[int], target: Vec3) -> Optional[NDArray[np.float64]]:
        """Exact reflection points from ``source`` over ``seq`` to ``target``, or None."""
        faces = self.scene.faces
        images = [source]
        for fid in seq:
            images.append(mirror_point(images[-1], faces[fid]))

        points: list[Vec3] = [source] * len(seq)
        x = target
        for j in range(len(seq) - 1, -1, -1):
            face = faces[seq[j]]
            n = self.normals[seq[j]]
            v0 = face.vertices[0]
            img = images[j + 1]
            dx = float(n @ (x - v0))
            di = float(n @ (img - v0))
            if abs(dx) <= _PLANE_TOL or dx * di >= 0.0:
                return None
            p = x + (dx / (dx - di)) * (img - x)
            if not point_in_triangle(p, face.vertices)[0]:
                return None
            points[j] = p
            x = p

        chain = [source, *points, target]
        for j, fid in enumerate(seq):
            n = self.normals[fid]
            v0 = faces[fid].vertices[0]
            before = float(n @ (chain[j] - v0))
            after = float(n @ (chain[j + 2] - v0))
            if abs(before) <= _PLANE_TOL or abs(after) <= _PLANE_TOL or before * after <= 0.0:
                return None
        return np.array(chain)

    def _reflection(self, fid: int, point: Vec3) -> Interaction:
        return Interaction(
            kind=InteractionKind.REFLECTION,
            point=point,
            face_id=fid,
            material_id=self.scene.faces[fid].material_id,
            normal=self.normals[fid],
        )

    def _unoccluded(self, chains: Sequence[NDArray[np.float64]], exclude: Optional[Iterable[int]]) -> NDArray[np.bool_]:
        """Validate every segment of every chain; the last segment ignores ``exclude``."""
        ok = np.ones(len(chains), dtype=bool)
        inner_a, inner_b, inner_owner = [], [], []
        last_a, last_b, last_owner = [], [], []
        for i, chain in enumerate(chains):
            seg_len = np.linalg.norm(np.diff(chain, axis=0), axis=1)
            if np.any(seg_len <= 2.0 * EPS_RAY):
                ok[i] = False
                continue
            for j in range(len(chain) - 2):
                inner_a.append(chain[j])
                inner_b.append(chain[j + 1])
                inner_owner.append(i)
            last_a.append(chain[-2])
            last_b.append(chain[-1])
            last_owner.append(i)
        if inner_a:
            blocked = occluded_batch(self.bvh, np.array(inner_a), np.array(inner_b))
            ok[np.asarray(inner_owner)[blocked]] = False
        if last_a:
            blocked = occluded_batch(self.bvh, np.array(last_a), np.array(last_b), exclude=exclude)
            ok[np.asarray(last_owner)[blocked]] = False
        return ok

    # ------------------------------------------------------------------
    # Path families

    def _check_rx(self, rx: Vec3) -> Vec3:
        rx = np.asarray(rx, dtype=np.float64)
        if rx.shape != (3,) or not np.all(np.isfinite(rx)):
            raise GeometryError(f"Receiver position must be a finite 3-vector, got {rx}")
        if np.array_equal(rx, self.tx):
            raise GeometryError("Transmitter and receiver coincide")
        return rx

    def trace_specular(self, rx: Vec3, exclude: Optional[Iterable[int]] = None) -> list[RayPath]:
        """LOS (when clear) plus exact specular paths up to ``max_reflections``."""
        rx = self._check_rx(rx)
        exclude = frozenset(exclude or ())
        paths: list[RayPath] = []
        if not occluded(self.bvh, self.tx, rx, exclude=exclude):
            paths.append(RayPath(vertices=np.array([self.tx, rx])))

        seqs, chains = [], []
        for seq in self.specular_candidates(rx):
            chain = self._image_chain(self.tx, seq, rx)
            if chain is not None:
                seqs.append(seq)
                chains.append(chain)
        if not chains:
            return paths

        ok = self._unoccluded(chains, exclude)
        kept: list[NDArray[np.float64]] = []
        for seq, chain, valid in zip(seqs, chains, ok):
            if not valid:
                continue
            if any(
                k.shape == chain.shape and float(np.max(np.abs(k - chain))) <= _DUPLICATE_TOL
                for k in kept
            ):
                continue
            kept.append(chain)
            interactions = tuple(self._reflection(fid, chain[j + 1]) for j, fid in enumerate(seq))
            paths.append(RayPath(vertices=chain, interactions=interactions))
        return paths

    def trace_diffraction(self, rx: Vec3, exclude: Optional[Iterable[int]] = None) -> list[RayPath]:
        """First-order knife-edge paths, one per blocking static structure."""
        rx = self._check_rx(rx)
        exclude = frozenset(exclude or ())
        if not occluded(self.bvh, self.tx, rx, exclude=exclude):
            return []
        static = self.scene.static_face_count
        blocking = segment_faces(self.bvh, self.tx, rx, exclude=exclude)
        structures = sorted({self.scene.faces[f].structure_id for f in blocking if f < static})

        lam = self.cfg.wavelength
        total = float(np.linalg.norm(rx - self.tx))
        axis = (rx - self.tx) / total
        options: list[tuple[int, float, int, NDArray[np.float64]]] = []
        for sid in structures:
            for edge in self.tracer.edges_by_structure.get(sid, ()):
                q = _diffraction_point(edge, self.tx, rx)
                if q is None:
                    continue
                d1 = float((q - self.tx) @ axis)
                d2 = total - d1
                if d1 <= 0.0 or d2 <= 0.0:
                    continue
                h = float(np.linalg.norm(q - self.tx - d1 * axis))
                options.append((sid, fresnel_kirchhoff_nu(h, d1, d2, lam), edge.edge_id, q))
        if not options:
            return []

        options.sort(key=lambda o: (o[0], o[1], o[2]))
        ok = self._unoccluded([np.array([self.tx, q, rx]) for *_, q in options], exclude)
        paths = []
        done: set[int] = set()
        for (sid, nu, edge_id, q), valid in zip(options, ok):
            if not valid or sid in done:
                continue
            done.add(sid)
            hit = Interaction(kind=InteractionKind.DIFFRACTION, point=q, edge_id=edge_id, nu=nu)
            paths.append(RayPath(vertices=np.array([self.tx, q, rx]), interactions=(hit,)))
        return paths

    def _scatter(self, tile: int, point: Vec3) -> Interaction:
        tiles = self.tracer.tiles
        fid = int(tiles.face_ids[tile])
        return Interaction(
            kind=InteractionKind.SCATTERING,
            point=point,
            face_id=fid,
            material_id=self.scene.faces[fid].material_id,
            normal=tiles.normals[tile],
            area=float(tiles.areas[tile]),
        )

    @cached_property
    def _pre_scatter(self) -> tuple[list[tuple[int, ...]], NDArray[np.int64], _TileIllumination]:
        """(reflection sequence, tile) pairs seen by the transmitter after 1+ bounces."""
        tiles = self.tracer.tiles
        max_pre = min(self.cfg.ds_max_interactions - 1, self.cfg.sbr_depth)
        pairs: set[tuple[tuple[int, ...], int]] = set()
        if max_pre >= 1 and len(tiles):
            if self.exhaustive:
                for seq in _sequences(len(self.scene.faces), max_pre):
                    for t in range(len(tiles)):
                        if int(tiles.face_ids[t]) != seq[-1]:
                            pairs.add((seq, t))
            else:
                for level in self.levels[1 : max_pre + 1]:
                    hit = level.hit_face >= 0
                    if not np.any(hit):
                        continue
                    points = level.origins[hit] + level.t_end[hit, None] * level.dirs[hit]
                    located = tiles.locate(points, level.hit_face[hit])
                    for row, t in zip(level.sequences[hit], located):
                        if t >= 0:
                            pairs.add((tuple(int(x) for x in row), int(t)))

        ordered = sorted(pairs, key=lambda p: (len(p[0]), p[0], p[1]))
        seqs = [p[0] for p in ordered]
        tile_idx = np.array([p[1] for p in ordered], dtype=np.int64)
        images: dict[tuple[int, ...], Vec3] = {}
        sources = np.zeros((len(ordered), 3))
        for k, seq in enumerate(seqs):
            if seq not in images:
                img = self.tx
                for fid in seq:
                    img = mirror_point(img, self.scene.faces[fid])
                images[seq] = img
            sources[k] = images[seq]

        centers = tiles.centers[tile_idx] if len(tile_idx) else np.zeros((0, 3))
        delta = sources - centers
        distance = np.linalg.norm(delta, axis=1)
        side = np.einsum("ij,ij->i", tiles.normals[tile_idx], delta) if len(tile_idx) else np.zeros(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            cos_i = np.where(distance > 0, np.abs(side) / distance, 0.0)
        lit = _TileIllumination(
            visible=(np.abs(side) > _PLANE_TOL) & (distance > 2 * EPS_RAY),
            side=side,
            distance=distance,
            cos_i=cos_i,
            gamma2=self.tracer._tile_gamma2(tiles.face_ids[tile_idx], cos_i),
        )
        return seqs, tile_idx, lit

    def trace_diffuse(
        self, rx: Vec3, exclude: Optional[Iterable[int]] = None, limit: Optional[int] = None
    ) -> list[RayPath]:
        """Single-scatter Lambertian paths, strongest geometric weight first.

        Args:
            rx: Receiver antenna position.
            exclude: Faces ignored on the final segment (the receiver's own body).
            limit: Keep at most this many valid paths; all when None.
        """
        rx = self._check_rx(rx)
        exclude = frozenset(exclude or ())
        tiles = self.tracer.tiles
        if not len(tiles) or limit == 0:
            return []

        families: list[tuple[NDArray[np.float64], Callable[[int], Optional[_Candidate]]]] = []

        # Tx-S-Rx
        lit = self.tracer.illumination
        families.append((self._direct_weights(rx, lit), lambda i: self._direct_candidate(i, rx)))

        if self.cfg.ds_max_interactions >= 2:
            seqs, tile_idx, pre = self._pre_scatter
            weights = self._weights(rx, tile_idx, pre)
            families.append(
                (weights, lambda i: self._reflect_scatter_candidate(seqs[i], int(tile_idx[i]), rx))
            )
            post_w, post_tile, post_plane = self._post_scatter_weights(rx)
            families.append(
                (
                    post_w,
                    lambda i: self._scatter_reflect_candidate(int(post_tile[i]), int(post_plane[i]), rx),
                )
            )

        weight = np.concatenate([w for w, _ in families])
        family = np.concatenate([np.full(len(w), k) for k, (w, _) in enumerate(families)])
        index = np.concatenate([np.arange(len(w)) for w, _ in families])
        live = np.flatnonzero(weight > 0)
        order = live[np.lexsort((index[live], family[live], -weight[live]))]

        paths: list[RayPath] = []
        pos, chunk = 0, 64
        while pos < len(order) and (limit is None or len(paths) < limit):
            batch = order[pos : pos + chunk]
            pos += len(batch)
            chunk = min(chunk * 2, 4096)
            built = [families[family[k]][1](int(index[k])) for k in batch]
            candidates = [c for c in built if c is not None]
            if not candidates:
                continue
            ok = self._unoccluded([c.chain for c in candidates], exclude)
            for cand, valid in zip(candidates, ok):
                if valid:
                    paths.append(RayPath(vertices=cand.chain, interactions=cand.interactions))
        if limit is not None:
            paths = paths[:limit]
        return paths

    def _weights(self, rx: Vec3, tile_idx: NDArray[np.int64], lit: _TileIllumination) -> NDArray[np.float64]:
        """Lambertian weight S^2 A |G|^2 cos_i cos_s / (r_i^2 r_s^2) per tile."""
        tiles = self.tracer.tiles
        if not len(tile_idx):
            return np.zeros(0)
        delta = rx - tiles.centers[tile_idx]
        rs = np.linalg.norm(delta, axis=1)
        ns = np.einsum("ij,ij->i", tiles.normals[tile_idx], delta)
        usable = lit.visible & (ns * lit.side > 0.0) & (rs > 2 * EPS_RAY)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = (
                tiles.scattering[tile_idx] ** 2
                * tiles.areas[tile_idx]
                * lit.factor
                * (np.abs(ns) / rs)
                / rs**2
            )
        return np.where(usable, w, 0.0)

    def _direct_weights(self, rx: Vec3, lit: _TileIllumination) -> NDArray[np.float64]:
        return self._weights(rx, np.arange(len(self.tracer.tiles)), lit)

    def _direct_candidate(self, tile: int, rx: Vec3) -> Optional[_Candidate]:
        c = self.tracer.tiles.centers[tile]
        return _Candidate(chain=np.array([self.tx, c, rx]), interactions=(self._scatter(tile, c),))

    def _reflect_scatter_candidate(self, seq: tuple[int, ...], tile: int, rx: Vec3) -> Optional[_Candidate]:
        c = self.tracer.tiles.centers[tile]
        head = self._image_chain(self.tx, seq, c)
        if head is None:
            return None
        chain = np.vstack([head, rx[None, :]])
        interactions = tuple(self._reflection(fid, head[j + 1]) for j, fid in enumerate(seq))
        return _Candidate(chain=chain, interactions=(*interactions, self._scatter(tile, c)))

    def _post_scatter_weights(
        self, rx: Vec3
    ) -> tuple[NDArray[np.float64], NDArray[np.int64], NDArray[np.int64]]:
        """Weights of (tile, plane) pairs scattering towards the image of rx."""
        tiles = self.tracer.tiles
        pool = self.tracer.scatter_pool
        empty = (np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        if not len(pool) or not len(tiles.plane_faces):
            return empty
        lit = self.tracer.illumination
        pn, pp = tiles.plane_normal, tiles.plane_point
        dist_rx = np.einsum("ij,ij->i", rx - pp, pn)  # (G,)
        images = rx - 2.0 * dist_rx[:, None] * pn
        centers = tiles.centers[pool]
        dist_c = np.einsum("pgk,gk->pg", centers[:, None, :] - pp[None, :, :], pn)
        delta = images[None, :, :] - centers[:, None, :]
        rs = np.linalg.norm(delta, axis=2)
        ns = np.einsum("pgk,pk->pg", delta, tiles.normals[pool])
        usable = (
            (np.abs(dist_c) > _PLANE_TOL)
            & (np.abs(dist_rx)[None, :] > _PLANE_TOL)
            & (dist_c * dist_rx[None, :] > 0.0)
            & (ns * lit.side[pool][:, None] > 0.0)
            & (rs > 2 * EPS_RAY)
        )
        tx_factor = tiles.scattering[pool] ** 2 * tiles.areas[pool] * lit.factor[pool]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = tx_factor[:, None] * (np.abs(ns) / rs) / rs**2
        w = np.where(usable, w, 0.0)
        p_idx, g_idx = np.nonzero(w > 0)
        return w[p_idx, g_idx], pool[p_idx], g_idx.astype(np.int64)

    def _scatter_reflect_candidate(self, tile: int, plane: int, rx: Vec3) -> Optional[_Candidate]:
        tiles = self.tracer.tiles
        c = tiles.centers[tile]
        n = tiles.plane_normal[plane]
        o = tiles.plane_point[plane]
        dc = float(n @ (c - o))
        dr = float(n @ (rx - o))
        image = rx - 2.0 * dr * n
        p = c + (dc / (dc + dr)) * (image - c)
        owner = next(
            (
                fid
                for fid in tiles.plane_faces[plane]
                if point_in_triangle(p, self.scene.faces[fid].vertices)[0]
            ),
            None,
        )
        if owner is None:
            return None
        chain = np.array([self.tx, c, p, rx])
        return _Candidate(chain=chain, interactions=(self._scatter(tile, c), self._reflection(owner, p)))

    def trace(self, rx: Vec3, exclude: Optional[Iterable[int]] = None) -> list[RayPath]:
        """Every enabled path family for one receiver, in canonical order."""
        paths = self.trace_specular(rx, exclude)
        if self.cfg.diffraction:
            paths.extend(self.trace_diffraction(rx, exclude))
        if self.cfg.diffuse:
            paths.extend(self.trace_diffuse(rx, exclude, limit=self.cfg.diffuse_path_limit))
        return paths


# ----------------------------------------------------------------------------
# Functional entry points
# ----------------------------------------------------------------------------


def trace_specular(
    scene: Scene, bvh: BVH, tx: Vec3, rx: Vec3, cfg: TraceConfig, exclude: Optional[Iterable[int]] = None
) -> list[RayPath]:
    return Tracer(scene, cfg, tx, bvh=bvh).snapshot().trace_specular(rx, exclude)


def trace_diffraction(
    scene: Scene, bvh: BVH, tx: Vec3, rx: Vec3, cfg: TraceConfig, exclude: Optional[Iterable[int]] = None
) -> list[RayPath]:
    return Tracer(scene, cfg, tx, bvh=bvh).snapshot().trace_diffraction(rx, exclude)


def trace_diffuse(
    scene: Scene,
    bvh: BVH,
    tx: Vec3,
    rx: Vec3,
    cfg: TraceConfig,
    exclude: Optional[Iterable[int]] = None,
    limit: Optional[int] = None,
) -> list[RayPath]:
    return Tracer(scene, cfg, tx, bvh=bvh).snapshot().trace_diffuse(rx, exclude, limit=limit)
