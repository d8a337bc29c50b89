"""Scene geometry, BVH acceleration structure and ray queries.

Coordinates are metres, x east, y north, z up. Input boxes are tessellated to
12 triangles at load time so every query downstream runs one triangle kernel.

Queries are batched: a packet of rays walks the BVH together and each node
only keeps the rays whose slab test passes. Single-ray helpers (``intersect``,
``occluded``) wrap the batch kernel.

Hits closer than ``EPS_RAY`` are ignored so rays leaving an interaction point
never re-hit the face they start on. Hits within 1 nm of the nearest one (a ray
through a shared triangle edge or a box corner) resolve to the lowest face id.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray

from mmwave_uav_sim import canonical
from mmwave_uav_sim.electromagnetics import Material
from mmwave_uav_sim.errors import GeometryError, MaterialError, SceneError

Vec3 = NDArray[np.float64]

EPS_RAY = 1e-4
MIN_FACE_AREA = 1e-9
UNIT_TOLERANCE = 1e-9

_BARY_TOL = 1e-10
_PARALLEL_TOL = 1e-12
_TIE_TOL = 1e-9  # hits this close in t count as the same distance
_LEAF_SIZE = 4
_NODE_PAD = 1e-6

# Box corners are indexed by bits (x, y, z); quads listed counter-clockwise
# seen from outside so triangle normals point outward.
_BOX_QUADS = (
    (0, 4, 6, 2),  # -x
    (1, 3, 7, 5),  # +x
    (0, 1, 5, 4),  # -y
    (2, 6, 7, 3),  # +y
    (0, 2, 3, 1),  # -z
    (4, 5, 7, 6),  # +z
)


def vec3(x: float, y: float, z: float) -> Vec3:
    return np.array([x, y, z], dtype=np.float64)


def normalize(v: Vec3) -> Vec3:
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise GeometryError(f"Cannot normalize vector {v}")
    return v / norm


def is_unit(v: Vec3) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= UNIT_TOLERANCE


# ----------------------------------------------------------------------------
# Scene description
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as written in scene files."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]
    material: str

    def corners(self) -> NDArray[np.float64]:
        lo, hi = self.min, self.max
        return np.array(
            [
                [hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                for i in range(8)
            ],
            dtype=np.float64,
        )

    def triangles(self) -> list[NDArray[np.float64]]:
        c = self.corners()
        tris = []
        for a, b, cc, d in _BOX_QUADS:
            tris.append(np.stack([c[a], c[b], c[cc]]))
            tris.append(np.stack([c[a], c[cc], c[d]]))
        return tris

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max), "material": self.material}


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle mesh as written in scene files."""

    vertices: tuple[tuple[float, float, float], ...]
    triangles: tuple[tuple[int, int, int], ...]
    material: str

    def triangle_vertices(self) -> list[NDArray[np.float64]]:
        verts = np.asarray(self.vertices, dtype=np.float64)
        return [verts[list(tri)] for tri in self.triangles]

    def to_dict(self) -> dict:
        return {
            "vertices": [list(v) for v in self.vertices],
            "triangles": [list(t) for t in self.triangles],
            "material": self.material,
        }


@dataclass(frozen=True, eq=False)
class Face:
    """One triangle of the scene."""

    face_id: int
    vertices: NDArray[np.float64]
    material_id: str
    structure_id: int = 0

    @property
    def normal(self) -> Vec3:
        v0, v1, v2 = self.vertices
        return normalize(np.cross(v1 - v0, v2 - v0))

    @property
    def area(self) -> float:
        v0, v1, v2 = self.vertices
        return 0.5 * float(np.linalg.norm(np.cross(v1 - v0, v2 - v0)))

    @property
    def centroid(self) -> Vec3:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True, eq=False)
class Edge:
    """Straight feature edge of the static geometry (diffraction candidate)."""

    edge_id: int
    start: Vec3
    end: Vec3
    structure_id: int

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self) -> Vec3:
        return normalize(self.end - self.start)


@dataclass(frozen=True)
class Hit:
    t: float
    point: Vec3
    face_id: int
    barycentric: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable triangle scene.

    ``boxes``/``meshes`` keep the source description of the static geometry
    for canonical re-serialization; faces beyond ``static_face_count`` were
    added with :meth:`with_boxes` (UAV bodies) and carry no edges.
    """

    faces: tuple[Face, ...]
    materials: dict[str, Material]
    boxes: tuple[Box, ...] = ()
    meshes: tuple[Mesh, ...] = ()
    transmitter: Optional[tuple[float, float, float]] = None
    edges: tuple[Edge, ...] = ()
    static_face_count: int = 0
    bounds: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for i, face in enumerate(self.faces):
            if face.face_id != i:
                raise SceneError(f"Face ids must be contiguous: index {i} has id {face.face_id}")
            if face.material_id not in self.materials:
                raise SceneError(f"unknown material '{face.material_id}' on face {i}")
        if self.faces:
            verts = np.concatenate([f.vertices for f in self.faces])
            bounds = np.stack([verts.min(axis=0), verts.max(axis=0)])
        else:
            bounds = np.zeros((2, 3))
        object.__setattr__(self, "bounds", bounds)

    def __len__(self) -> int:
        return len(self.faces)

    def face(self, face_id: int) -> Face:
        return self.faces[face_id]

    def material_of(self, face_id: int) -> Material:
        return self.materials[self.faces[face_id].material_id]

    @property
    def structure_count(self) -> int:
        return 1 + max((f.structure_id for f in self.faces), default=-1)

    def with_boxes(self, boxes: Sequence[Box]) -> tuple["Scene", list[range]]:
        """Return a new scene with ``boxes`` appended as dynamic geometry.

        Returns:
            The new scene and, per box, the range of face ids it occupies.
        """
        faces = list(self.faces)
        ranges = []
        structure = self.structure_count
        for box in boxes:
            start = len(faces)
            for tri in box.triangles():
                faces.append(_make_face(len(faces), tri, box.material, structure))
            ranges.append(range(start, len(faces)))
            structure += 1
        scene = Scene(
            faces=tuple(faces),
            materials=self.materials,
            boxes=self.boxes,
            meshes=self.meshes,
            transmitter=self.transmitter,
            edges=self.edges,
            static_face_count=self.static_face_count,
        )
        return scene, ranges

    def with_materials(self, extra: dict[str, Material]) -> "Scene":
        """Copy of the scene with additional material entries (existing names win)."""
        materials = {**extra, **self.materials}
        return Scene(
            faces=self.faces,
            materials=materials,
            boxes=self.boxes,
            meshes=self.meshes,
            transmitter=self.transmitter,
            edges=self.edges,
            static_face_count=self.static_face_count,
        )


def _make_face(face_id: int, tri: NDArray[np.float64], material: str, structure_id: int) -> Face:
    tri = np.asarray(tri, dtype=np.float64)
    if tri.shape != (3, 3) or not np.all(np.isfinite(tri)):
        raise SceneError(f"Face {face_id}: vertices must be three finite 3D points")
    area = 0.5 * float(np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])))
    if area <= MIN_FACE_AREA:
        raise SceneError(f"degenerate geometry: face {face_id} has area {area:.3g} m^2")
    return Face(face_id=face_id, vertices=tri, material_id=material, structure_id=structure_id)


def build_scene(
    materials: dict[str, Material],
    boxes: Sequence[Box] = (),
    meshes: Sequence[Mesh] = (),
    transmitter: Optional[Sequence[float]] = None,
) -> Scene:
    """Tessellate boxes and meshes into a scene with resolved materials and edges."""
    faces: list[Face] = []
    structure = 0
    for box in boxes:
        lo, hi = np.asarray(box.min), np.asarray(box.max)
        if np.any(hi <= lo):
            raise SceneError(f"degenerate geometry: box {structure} has min {box.min} >= max {box.max}")
        if box.material not in materials:
            raise SceneError(f"unknown material '{box.material}' on box {structure}")
        for tri in box.triangles():
            faces.append(_make_face(len(faces), tri, box.material, structure))
        structure += 1
    for mesh in meshes:
        if mesh.material not in materials:
            raise SceneError(f"unknown material '{mesh.material}' on mesh {structure}")
        n_verts = len(mesh.vertices)
        for tri_idx in mesh.triangles:
            if any(i < 0 or i >= n_verts for i in tri_idx):
                raise SceneError(f"Mesh {structure}: triangle {tri_idx} references a missing vertex")
        for tri in mesh.triangle_vertices():
            faces.append(_make_face(len(faces), tri, mesh.material, structure))
        structure += 1

    edges = _feature_edges(faces)
    tx = tuple(float(c) for c in transmitter) if transmitter is not None else None
    return Scene(
        faces=tuple(faces),
        materials=dict(materials),
        boxes=tuple(boxes),
        meshes=tuple(meshes),
        transmitter=tx,  # type: ignore[arg-type]
        edges=tuple(edges),
        static_face_count=len(faces),
    )


def _feature_edges(faces: Sequence[Face]) -> list[Edge]:
    """Triangle edges that are boundaries or creases (not coplanar diagonals)."""
    shared: dict[tuple, list[int]] = {}
    for face in faces:
        keys = [tuple(np.round(v, 9)) for v in face.vertices]
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = tuple(sorted((keys[a], keys[b])))
            shared.setdefault(key, []).append(face.face_id)

    edges = []
    for key in sorted(shared, key=lambda k: (faces[shared[k][0]].structure_id, k)):
        owners = shared[key]
        if len(owners) >= 2:
            normals = [faces[i].normal for i in owners]
            coplanar = all(abs(float(np.dot(normals[0], n))) > 1.0 - 1e-9 for n in normals[1:])
            if coplanar:
                continue
        start, end = (np.asarray(p, dtype=np.float64) for p in key)
        edges.append(
            Edge(
                edge_id=len(edges),
                start=start,
                end=end,
                structure_id=faces[owners[0]].structure_id,
            )
        )
    return edges


# ----------------------------------------------------------------------------
# Scene file IO
# ----------------------------------------------------------------------------


def _parse_material(name: str, entry: Any) -> Material:
    if not isinstance(entry, dict):
        raise SceneError(f"Material '{name}' must be an object")
    unknown = set(entry) - {"eps_real", "sigma", "is_pec", "scattering_s"}
    if unknown:
        raise SceneError(f"Material '{name}': unknown keys {sorted(unknown)}")
    try:
        return Material(
            name=name,
            eps_real=float(entry.get("eps_real", 1.0)),
            sigma=float(entry.get("sigma", 0.0)),
            is_pec=bool(entry.get("is_pec", False)),
            scattering_s=float(entry.get("scattering_s", 0.0)),
        )
    except (TypeError, ValueError, MaterialError) as e:
        raise SceneError(f"Material '{name}': {e}") from e


def parse_scene(data: Any) -> Scene:
    """Build a Scene from the decoded scene JSON document."""
    if not isinstance(data, dict):
        raise SceneError("Scene document must be a JSON object")
    unknown = set(data) - {"materials", "boxes", "meshes", "transmitter"}
    if unknown:
        raise SceneError(f"Scene document has unknown keys {sorted(unknown)}")

    raw_materials = data.get("materials", {})
    if not isinstance(raw_materials, dict):
        raise SceneError("'materials' must be an object")
    materials = {name: _parse_material(name, entry) for name, entry in raw_materials.items()}

    try:
        boxes = [
            Box(
                min=tuple(float(c) for c in b["min"]),  # type: ignore[arg-type]
                max=tuple(float(c) for c in b["max"]),  # type: ignore[arg-type]
                material=str(b["material"]),
            )
            for b in data.get("boxes", [])
        ]
        meshes = [
            Mesh(
                vertices=tuple(tuple(float(c) for c in v) for v in m["vertices"]),  # type: ignore[misc]
                triangles=tuple(tuple(int(i) for i in t) for t in m["triangles"]),  # type: ignore[misc]
                material=str(m["material"]),
            )
            for m in data.get("meshes", [])
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise SceneError(f"Malformed geometry entry: {e!r}") from e

    for box in boxes:
        if len(box.min) != 3 or len(box.max) != 3:
            raise SceneError("Box corners must have three coordinates")
    for mesh in meshes:
        if any(len(v) != 3 for v in mesh.vertices) or any(len(t) != 3 for t in mesh.triangles):
            raise SceneError("Mesh vertices and triangles must have three entries")

    transmitter = None
    if "transmitter" in data:
        try:
            transmitter = [float(c) for c in data["transmitter"]["position"]]
        except (KeyError, TypeError, ValueError) as e:
            raise SceneError(f"Malformed transmitter entry: {e!r}") from e
        if len(transmitter) != 3:
            raise SceneError("Transmitter position must have three coordinates")

    return build_scene(materials, boxes, meshes, transmitter)


def load_scene(path: Union[str, Path]) -> Scene:
    """Load and validate a scene JSON file.

    Raises:
        SceneError: parse error, unknown material or degenerate geometry.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}: invalid JSON ({e})") from e
    except OSError as e:
        raise SceneError(f"{path}: cannot read scene file ({e})") from e

    scene = parse_scene(data)
    logger.debug(
        f"Loaded scene {path.name}: {len(scene.faces)} faces, {len(scene.edges)} edges, "
        f"{len(scene.materials)} materials"
    )
    return scene


def scene_document(scene: Scene) -> dict:
    doc: dict[str, Any] = {
        "materials": {name: m.to_dict() for name, m in scene.materials.items()},
        "boxes": [b.to_dict() for b in scene.boxes],
        "meshes": [m.to_dict() for m in scene.meshes],
    }
    if scene.transmitter is not None:
        doc["transmitter"] = {"position": list(scene.transmitter)}
    return doc


def dump_scene(scene: Scene) -> str:
    """Canonical scene JSON: keys sorted, floats at 9 significant digits."""
    return canonical.dumps(scene_document(scene), sort_keys=True, indent=2) + "\n"


def save_scene(scene: Scene, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scene(scene), encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# BVH
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BVH:
    """Flattened bounding-volume hierarchy over triangle rows.

    Row ``r`` of ``v0/e1/e2`` is the triangle with global id ``face_ids[r]``.
    Leaves reference the contiguous slice ``order[start:start+count]``.
    """

    node_min: NDArray[np.float64]
    node_max: NDArray[np.float64]
    left: NDArray[np.int64]
    right: NDArray[np.int64]
    start: NDArray[np.int64]
    count: NDArray[np.int64]
    order: NDArray[np.int64]
    v0: NDArray[np.float64]
    e1: NDArray[np.float64]
    e2: NDArray[np.float64]
    face_ids: NDArray[np.int64]

    @property
    def node_count(self) -> int:
        return len(self.left)

    @property
    def face_count(self) -> int:
        return len(self.face_ids)

    def leaves(self) -> Iterable[NDArray[np.int64]]:
        """Global face ids per leaf, in node order."""
        for node in range(self.node_count):
            if self.left[node] < 0:
                rows = self.order[self.start[node] : self.start[node] + self.count[node]]
                yield self.face_ids[rows]


def build_accelerator(scene: Scene, faces: Optional[Sequence[Face]] = None) -> BVH:
    """Build a BVH over ``scene`` (or over the given subset of its faces).

    Median split along the axis of largest centroid spread, at most four
    triangles per leaf. An empty face list yields an empty hierarchy.
    """
    subset = list(scene.faces if faces is None else faces)
    n = len(subset)
    tris = np.array([f.vertices for f in subset], dtype=np.float64).reshape(n, 3, 3)
    face_ids = np.array([f.face_id for f in subset], dtype=np.int64)
    v0 = tris[:, 0, :] if n else np.zeros((0, 3))
    e1 = tris[:, 1, :] - tris[:, 0, :] if n else np.zeros((0, 3))
    e2 = tris[:, 2, :] - tris[:, 0, :] if n else np.zeros((0, 3))

    node_min: list[NDArray[np.float64]] = []
    node_max: list[NDArray[np.float64]] = []
    left: list[int] = []
    right: list[int] = []
    start: list[int] = []
    count: list[int] = []
    order: list[int] = []

    if n:
        centroids = tris.mean(axis=1)
        lo_all = tris.min(axis=1)
        hi_all = tris.max(axis=1)

        def build(rows: NDArray[np.int64]) -> int:
            node = len(left)
            node_min.append(lo_all[rows].min(axis=0) - _NODE_PAD)
            node_max.append(hi_all[rows].max(axis=0) + _NODE_PAD)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)

            if len(rows) <= _LEAF_SIZE:
                start[node] = len(order)
                count[node] = len(rows)
                order.extend(int(r) for r in rows)
                return node

            spread = centroids[rows].max(axis=0) - centroids[rows].min(axis=0)
            axis = int(np.argmax(spread))
            sorted_rows = rows[np.argsort(centroids[rows, axis], kind="stable")]
            half = len(sorted_rows) // 2
            left[node] = build(sorted_rows[:half])
            right[node] = build(sorted_rows[half:])
            return node

        build(np.arange(n, dtype=np.int64))

    return BVH(
        node_min=np.array(node_min, dtype=np.float64).reshape(-1, 3),
        node_max=np.array(node_max, dtype=np.float64).reshape(-1, 3),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=np.array(order, dtype=np.int64),
        v0=v0,
        e1=e1,
        e2=e2,
        face_ids=face_ids,
    )


@dataclass(frozen=True)
class BatchHits:
    """Nearest hits for a packet of rays; ``face_id`` is -1 where nothing was hit."""

    t: NDArray[np.float64]
    face_id: NDArray[np.int64]
    u: NDArray[np.float64]
    v: NDArray[np.float64]

    @property
    def hit(self) -> NDArray[np.bool_]:
        return self.face_id >= 0


def intersect_batch(
    bvh: BVH,
    origins: NDArray[np.float64],
    dirs: NDArray[np.float64],
    t_max: Union[float, NDArray[np.float64]],
    exclude: Optional[Iterable[int]] = None,
    t_min: float = EPS_RAY,
) -> BatchHits:
    """Nearest triangle hit with t_min < t <= t_max for every ray of the packet."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    m = len(origins)
    best_t = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (m,)).copy()
    best_f = np.full(m, -1, dtype=np.int64)
    best_u = np.zeros(m)
    best_v = np.zeros(m)
    if m == 0 or bvh.node_count == 0:
        return BatchHits(best_t, best_f, best_u, best_v)

    skip = frozenset(int(f) for f in exclude) if exclude is not None else frozenset()
    with np.errstate(divide="ignore"):
        inv_dirs = 1.0 / dirs

    stack: list[tuple[int, NDArray[np.int64]]] = [(0, np.arange(m))]
    while stack:
        node, idx = stack.pop()
        o = origins[idx]
        inv = inv_dirs[idx]
        with np.errstate(invalid="ignore", over="ignore"):
            t1 = (bvh.node_min[node] - o) * inv
            t2 = (bvh.node_max[node] - o) * inv
            t_near = np.fmax.reduce(np.fmin(t1, t2), axis=1)
            t_far = np.fmin.reduce(np.fmax(t1, t2), axis=1)
        keep = (t_near <= t_far) & (t_far >= t_min) & (t_near <= best_t[idx])
        idx = idx[keep]
        if idx.size == 0:
            continue

        if bvh.left[node] >= 0:
            stack.append((int(bvh.right[node]), idx))
            stack.append((int(bvh.left[node]), idx))
            continue

        o = origins[idx]
        d = dirs[idx]
        for row in bvh.order[bvh.start[node] : bvh.start[node] + bvh.count[node]]:
            fid = int(bvh.face_ids[row])
            if fid in skip:
                continue
            t, u, v, ok = _moller_trumbore(o, d, bvh.v0[row], bvh.e1[row], bvh.e2[row])
            cur_t = best_t[idx]
            cur_f = best_f[idx]
            tie = np.abs(t - cur_t) <= _TIE_TOL
            better = ok & (t > t_min) & (
                ((t < cur_t) & ~tie)
                | (tie & (cur_f >= 0) & (fid < cur_f))
                | ((cur_f < 0) & (t <= cur_t))
            )
            if np.any(better):
                sel = idx[better]
                best_t[sel] = t[better]
                best_f[sel] = fid
                best_u[sel] = u[better]
                best_v[sel] = v[better]

    return BatchHits(best_t, best_f, best_u, best_v)


def _moller_trumbore(
    o: NDArray[np.float64],
    d: NDArray[np.float64],
    v0: NDArray[np.float64],
    e1: NDArray[np.float64],
    e2: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
    p = np.cross(d, e2)
    det = p @ e1
    scale = float(np.linalg.norm(e1) * np.linalg.norm(e2))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_det = 1.0 / det
        s = o - v0
        u = np.einsum("ij,ij->i", s, p) * inv_det
        q = np.cross(s, e1)
        v = np.einsum("ij,ij->i", d, q) * inv_det
        t = (q @ e2) * inv_det
    ok = (
        (np.abs(det) > _PARALLEL_TOL * scale)
        & (u >= -_BARY_TOL)
        & (v >= -_BARY_TOL)
        & (u + v <= 1.0 + _BARY_TOL)
    )
    return t, u, v, ok


def intersect(bvh: BVH, origin: Vec3, direction: Vec3, t_max: float) -> Optional[Hit]:
    """Nearest hit along a unit ray with EPS_RAY < t <= t_max, or None."""
    direction = np.asarray(direction, dtype=np.float64)
    if not is_unit(direction):
        raise GeometryError("intersect expects a unit direction")
    if not t_max > 0:
        raise GeometryError(f"t_max must be positive, got {t_max}")
    origin = np.asarray(origin, dtype=np.float64)
    hits = intersect_batch(bvh, origin[None, :], direction[None, :], t_max)
    if hits.face_id[0] < 0:
        return None
    t = float(hits.t[0])
    u, v = float(hits.u[0]), float(hits.v[0])
    return Hit(
        t=t,
        point=origin + t * direction,
        face_id=int(hits.face_id[0]),
        barycentric=(1.0 - u - v, u, v),
    )


def occluded_batch(
    bvh: BVH,
    a: NDArray[np.float64],
    b: NDArray[np.float64],
    exclude: Optional[Iterable[int]] = None,
) -> NDArray[np.bool_]:
    """True where a face crosses the open segment (a, b), EPS_RAY clear of both ends."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    delta = b - a
    lengths = np.linalg.norm(delta, axis=1)
    if np.any(lengths == 0.0):
        raise GeometryError("occluded needs distinct segment endpoints")
    result = np.zeros(len(a), dtype=bool)
    testable = lengths > 2.0 * EPS_RAY
    if not np.any(testable):
        return result
    dirs = delta[testable] / lengths[testable, None]
    hits = intersect_batch(bvh, a[testable], dirs, lengths[testable] - EPS_RAY, exclude=exclude)
    result[testable] = hits.hit
    return result


def occluded(bvh: BVH, a: Vec3, b: Vec3, exclude: Optional[Iterable[int]] = None) -> bool:
    return bool(occluded_batch(bvh, a, b, exclude)[0])


def segment_faces(
    bvh: BVH, a: Vec3, b: Vec3, exclude: Optional[Iterable[int]] = None
) -> list[int]:
    """Every face crossing the open segment (a, b), nearest first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        raise GeometryError("segment_faces needs distinct endpoints")
    if length <= 2.0 * EPS_RAY:
        return []
    direction = (b - a) / length
    skip = set(int(f) for f in exclude) if exclude is not None else set()
    found: list[int] = []
    while True:
        hits = intersect_batch(bvh, a[None, :], direction[None, :], length - EPS_RAY, exclude=skip)
        fid = int(hits.face_id[0])
        if fid < 0:
            return found
        found.append(fid)
        skip.add(fid)


def mirror_point(p: Vec3, face: Face) -> Vec3:
    """Reflection of ``p`` across the supporting plane of ``face``."""
    n = face.normal
    p = np.asarray(p, dtype=np.float64)
    dist = float(np.dot(p - face.vertices[0], n))
    return p - 2.0 * dist * n


def point_in_triangle(
    points: NDArray[np.float64], tri: NDArray[np.float64], tol: float = 1e-9
) -> NDArray[np.bool_]:
    """Barycentric containment test for points assumed to lie on the triangle's plane."""
    points = np.atleast_2d(points)
    v0, v1, v2 = tri
    e1, e2 = v1 - v0, v2 - v0
    w = points - v0
    d11 = e1 @ e1
    d12 = e1 @ e2
    d22 = e2 @ e2
    w1 = w @ e1
    w2 = w @ e2
    denom = d11 * d22 - d12 * d12
    u = (d22 * w1 - d12 * w2) / denom
    v = (d11 * w2 - d12 * w1) / denom
    return (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol)
