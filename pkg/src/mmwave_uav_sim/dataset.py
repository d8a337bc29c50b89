"""Episode / scene / receiver / ray records and their on-disk form.

The canonical store is one JSONL file per table plus ``manifest.json``. Rows
are written in id order with fields in model order and floats rounded to 9
significant digits, so identical runs produce identical bytes. SQL is an
export format only.
"""

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Literal, Optional, Sequence, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from mmwave_uav_sim import canonical
from mmwave_uav_sim.channel import ArrayDescriptor, MimoChannel, PathMetrics, synthesize_mimo
from mmwave_uav_sim.errors import DatasetError, IntegrityError

TABLES = ("episodes", "scenes", "receivers", "rays")
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def _round_floats(value: Any) -> Any:
    if isinstance(value, float):
        return canonical.round_sig(value)
    if isinstance(value, list):
        return [_round_floats(v) for v in value]
    if isinstance(value, dict):
        return {k: _round_floats(v) for k, v in value.items()}
    return value


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    @field_validator("*", mode="after")
    @classmethod
    def _canonical_floats(cls, value: Any) -> Any:
        return _round_floats(value)

    def to_json(self) -> str:
        return canonical.dumps(self.model_dump(mode="json"), sort_keys=False)


class EpisodeRecord(_Record):
    episode_id: int
    altitude: float  # m
    scene_count: int
    config_hash: str
    config: dict[str, Any]


class PoseRecord(_Record):
    uav_id: int
    model: str
    position: list[float]
    heading: list[float]


class SceneRecord(_Record):
    scene_id: int
    episode_id: int
    scene_index: int
    time: float  # s
    poses: list[PoseRecord]


class ReceiverRecord(_Record):
    receiver_id: int
    scene_id: int
    uav_id: int
    rx_position: list[float]
    total_power_coherent: Optional[float]  # dBm, None on outage
    total_power_noncoherent: Optional[float]
    mean_delay: Optional[float]  # ns
    rms_delay_spread: Optional[float]
    los: bool
    ray_count: int


class InteractionRecord(_Record):
    kind: Literal["R", "D", "S"]
    point: list[float]
    face_id: Optional[int] = None
    edge_id: Optional[int] = None


class RayRecord(_Record):
    ray_id: int
    receiver_id: int
    rank: int
    power: float  # dBm
    delay: float  # ns
    aod_az: float  # degrees
    aod_el: float
    aoa_az: float
    aoa_el: float
    signature: str
    los: bool
    length_m: float
    amplitude_re: float
    amplitude_im: float
    interactions: list[InteractionRecord]

    @property
    def amplitude(self) -> complex:
        return complex(self.amplitude_re, self.amplitude_im)


class Manifest(_Record):
    format_version: int = FORMAT_VERSION
    config_hash: str
    counts: dict[str, int]
    files: dict[str, str]
    dataset_hash: str


_MODELS: dict[str, type[_Record]] = {
    "episodes": EpisodeRecord,
    "scenes": SceneRecord,
    "receivers": ReceiverRecord,
    "rays": RayRecord,
}


@dataclass
class Dataset:
    """In-memory episodes -> scenes -> receivers -> rays hierarchy."""

    episodes: list[EpisodeRecord] = field(default_factory=list)
    scenes: list[SceneRecord] = field(default_factory=list)
    receivers: list[ReceiverRecord] = field(default_factory=list)
    rays: list[RayRecord] = field(default_factory=list)
    manifest: Optional[Manifest] = None

    def table(self, name: str) -> list:
        return getattr(self, name)

    @property
    def counts(self) -> dict[str, int]:
        return {name: len(self.table(name)) for name in TABLES}

    def sorted(self) -> "Dataset":
        """Copy with every table in canonical row order."""
        return Dataset(
            episodes=sorted(self.episodes, key=lambda r: r.episode_id),
            scenes=sorted(self.scenes, key=lambda r: r.scene_id),
            receivers=sorted(self.receivers, key=lambda r: r.receiver_id),
            rays=sorted(self.rays, key=lambda r: (r.receiver_id, r.rank)),
            manifest=self.manifest,
        )

    def validate(self, l_max: Optional[int] = None) -> None:
        """Check ids and references.

        Raises:
            IntegrityError: duplicate ids, dangling references, ray counts
                that disagree with the rays table, or unsorted rays.
        """
        episode_ids = _unique("episodes", [r.episode_id for r in self.episodes])
        scene_ids = _unique("scenes", [r.scene_id for r in self.scenes])
        receiver_ids = _unique("receivers", [r.receiver_id for r in self.receivers])
        _unique("rays", [r.ray_id for r in self.rays])

        for scene in self.scenes:
            if scene.episode_id not in episode_ids:
                raise IntegrityError(f"Scene {scene.scene_id} references missing episode {scene.episode_id}")
        for rec in self.receivers:
            if rec.scene_id not in scene_ids:
                raise IntegrityError(f"Receiver {rec.receiver_id} references missing scene {rec.scene_id}")

        per_receiver: dict[int, list[RayRecord]] = {}
        for ray in self.rays:
            if ray.receiver_id not in receiver_ids:
                raise IntegrityError(f"Ray {ray.ray_id} references missing receiver {ray.receiver_id}")
            per_receiver.setdefault(ray.receiver_id, []).append(ray)

        for rec in self.receivers:
            rays = sorted(per_receiver.get(rec.receiver_id, []), key=lambda r: r.rank)
            if rec.ray_count != len(rays):
                raise IntegrityError(
                    f"Receiver {rec.receiver_id} declares {rec.ray_count} rays, table has {len(rays)}"
                )
            if l_max is not None and rec.ray_count > l_max:
                raise IntegrityError(f"Receiver {rec.receiver_id} stores {rec.ray_count} rays (> {l_max})")
            if any(a.power < b.power for a, b in zip(rays, rays[1:])):
                raise IntegrityError(f"Rays of receiver {rec.receiver_id} are not sorted by power")
            if rec.ray_count == 0 and rec.total_power_coherent is not None:
                raise IntegrityError(f"Receiver {rec.receiver_id}: outage row must have null totals")


def _unique(table: str, ids: Sequence[int]) -> set[int]:
    seen = set(ids)
    if len(seen) != len(ids):
        raise IntegrityError(f"Duplicate ids in table '{table}'")
    return seen


# ----------------------------------------------------------------------------
# JSONL store
# ----------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def table_text(rows: Sequence[_Record]) -> str:
    return "".join(row.to_json() + "\n" for row in rows)


def write_dataset(dataset: Dataset, out_dir: Union[str, Path], config_hash: str) -> Manifest:
    """Validate and write the four tables plus the manifest.

    Raises:
        IntegrityError: referential integrity violated (nothing is written).
        DatasetError: IO failure.
    """
    out_dir = Path(out_dir)
    data = dataset.sorted()
    data.validate()

    files: dict[str, str] = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in TABLES:
            text = table_text(data.table(name))
            _write_text(out_dir / f"{name}.jsonl", text)
            files[f"{name}.jsonl"] = canonical.sha256_text(text)
        manifest = Manifest(
            config_hash=config_hash,
            counts=data.counts,
            files=files,
            dataset_hash=canonical.sha256_text(
                "".join(f"{name}:{digest}\n" for name, digest in sorted(files.items()))
            ),
        )
        _write_text(out_dir / MANIFEST_NAME, canonical.dumps(manifest.model_dump(), indent=2) + "\n")
    except OSError as e:
        raise DatasetError(f"Cannot write dataset to {out_dir}: {e}") from e

    logger.info(
        f"Wrote dataset {out_dir}: {manifest.counts['episodes']} episodes, "
        f"{manifest.counts['scenes']} scenes, {manifest.counts['receivers']} receivers, "
        f"{manifest.counts['rays']} rays"
    )
    return manifest


def read_manifest(directory: Union[str, Path]) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    try:
        return Manifest.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as e:
        raise DatasetError(f"Cannot read manifest {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise DatasetError(f"Malformed manifest {path}: {e}") from e


def read_dataset(directory: Union[str, Path]) -> Dataset:
    """Load a dataset directory written by :func:`write_dataset`."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    tables: dict[str, list] = {}
    for name in TABLES:
        path = directory / f"{name}.jsonl"
        model = _MODELS[name]
        rows = []
        try:
            with path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    if line.strip():
                        rows.append(model.model_validate(json.loads(line)))
        except OSError as e:
            raise DatasetError(f"Cannot read {path}: {e}") from e
        except (json.JSONDecodeError, ValidationError) as e:
            raise DatasetError(f"{path}:{lineno}: malformed row ({e})") from e
        if len(rows) != manifest.counts.get(name):
            raise IntegrityError(
                f"{path.name} has {len(rows)} rows, manifest says {manifest.counts.get(name)}"
            )
        tables[name] = rows
    dataset = Dataset(manifest=manifest, **tables)
    dataset.validate()
    return dataset


def dataset_hash(directory: Union[str, Path]) -> str:
    return read_manifest(directory).dataset_hash


def query_rays(
    dataset: Dataset,
    episode_id: Optional[int] = None,
    scene_id: Optional[int] = None,
    receiver_id: Optional[int] = None,
) -> list[RayRecord]:
    """Rays matching every given filter, ordered by receiver then power rank."""
    scene_episode = {s.scene_id: s.episode_id for s in dataset.scenes}
    receiver_scene = {r.receiver_id: r.scene_id for r in dataset.receivers}
    out = []
    for ray in dataset.rays:
        if receiver_id is not None and ray.receiver_id != receiver_id:
            continue
        rec_scene = receiver_scene.get(ray.receiver_id)
        if scene_id is not None and rec_scene != scene_id:
            continue
        if episode_id is not None and scene_episode.get(rec_scene) != episode_id:  # type: ignore[arg-type]
            continue
        out.append(ray)
    return sorted(out, key=lambda r: (r.receiver_id, r.rank))


# ----------------------------------------------------------------------------
# SQL export
# ----------------------------------------------------------------------------

_DDL = """\
CREATE TABLE episodes (
    episode_id INTEGER PRIMARY KEY,
    altitude REAL NOT NULL,
    scene_count INTEGER NOT NULL,
    config_hash TEXT NOT NULL,
    config TEXT NOT NULL
);
CREATE TABLE scenes (
    scene_id INTEGER PRIMARY KEY,
    episode_id INTEGER NOT NULL,
    scene_index INTEGER NOT NULL,
    time REAL NOT NULL,
    poses TEXT NOT NULL,
    FOREIGN KEY (episode_id) REFERENCES episodes (episode_id)
);
CREATE TABLE receivers (
    receiver_id INTEGER PRIMARY KEY,
    scene_id INTEGER NOT NULL,
    uav_id INTEGER NOT NULL,
    rx_x REAL NOT NULL,
    rx_y REAL NOT NULL,
    rx_z REAL NOT NULL,
    total_power_coherent REAL,
    total_power_noncoherent REAL,
    mean_delay REAL,
    rms_delay_spread REAL,
    los INTEGER NOT NULL,
    ray_count INTEGER NOT NULL,
    FOREIGN KEY (scene_id) REFERENCES scenes (scene_id)
);
CREATE TABLE rays (
    ray_id INTEGER PRIMARY KEY,
    receiver_id INTEGER NOT NULL,
    rank INTEGER NOT NULL,
    power REAL NOT NULL,
    delay REAL NOT NULL,
    aod_az REAL NOT NULL,
    aod_el REAL NOT NULL,
    aoa_az REAL NOT NULL,
    aoa_el REAL NOT NULL,
    signature TEXT NOT NULL,
    los INTEGER NOT NULL,
    length_m REAL NOT NULL,
    amplitude_re REAL NOT NULL,
    amplitude_im REAL NOT NULL,
    interactions TEXT NOT NULL,
    FOREIGN KEY (receiver_id) REFERENCES receivers (receiver_id)
);
"""


def export_sql_ddl() -> str:
    """CREATE TABLE statements for the four tables, foreign keys rays -> episodes."""
    return _DDL


def _sql_literal(value: Any) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise DatasetError(f"Cannot export non-finite value {value}")
        return repr(canonical.round_sig(value))
    if not isinstance(value, str):
        value = canonical.dumps(value)
    return "'" + value.replace("'", "''") + "'"


def _row_values(table: str, row: Any) -> list[Any]:
    if table == "episodes":
        return [row.episode_id, row.altitude, row.scene_count, row.config_hash, row.config]
    if table == "scenes":
        poses = [p.model_dump(mode="json") for p in row.poses]
        return [row.scene_id, row.episode_id, row.scene_index, row.time, poses]
    if table == "receivers":
        return [
            row.receiver_id,
            row.scene_id,
            row.uav_id,
            *row.rx_position,
            row.total_power_coherent,
            row.total_power_noncoherent,
            row.mean_delay,
            row.rms_delay_spread,
            row.los,
            row.ray_count,
        ]
    interactions = [i.model_dump(mode="json") for i in row.interactions]
    return [
        row.ray_id,
        row.receiver_id,
        row.rank,
        row.power,
        row.delay,
        row.aod_az,
        row.aod_el,
        row.aoa_az,
        row.aoa_el,
        row.signature,
        row.los,
        row.length_m,
        row.amplitude_re,
        row.amplitude_im,
        interactions,
    ]


def sql_inserts(dataset: Dataset) -> Iterator[str]:
    """One INSERT statement per row, parents before children."""
    data = dataset.sorted()
    for table in TABLES:
        for row in data.table(table):
            values = ", ".join(_sql_literal(v) for v in _row_values(table, row))
            yield f"INSERT INTO {table} VALUES ({values});"


def export_sql(dataset: Dataset) -> str:
    """DDL followed by INSERT statements reproducing every row."""
    lines = [export_sql_ddl(), *sql_inserts(dataset)]
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# Plot data and offline MIMO
# ----------------------------------------------------------------------------


def _csv_number(value: Optional[float]) -> str:
    return "" if value is None else repr(canonical.round_sig(value))


def emit_plot_data(
    dataset: Dataset,
    uav_id: int,
    episode_id: int,
    metric: Literal["power", "delay"] = "power",
    aggregate: Literal["coherent", "noncoherent"] = "coherent",
) -> str:
    """CSV ``time_s,strongest,aggregate`` for one UAV over one episode.

    ``strongest`` is the strongest ray's power (dBm) or delay (ns);
    ``aggregate`` is the total power in the chosen mode or the power-weighted
    mean delay. Outage scenes keep their row with empty values; if the UAV is
    in outage for the whole episode only the header is written.

    Raises:
        IntegrityError: unknown episode, or the UAV has no receiver rows in it.
    """
    if metric not in ("power", "delay"):
        raise ValueError(f"Unknown plot metric '{metric}'")
    if not any(e.episode_id == episode_id for e in dataset.episodes):
        raise IntegrityError(f"Unknown episode {episode_id}")
    scenes = {s.scene_id: s for s in dataset.scenes if s.episode_id == episode_id}
    receivers = sorted(
        (r for r in dataset.receivers if r.scene_id in scenes and r.uav_id == uav_id),
        key=lambda r: scenes[r.scene_id].time,
    )
    if not receivers:
        raise IntegrityError(f"UAV {uav_id} has no receiver rows in episode {episode_id}")

    strongest: dict[int, RayRecord] = {}
    wanted = {r.receiver_id for r in receivers}
    for ray in dataset.rays:
        if ray.receiver_id in wanted and ray.rank == 0:
            strongest[ray.receiver_id] = ray

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time_s", "strongest", "aggregate"])
    if all(r.ray_count == 0 for r in receivers):
        return buf.getvalue()

    for rec in receivers:
        top = strongest.get(rec.receiver_id)
        if metric == "power":
            agg = rec.total_power_coherent if aggregate == "coherent" else rec.total_power_noncoherent
            best = top.power if top else None
        else:
            agg = rec.mean_delay
            best = top.delay if top else None
        writer.writerow([_csv_number(scenes[rec.scene_id].time), _csv_number(best), _csv_number(agg)])
    return buf.getvalue()


def ray_metrics(ray: RayRecord) -> PathMetrics:
    return PathMetrics(
        power=ray.power,
        amplitude=ray.amplitude,
        delay=ray.delay,
        aod_az=ray.aod_az,
        aod_el=ray.aod_el,
        aoa_az=ray.aoa_az,
        aoa_el=ray.aoa_el,
        los=ray.los,
    )


def mimo_from_rays(
    rays: Sequence[RayRecord], tx_array: ArrayDescriptor, rx_array: ArrayDescriptor, f: float
) -> MimoChannel:
    """Rebuild the narrowband MIMO channel of one receiver from stored rows."""
    return synthesize_mimo([ray_metrics(r) for r in rays], tx_array, rx_array, f)
