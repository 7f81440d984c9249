"""
Module: services.scene_service
------------------------------

Procedural synthetic scenes: occupancy ground truth, camera rigs, ray-marched
per-view feature maps with their ground-truth segment masks, voxel-to-image
projection (the hit-query geometry) and the POSC scene file format.

Key Components:
- generate_scene: places boxes and spheres on the ground plane of the world
  box by rejection sampling; no two primitives share a voxel.
- build_rig / look_at: N cameras evenly spaced on a circle around the scene,
  all aimed at the same target.
- render_views: marches one ray per pixel through the label grid to the
  first occupied voxel (grid traversal, not fixed-step sampling). The pixel
  feature is the one-hot embedding of the hit class, the normalized depth and
  Gaussian noise. Rays that hit nothing see the free class at depth 1.
- project_voxels: which voxel-query cell centers each camera sees, with
  their normalized image coordinates, padded to a fixed K per view.
- save_scene / load_scene: the POSC binary format.

Conventions:
- Arrays are indexed [x, y, z]; voxel centers sit at cell midpoints.
- Camera frame: x right, y down, z forward. A world point p maps to the
  camera point R·p + t, and to pixel (fx·x/z + cx, fy·y/z + cy).
- Normalized image coordinates are q_c = (u / w_img, v / h_img); pixel (i, j)
  covers u ∈ [j, j+1), v ∈ [i, i+1).
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.schemas.config import ExperimentConfig, RigConfig, SceneConfig
from app.schemas.scene import CameraSchema, PrimitiveSchema, RigSchema, SceneDocument
from app.utils.errors import DataError, FormatError, GenerationError, ParameterError
from app.utils.helpers import derive_seed, make_rng

logger = logging.getLogger(__name__)

SCENE_MAGIC = b"POSC"
SCENE_VERSION = 1
HIT_FRACTION = 0.9

Vec3 = Tuple[float, float, float]


# --------------------------
# Scene samples
# --------------------------


@dataclass(frozen=True)
class PlacedPrimitive:
    type: str
    class_id: int
    center: Vec3
    extent: Vec3
    yaw: float = 0.0

    def to_schema(self) -> PrimitiveSchema:
        return PrimitiveSchema(
            type=self.type,
            class_id=self.class_id,
            center=self.center,
            extent=self.extent,
            yaw=self.yaw,
        )

    @classmethod
    def from_schema(cls, schema: PrimitiveSchema) -> "PlacedPrimitive":
        return cls(
            schema.type,
            schema.class_id,
            tuple(schema.center),
            tuple(schema.extent),
            schema.yaw,
        )


@dataclass
class SceneSample:
    occupancy: np.ndarray  # H × W × Z, uint8 labels, 0 = free
    instances: np.ndarray  # H × W × Z, 0 = free, i + 1 = objects[i]
    objects: List[PlacedPrimitive]
    seed: int
    num_classes: int
    world_min: Vec3
    world_max: Vec3

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(self.occupancy.shape)

    def class_counts(self) -> dict:
        counts = np.bincount(self.occupancy.reshape(-1), minlength=self.num_classes)
        return {str(c): int(n) for c, n in enumerate(counts)}


def voxel_centers(
    extents: Sequence[int], world_min: Sequence[float], world_max: Sequence[float]
) -> np.ndarray:
    """World coordinates of every cell midpoint, shape extents + (3,)."""
    lo = np.asarray(world_min, dtype=np.float64)
    hi = np.asarray(world_max, dtype=np.float64)
    if np.any(hi <= lo):
        raise ParameterError(f"degenerate world bounds {tuple(lo)} .. {tuple(hi)}")
    size = (hi - lo) / np.asarray(extents, dtype=np.float64)
    axes = [lo[a] + (np.arange(n) + 0.5) * size[a] for a, n in enumerate(extents)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def rasterize_primitive(prim: PlacedPrimitive, centers: np.ndarray) -> np.ndarray:
    offset = centers - np.asarray(prim.center)
    if prim.type == "sphere":
        return np.linalg.norm(offset, axis=-1) <= prim.extent[0]
    cos, sin = math.cos(prim.yaw), math.sin(prim.yaw)
    local_x = cos * offset[..., 0] + sin * offset[..., 1]
    local_y = -sin * offset[..., 0] + cos * offset[..., 1]
    hx, hy, hz = prim.extent
    return (np.abs(local_x) <= hx) & (np.abs(local_y) <= hy) & (np.abs(offset[..., 2]) <= hz)


def _sample_primitive(
    rng: np.random.Generator, cfg: SceneConfig, class_id: int
) -> PlacedPrimitive:
    kind = str(rng.choice(cfg.object_types))
    lo, hi = np.asarray(cfg.world_min), np.asarray(cfg.world_max)
    if kind == "sphere":
        radius = float(rng.uniform(*cfg.sphere_radius))
        radius = min(radius, 0.5 * (hi[2] - lo[2]))
        margin = np.array([radius, radius])
        extent = (radius, radius, radius)
        z = lo[2] + radius
        yaw = 0.0
    else:
        hx, hy = rng.uniform(*cfg.box_half_extent, size=2)
        height = min(float(rng.uniform(*cfg.box_height)), hi[2] - lo[2])
        margin = np.array([max(hx, hy)] * 2)
        extent = (float(hx), float(hy), height / 2.0)
        z = lo[2] + height / 2.0
        yaw = float(rng.uniform(0.0, math.pi / 2.0))
    span_lo = np.minimum(lo[:2] + margin, (lo[:2] + hi[:2]) / 2.0)
    span_hi = np.maximum(hi[:2] - margin, span_lo)
    x, y = rng.uniform(span_lo, span_hi)
    return PlacedPrimitive(kind, int(class_id), (float(x), float(y), float(z)), extent, yaw)


def _sample_classes(rng: np.random.Generator, cfg: SceneConfig, count: int) -> np.ndarray:
    if cfg.distinct_classes:
        if count > cfg.num_classes - 1:
            raise GenerationError(
                f"{count} objects cannot have distinct classes with only "
                f"{cfg.num_classes - 1} non-free classes"
            )
        return rng.choice(np.arange(1, cfg.num_classes), size=count, replace=False)
    return rng.integers(1, cfg.num_classes, size=count)


def generate_scene(cfg: SceneConfig, seed: int) -> SceneSample:
    """Sample a scene; deterministic given (cfg, seed)."""
    rng = make_rng(seed, "scene")
    if cfg.num_objects is not None:
        count = cfg.num_objects
    else:
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    if count == 0 and not cfg.allow_empty:
        raise GenerationError("an empty scene requires allow_empty")

    centers = voxel_centers(cfg.grid, cfg.world_min, cfg.world_max)
    occupancy = np.zeros(cfg.grid, dtype=np.uint8)
    instances = np.zeros(cfg.grid, dtype=np.int32)
    objects: List[PlacedPrimitive] = []

    for i, class_id in enumerate(_sample_classes(rng, cfg, count)):
        for _ in range(cfg.max_retries):
            prim = _sample_primitive(rng, cfg, class_id)
            mask = rasterize_primitive(prim, centers)
            if mask.any() and not (mask & (instances > 0)).any():
                break
        else:
            raise GenerationError(
                f"could not place object {i + 1}/{count} after {cfg.max_retries} retries"
            )
        occupancy[mask] = class_id
        instances[mask] = len(objects) + 1
        objects.append(prim)

    logger.debug(f"Generated scene seed={seed} with {len(objects)} objects")
    return SceneSample(
        occupancy, instances, objects, int(seed), cfg.num_classes, cfg.world_min, cfg.world_max
    )


def generate_scene_set(config: ExperimentConfig, count: int, seed: int) -> List[SceneSample]:
    return [
        generate_scene(config.scene, derive_seed(seed, "scene-set", i)) for i in range(count)
    ]


# --------------------------
# Cameras
# --------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"degenerate intrinsics fx={self.fx}, fy={self.fy}")
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if rotation.shape != (3, 3) or not np.allclose(
            rotation @ rotation.T, np.eye(3), rtol=0.0, atol=1e-9
        ):
            raise ParameterError("camera rotation must be orthonormal within 1e-9")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "image_size", tuple(int(n) for n in self.image_size))

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera depth of world points."""
        cam = self.world_to_camera(points)
        depth = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[..., 0] / depth + self.cx
            v = self.fy * cam[..., 1] / depth + self.cy
        return u, v, depth

    def unproject(self, q_c: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World point seen at normalized coordinates ``q_c`` and camera depth."""
        h, w = self.image_size
        q_c = np.asarray(q_c, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (q_c[..., 0] * w - self.cx) / self.fx * depth
        y = (q_c[..., 1] * h - self.cy) / self.fy * depth
        cam = np.stack([x, y, depth], axis=-1)
        return (cam - self.translation) @ self.rotation

    def pixel_rays(self) -> np.ndarray:
        """World-frame direction per pixel center, scaled to unit camera depth."""
        h, w = self.image_size
        v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        return cam @ self.rotation

    def to_schema(self) -> CameraSchema:
        return CameraSchema(
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            rotation=self.rotation.tolist(),
            translation=self.translation.tolist(),
            image_size=self.image_size,
        )

    @classmethod
    def from_schema(cls, schema: CameraSchema) -> "Camera":
        return cls(
            schema.fx,
            schema.fy,
            schema.cx,
            schema.cy,
            np.asarray(schema.rotation),
            np.asarray(schema.translation),
            tuple(schema.image_size),
        )


@dataclass
class CameraRig:
    cameras: List[Camera] = field(default_factory=list)

    def __post_init__(self):
        if not self.cameras:
            raise ParameterError("a camera rig needs at least one camera")
        sizes = {camera.image_size for camera in self.cameras}
        if len(sizes) != 1:
            raise ParameterError(f"all cameras must share one image size, got {sorted(sizes)}")

    @property
    def n(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.cameras[0].image_size

    def to_schema(self) -> RigSchema:
        return RigSchema(cameras=[camera.to_schema() for camera in self.cameras])

    @classmethod
    def from_schema(cls, schema: RigSchema) -> "CameraRig":
        return cls([Camera.from_schema(c) for c in schema.cameras])

    def fingerprint(self) -> str:
        return self.to_schema().model_dump_json()


def look_at(
    eye: Sequence[float],
    target: Sequence[float],
    fov_deg: float,
    image_size: Tuple[int, int],
) -> Camera:
    """Pinhole camera at ``eye`` looking at ``target`` with world +z up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-12:
        raise ParameterError("look_at: viewing direction is parallel to the up axis")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    h, w = image_size
    focal = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(focal, focal, w / 2.0, h / 2.0, rotation, -rotation @ eye, (h, w))


def build_rig(cfg: RigConfig) -> CameraRig:
    cameras = []
    for i in range(cfg.n_cameras):
        azimuth = math.radians(cfg.azimuth_offset_deg + 360.0 * i / cfg.n_cameras)
        eye = (
            cfg.target[0] + cfg.distance * math.cos(azimuth),
            cfg.target[1] + cfg.distance * math.sin(azimuth),
            cfg.height,
        )
        cameras.append(look_at(eye, cfg.target, cfg.fov_deg, cfg.image_size))
    return CameraRig(cameras)


# --------------------------
# Rendering
# --------------------------


@dataclass
class FeatureMaps:
    features: np.ndarray  # N × d × h_f × w_f
    noise_sigma: float

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.features.shape


@dataclass
class GroundTruthMasks:
    ids: np.ndarray  # N × h_f × w_f, 0 = background
    num_ids: int

    def counts(self, view: int) -> np.ndarray:
        return np.bincount(self.ids[view].reshape(-1), minlength=self.num_ids)


def march_rays(
    origin: np.ndarray,
    directions: np.ndarray,
    occupancy: np.ndarray,
    world_min: Sequence[float],
    world_max: Sequence[float],
) -> Tuple[np.ndarray, np.ndarray]:
    """First occupied voxel along each ray by grid traversal.

    Returns the hit voxel index (-1 where nothing is hit) and the ray
    parameter t at which that voxel is entered.
    """
    extents = np.asarray(occupancy.shape)
    lo = np.asarray(world_min, dtype=np.float64)
    hi = np.asarray(world_max, dtype=np.float64)
    size = (hi - lo) / extents
    D = directions.reshape(-1, 3)
    rays = D.shape[0]

    zero = D == 0
    inside = (origin >= lo) & (origin <= hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / D
        t2 = (hi - origin) / D
    t_lo = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = np.maximum(t_lo.max(axis=1), 0.0)
    t_exit = t_hi.min(axis=1)

    hit = np.full((rays, 3), -1, dtype=np.int64)
    t_hit = np.full(rays, np.inf)
    alive = t_enter < t_exit

    start = origin + t_enter[:, None] * D
    idx = np.clip(np.floor((start - lo) / size).astype(np.int64), 0, extents - 1)
    step = np.sign(D).astype(np.int64)
    boundary = lo + (idx + (step > 0)) * size
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(zero, np.inf, (boundary - origin) / D)
        t_delta = np.where(zero, np.inf, size / np.abs(D))
    t_cur = t_enter.copy()

    for _ in range(int(extents.sum()) + 3):
        active = np.flatnonzero(alive)
        if active.size == 0:
            break
        ix = idx[active]
        occupied = occupancy[ix[:, 0], ix[:, 1], ix[:, 2]] > 0
        found = active[occupied]
        hit[found] = idx[found]
        t_hit[found] = t_cur[found]
        alive[found] = False

        moving = active[~occupied]
        axis = np.argmin(t_max[moving], axis=1)
        t_cur[moving] = t_max[moving, axis]
        idx[moving, axis] += step[moving, axis]
        t_max[moving, axis] += t_delta[moving, axis]
        out = (idx[moving, axis] < 0) | (idx[moving, axis] >= extents[axis])
        alive[moving[out | (t_cur[moving] >= t_exit[moving])]] = False

    shape = directions.shape[:-1]
    return hit.reshape(shape + (3,)), t_hit.reshape(shape)


def render_views(
    scene: SceneSample,
    rig: CameraRig,
    d: int,
    noise_sigma: float,
    seed: int,
    embed_scale: float = 1.0,
    far: float = 40.0,
) -> Tuple[FeatureMaps, GroundTruthMasks]:
    """Ray-marched per-view feature maps and instance masks."""
    L = scene.num_classes
    if d < L + 1:
        raise ParameterError(f"feature width d={d} leaves no room for {L} classes and depth")
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")

    h, w = rig.image_size
    features = np.zeros((rig.n, d, h, w))
    ids = np.zeros((rig.n, h, w), dtype=np.int64)
    for view, camera in enumerate(rig.cameras):
        voxel, depth = march_rays(
            camera.position, camera.pixel_rays(), scene.occupancy, scene.world_min, scene.world_max
        )
        found = voxel[..., 0] >= 0
        labels = np.zeros((h, w), dtype=np.int64)
        vx = voxel[found]
        labels[found] = scene.occupancy[vx[:, 0], vx[:, 1], vx[:, 2]]
        ids[view][found] = scene.instances[vx[:, 0], vx[:, 1], vx[:, 2]]

        onehot = np.eye(L)[labels] * embed_scale  # h × w × L
        features[view, :L] = np.moveaxis(onehot, -1, 0)
        features[view, L] = np.where(found, np.clip(depth / far, 0.0, 1.0), 1.0)
        if noise_sigma > 0:
            rng = make_rng(seed, "render", view)
            features[view, L + 1 :] = noise_sigma * rng.standard_normal((d - L - 1, h, w))

    return FeatureMaps(features, noise_sigma), GroundTruthMasks(ids, len(scene.objects) + 1)


# --------------------------
# Voxel projection
# --------------------------


@dataclass
class HitSet:
    index: np.ndarray  # N × K flattened query index, -1 on padding
    q_c: np.ndarray  # N × K × 2 normalized image coordinates
    depth: np.ndarray  # N × K camera depth
    valid: np.ndarray  # N × K
    grid: Tuple[int, int, int]

    @property
    def K(self) -> int:
        return self.index.shape[1]

    @property
    def n_views(self) -> int:
        return self.index.shape[0]

    def safe_index(self) -> np.ndarray:
        return np.where(self.valid, self.index, 0)


def max_hits(grid: Sequence[int]) -> int:
    return int(math.ceil(HIT_FRACTION * int(np.prod(grid))))


def project_voxels(
    rig: CameraRig,
    grid_extents: Sequence[int],
    world_min: Sequence[float],
    world_max: Sequence[float],
    K: Optional[int] = None,
) -> HitSet:
    """Per-view hit queries: cells whose centers project inside the image."""
    centers = voxel_centers(grid_extents, world_min, world_max).reshape(-1, 3)
    K = max_hits(grid_extents) if K is None else K
    n = rig.n
    index = np.full((n, K), -1, dtype=np.int64)
    q_c = np.zeros((n, K, 2))
    depth = np.zeros((n, K))
    valid = np.zeros((n, K), dtype=bool)

    for view, camera in enumerate(rig.cameras):
        if not (camera.fx > 0 and camera.fy > 0):
            raise ParameterError(f"view {view}: degenerate intrinsics")
        h, w = camera.image_size
        u, v, z = camera.project(centers)
        inside = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        hits = np.flatnonzero(inside)
        if hits.size > K:
            logger.warning(f"view {view}: {hits.size} hit queries truncated to the {K} nearest")
            hits = np.sort(hits[np.argsort(z[hits], kind="stable")[:K]])
        k = hits.size
        index[view, :k] = hits
        q_c[view, :k, 0] = u[hits] / w
        q_c[view, :k, 1] = v[hits] / h
        depth[view, :k] = z[hits]
        valid[view, :k] = True

    return HitSet(index, q_c, depth, valid, tuple(grid_extents))


# --------------------------
# POSC scene files
# --------------------------


def encode_scene(scene: SceneSample, rig: CameraRig) -> bytes:
    H, W, Z = scene.grid
    document = SceneDocument(
        rig=rig.to_schema(),
        objects=[p.to_schema() for p in scene.objects],
        seed=scene.seed,
        world_min=scene.world_min,
        world_max=scene.world_max,
    )
    payload = document.model_dump_json().encode("utf-8")
    return b"".join(
        [
            SCENE_MAGIC,
            struct.pack("<5I", SCENE_VERSION, H, W, Z, scene.num_classes),
            scene.occupancy.astype(np.uint8).tobytes(order="F"),
            struct.pack("<I", len(payload)),
            payload,
        ]
    )


def decode_scene(blob: bytes) -> Tuple[SceneSample, CameraRig]:
    if len(blob) < 24 or blob[:4] != SCENE_MAGIC:
        raise FormatError("not a POSC scene file (bad magic)")
    version, H, W, Z, L = struct.unpack_from("<5I", blob, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported POSC version {version}")
    offset = 24
    cells = H * W * Z
    if len(blob) < offset + cells + 4:
        raise FormatError("POSC file truncated in the label block")
    labels = np.frombuffer(blob, dtype=np.uint8, count=cells, offset=offset)
    occupancy = labels.reshape((H, W, Z), order="F").copy()
    offset += cells
    (length,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + length:
        raise FormatError("POSC file truncated in the rig document")
    try:
        document = SceneDocument.model_validate(json.loads(blob[offset : offset + length]))
    except ValueError as e:
        raise FormatError(f"invalid POSC rig document: {e}")
    if occupancy.size and int(occupancy.max()) >= L:
        raise DataError(f"label {int(occupancy.max())} out of range for L={L}")

    objects = [PlacedPrimitive.from_schema(o) for o in document.objects]
    instances = _rebuild_instances(occupancy, objects, document.world_min, document.world_max)
    scene = SceneSample(
        occupancy,
        instances,
        objects,
        document.seed,
        L,
        tuple(document.world_min),
        tuple(document.world_max),
    )
    return scene, CameraRig.from_schema(document.rig)


def _rebuild_instances(occupancy, objects, world_min, world_max) -> np.ndarray:
    centers = voxel_centers(occupancy.shape, world_min, world_max)
    instances = np.zeros(occupancy.shape, dtype=np.int32)
    for i, prim in enumerate(objects):
        instances[rasterize_primitive(prim, centers) & (occupancy > 0)] = i + 1
    orphans = (occupancy > 0) & (instances == 0)
    if orphans.any():
        logger.warning(f"{int(orphans.sum())} occupied voxels belong to no listed object")
        instances[orphans] = len(objects) + 1
    return instances


def save_scene(path: Union[str, Path], scene: SceneSample, rig: CameraRig) -> None:
    Path(path).write_bytes(encode_scene(scene, rig))


def load_scene(path: Union[str, Path]) -> Tuple[SceneSample, CameraRig]:
    return decode_scene(Path(path).read_bytes())


def save_scene_set(
    directory: Union[str, Path], scenes: Sequence[SceneSample], rig: CameraRig
) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, scene in enumerate(scenes):
        path = directory / f"scene_{i:04d}.posc"
        save_scene(path, scene, rig)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} scenes to {directory}")
    return paths


def load_scene_set(directory: Union[str, Path]) -> List[Tuple[SceneSample, CameraRig]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory {directory} does not exist")
    return [load_scene(path) for path in sorted(directory.glob("*.posc"))]
