"""
Synthetic oracle scenes and dataset files.

Scenes are unions of spheres and boxes with constant density, a diffuse
color and a Phong-style specular lobe from one directional light. Ground
truth images come from quadrature of the emission-absorption integral with
exact per-interval overlap of each primitive.

A dataset directory holds manifest.txt plus one PNG per frame:

    # comment
    intrinsics <fx> <fy> <cx> <cy>
    resolution <width> <height>
    background <r> <g> <b>
    frame <file> <train|eval> <appearance_index> <16 pose floats, row-major>
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .config import Rig
from .exceptions import (
    DatasetError,
    DatasetNotFoundError,
    EnerfError,
    ManifestParseError,
    ResolutionMismatchError,
)
from .geometry import Intrinsics, Ray, RayBundle, _check_pose, image_rays, look_at

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "eval")


class Primitive(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: Literal["sphere", "box"]
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: tuple[float, float, float] = Field(
        (0.5, 0.5, 0.5), description="Sphere radius (first value) or box half-extents"
    )
    density: float = Field(10.0, ge=0.0)
    diffuse: tuple[float, float, float] = (0.8, 0.8, 0.8)
    specular_strength: float = Field(0.0, ge=0.0, le=1.0)
    shininess: float = Field(16.0, ge=1.0)
    light_dir: tuple[float, float, float] = (0.0, -1.0, 0.0)

    @field_validator("size", mode="before")
    @classmethod
    def _expand_size(cls, value):
        if isinstance(value, (int, float)):
            return (float(value),) * 3
        return value

    @field_validator("size")
    @classmethod
    def _positive_size(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError("primitive size must be positive")
        return value

    @field_validator("diffuse")
    @classmethod
    def _unit_color(cls, value):
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("diffuse components must lie in [0, 1]")
        return value

    @field_validator("light_dir")
    @classmethod
    def _normalize_light(cls, value):
        norm = float(np.linalg.norm(value))
        if norm == 0:
            raise ValueError("light_dir must be non-zero")
        return tuple(float(v) / norm for v in value)

    @property
    def radius(self) -> float:
        return self.size[0]


class OracleScene(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    primitives: list[Primitive] = Field(default_factory=list)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("background")
    @classmethod
    def _unit_background(cls, value):
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("background components must lie in [0, 1]")
        return value


def _preset_primitives(name: str) -> list[Primitive]:
    floor = Primitive(
        shape="box", center=(0.0, -0.7, 0.0), size=(1.2, 0.1, 1.2), density=30.0, diffuse=(0.35, 0.55, 0.35)
    )
    if name == "lambertian":
        return [
            Primitive(shape="sphere", center=(0.0, 0.0, 0.0), size=0.5, density=30.0, diffuse=(0.85, 0.35, 0.25)),
            floor,
        ]
    if name == "specular":
        return [
            Primitive(
                shape="sphere",
                center=(0.0, 0.0, 0.0),
                size=0.5,
                density=30.0,
                diffuse=(0.5, 0.2, 0.15),
                specular_strength=0.8,
                shininess=16.0,
                light_dir=(-1.0, -1.0, -0.5),
            ),
            floor,
        ]
    if name == "calibration":
        return [
            Primitive(
                shape="box", center=(-0.4, 0.0, 0.2), size=(0.3, 0.4, 0.3), density=20.0, diffuse=(0.2, 0.3, 0.8)
            ),
            Primitive(shape="sphere", center=(0.45, 0.1, -0.2), size=0.35, density=20.0, diffuse=(0.9, 0.8, 0.2)),
            Primitive(
                shape="box",
                center=(0.0, -0.6, 0.0),
                size=(1.0, 0.08, 1.0),
                density=20.0,
                diffuse=(0.6, 0.6, 0.6),
                specular_strength=0.4,
                shininess=8.0,
                light_dir=(0.3, -1.0, 0.2),
            ),
        ]
    if name == "slab":
        return [
            Primitive(shape="box", center=(0.0, 0.0, 0.0), size=(10.0, 10.0, 0.5), density=2.0, diffuse=(0.2, 0.4, 0.8))
        ]
    raise DatasetError(f"Unknown scene preset '{name}'; expected one of {', '.join(PRESETS)}")


PRESETS = ("lambertian", "specular", "calibration", "slab")


def preset_scene(name: str) -> OracleScene:
    return OracleScene(name=name, primitives=_preset_primitives(name))


def load_scene(name_or_path: Union[str, Path]) -> OracleScene:
    """A preset by name, or a JSON scene file."""
    if str(name_or_path) in PRESETS:
        return preset_scene(str(name_or_path))
    path = Path(name_or_path)
    if not path.exists():
        raise DatasetNotFoundError(f"No scene preset or file named '{name_or_path}'")
    try:
        return OracleScene.model_validate_json(path.read_text())
    except ValueError as e:
        raise DatasetError(f"Invalid scene file {path}: {e}") from e


# Oracle field


def _inside(primitive: Primitive, x: np.ndarray) -> np.ndarray:
    offset = x - np.asarray(primitive.center)
    if primitive.shape == "sphere":
        return np.sum(offset * offset, axis=-1) <= primitive.radius**2
    return np.all(np.abs(offset) <= np.asarray(primitive.size), axis=-1)


def _normal(primitive: Primitive, x: np.ndarray) -> np.ndarray:
    offset = x - np.asarray(primitive.center)
    if primitive.shape == "sphere":
        norm = np.linalg.norm(offset, axis=-1, keepdims=True)
        fallback = np.zeros_like(offset)
        fallback[..., 1] = 1.0
        return np.where(norm > 1e-12, offset / np.maximum(norm, 1e-12), fallback)
    scaled = offset / np.asarray(primitive.size)
    axis = np.argmax(np.abs(scaled), axis=-1)
    normal = np.zeros_like(offset)
    np.put_along_axis(normal, axis[..., None], np.sign(np.take_along_axis(scaled, axis[..., None], axis=-1)), axis=-1)
    normal[np.all(normal == 0, axis=-1), 1] = 1.0
    return normal


def reflect(incident: np.ndarray, normal: np.ndarray) -> np.ndarray:
    return incident - 2.0 * np.sum(incident * normal, axis=-1, keepdims=True) * normal


def primitive_color(primitive: Primitive, x: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Diffuse plus specular lobe, clamped to [0, 1]."""
    color = np.broadcast_to(np.asarray(primitive.diffuse), x.shape).copy()
    if primitive.specular_strength > 0:
        reflected = reflect(np.asarray(primitive.light_dir), _normal(primitive, x))
        lobe = np.maximum(0.0, np.sum(reflected * -np.asarray(d), axis=-1)) ** primitive.shininess
        color += primitive.specular_strength * lobe[..., None]
    return np.clip(color, 0.0, 1.0)


def oracle_field(scene: OracleScene, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Density and color at points x (..., 3) seen along d (..., 3).

    Where primitives overlap, the color is their density-weighted mean.
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape)
    sigma = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape)
    for primitive in scene.primitives:
        mask = _inside(primitive, x)
        sigma += primitive.density * mask
        weighted += (primitive.density * mask)[..., None] * primitive_color(primitive, x, d)
    color = np.where(sigma[..., None] > 0, weighted / np.maximum(sigma, 1e-12)[..., None], 0.0)
    return sigma, color


def intersect(primitive: Primitive, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry and exit distances per ray; exit < entry marks a miss."""
    offset = origins - np.asarray(primitive.center)
    if primitive.shape == "sphere":
        b = np.sum(offset * directions, axis=-1)
        c = np.sum(offset * offset, axis=-1) - primitive.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t_in, t_out = -b - root, -b + root
        miss = disc <= 0
        return np.where(miss, np.inf, t_in), np.where(miss, -np.inf, t_out)

    half = np.asarray(primitive.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (-half - offset) * inv
        t1 = (half - offset) * inv
    parallel = directions == 0
    inside_slab = np.abs(offset) <= half
    t_low = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t0, t1))
    t_high = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t0, t1))
    return np.max(t_low, axis=-1), np.min(t_high, axis=-1)


def oracle_intervals(
    scene: OracleScene, bundle: RayBundle, n_quadrature: int = 4096
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-interval effective density and color on a uniform grid.

    Returns (edges (R, n+1), sigma (R, n), color (R, n, 3)). Density is the
    exact mean over each interval; color is taken at the midpoint of each
    primitive's overlap.
    """
    steps = np.linspace(0.0, 1.0, n_quadrature + 1)
    edges = bundle.t_near[:, None] + (bundle.t_far - bundle.t_near)[:, None] * steps[None, :]
    lo, hi = edges[:, :-1], edges[:, 1:]
    deltas = hi - lo

    sigma = np.zeros_like(lo)
    weighted = np.zeros(lo.shape + (3,))
    for primitive in scene.primitives:
        t_in, t_out = intersect(primitive, bundle.origins, bundle.directions)
        start = np.maximum(lo, t_in[:, None])
        stop = np.minimum(hi, t_out[:, None])
        overlap = np.maximum(stop - start, 0.0)
        hit = overlap > 0
        if not np.any(hit):
            continue
        mass = primitive.density * overlap / deltas
        t_mid = np.where(hit, 0.5 * (start + stop), lo)
        points = bundle.origins[:, None, :] + bundle.directions[:, None, :] * t_mid[..., None]
        dirs = np.broadcast_to(bundle.directions[:, None, :], points.shape)
        sigma += mass
        weighted += mass[..., None] * primitive_color(primitive, points, dirs)

    color = np.where(sigma[..., None] > 0, weighted / np.maximum(sigma, 1e-300)[..., None], 0.0)
    return edges, sigma, color


def composite_numpy(
    sigma: np.ndarray, deltas: np.ndarray, color: np.ndarray, background: Sequence[float]
) -> np.ndarray:
    tau = sigma * deltas
    transmittance = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    weights = transmittance * (1.0 - np.exp(-tau))
    accumulation = weights.sum(axis=-1, keepdims=True)
    return np.sum(weights[..., None] * color, axis=-2) + (1.0 - accumulation) * np.asarray(background)


def oracle_render_bundle(
    scene: OracleScene, bundle: RayBundle, n_quadrature: int = 4096, chunk: int = 256
) -> np.ndarray:
    """Ground-truth colors for every ray of a bundle, (R, 3)."""
    out = np.empty((len(bundle), 3))
    for start in range(0, len(bundle), chunk):
        part = bundle.subset(slice(start, start + chunk))
        edges, sigma, color = oracle_intervals(scene, part, n_quadrature)
        out[start : start + len(part)] = composite_numpy(sigma, np.diff(edges, axis=-1), color, scene.background)
    return out


def oracle_render(scene: OracleScene, ray: Ray, n_quadrature: int = 4096) -> np.ndarray:
    return oracle_render_bundle(scene, RayBundle.from_rays([ray]), n_quadrature)[0]


# Datasets


@dataclass
class Frame:
    file_name: str
    pose: np.ndarray
    image: np.ndarray
    appearance_index: int
    split: str

    @property
    def rgb(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


@dataclass
class SceneDataset:
    intrinsics: Intrinsics
    width: int
    height: int
    frames: list[Frame] = field(default_factory=list)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "train"]

    def eval_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "eval"]

    @property
    def n_images(self) -> int:
        """Size of the appearance table."""
        return max((f.appearance_index for f in self.frames), default=-1) + 1

    def validate(self):
        for frame in self.frames:
            if frame.image.shape != (self.height, self.width, 3):
                raise ResolutionMismatchError(
                    f"Frame {frame.file_name} is {frame.image.shape[1]}x{frame.image.shape[0]}, "
                    f"expected {self.width}x{self.height}"
                )
            if frame.split not in SPLITS:
                raise DatasetError(f"Frame {frame.file_name} has unknown split '{frame.split}'")
        names = [f.file_name for f in self.frames]
        if len(set(names)) != len(names):
            raise DatasetError("Frame file names must be unique")


def rig_poses(rig: Union[Rig, str], count: int, seed: int, radius: float = 4.0) -> list[np.ndarray]:
    """Camera-to-world poses along an orbit, forward line or spiral."""
    rig = Rig(rig)
    rng = np.random.default_rng(seed)
    center = np.zeros(3)
    poses = []
    if rig == Rig.ORBIT:
        phase = rng.uniform(0, 2 * np.pi)
        for k in range(count):
            theta = phase + 2 * np.pi * k / count
            elevation = np.radians(rng.uniform(10.0, 35.0))
            eye = radius * np.array(
                [np.cos(elevation) * np.cos(theta), np.sin(elevation), np.cos(elevation) * np.sin(theta)]
            )
            poses.append(look_at(eye, center))
    elif rig == Rig.FORWARD:
        start = np.array([rng.uniform(-0.2, 0.2), rng.uniform(0.0, 0.3), radius + 1.0])
        stop = start - np.array([0.0, 0.0, 2.0])
        for k in range(count):
            pose = np.eye(4)
            pose[:3, 3] = start + (stop - start) * (k / max(count - 1, 1))
            poses.append(pose)
    else:
        phase = rng.uniform(0, 2 * np.pi)
        for k in range(count):
            s = k / max(count - 1, 1)
            theta = phase + 4 * np.pi * s
            height = -1.0 + 2.0 * s
            ring = np.sqrt(radius**2 - height**2)
            eye = np.array([ring * np.cos(theta), height, ring * np.sin(theta)])
            poses.append(look_at(eye, center))
    return poses


def eval_slots(n_train: int, n_eval: int) -> list[int]:
    """Positions of eval views spread among n_train + n_eval poses."""
    total = n_train + n_eval
    return sorted({min(total - 1, int((i + 0.5) * total / n_eval)) for i in range(n_eval)})


def generate_dataset(
    scene: OracleScene,
    n_train: int,
    n_eval: int,
    resolution: tuple[int, int] = (64, 64),
    camera_rig: Union[Rig, str] = Rig.ORBIT,
    seed: int = 0,
    exposure_jitter: float = 0.0,
    n_quadrature: int = 4096,
    fov_degrees: float = 40.0,
    t_near: float = 0.1,
    t_far: float = 20.0,
) -> SceneDataset:
    """Render a posed dataset with the oracle; deterministic given seed."""
    if n_train < 1 or n_eval < 1:
        raise DatasetError(f"Need at least one train and one eval view, got {n_train} and {n_eval}")

    width, height = resolution
    intrinsics = Intrinsics.from_fov(width, height, fov_degrees)
    total = n_train + n_eval
    poses = rig_poses(camera_rig, total, seed)
    eval_positions = set(eval_slots(n_train, n_eval))
    exposure_rng = np.random.default_rng([seed, 7])

    dataset = SceneDataset(intrinsics=intrinsics, width=width, height=height, background=scene.background)
    train_index = 0
    eval_index = 0
    for position, pose in enumerate(poses):
        is_eval = position in eval_positions
        bundle = image_rays(intrinsics, pose, width, height, t_near, t_far)
        rgb = oracle_render_bundle(scene, bundle, n_quadrature).reshape(height, width, 3)
        if is_eval:
            name = f"eval_{eval_index:03d}.png"
            appearance = max(train_index - 1, 0)
            eval_index += 1
        else:
            gain = 1.0 + exposure_jitter * exposure_rng.uniform(-1.0, 1.0)
            rgb = rgb * gain
            name = f"train_{train_index:03d}.png"
            appearance = train_index
            train_index += 1
        image = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
        dataset.frames.append(Frame(name, pose, image, appearance, "eval" if is_eval else "train"))
        logger.debug(f"Rendered {name} ({position + 1}/{total})")

    # Eval frames may have been placed before any train frame.
    for frame in dataset.frames:
        frame.appearance_index = min(frame.appearance_index, n_train - 1)
    return dataset


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_dataset(dataset: SceneDataset, path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create dataset directory {path}: {e}") from e
    dataset.validate()

    lines = [
        "# enerf dataset manifest",
        f"intrinsics {_format_floats(dataset.intrinsics.as_tuple())}",
        f"resolution {dataset.width} {dataset.height}",
        f"background {_format_floats(dataset.background)}",
    ]
    for frame in dataset.frames:
        Image.fromarray(frame.image).save(path / frame.file_name, format="PNG")
        pose = _format_floats(np.asarray(frame.pose).reshape(-1))
        lines.append(f"frame {frame.file_name} {frame.split} {frame.appearance_index} {pose}")

    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    logger.info(f"Saved {len(dataset.frames)} frames to {path}")
    return path


def _floats(manifest: Path, line_number: int, tokens: list[str], count: int, what: str) -> list[float]:
    if len(tokens) != count:
        raise ManifestParseError(manifest, line_number, f"{what} needs {count} values, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ManifestParseError(manifest, line_number, f"{what} values must be numbers") from None


def load_dataset(path: Path) -> SceneDataset:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not path.is_dir():
        raise DatasetNotFoundError(f"Dataset directory not found: {path}")
    if not manifest.exists():
        raise DatasetNotFoundError(f"Manifest not found: {manifest}")

    intrinsics: Optional[Intrinsics] = None
    resolution: Optional[tuple[int, int]] = None
    background = (1.0, 1.0, 1.0)
    entries = []

    for line_number, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *tokens = line.split()
        if keyword == "intrinsics":
            try:
                intrinsics = Intrinsics(*_floats(manifest, line_number, tokens, 4, "intrinsics"))
            except EnerfError as e:
                if isinstance(e, ManifestParseError):
                    raise
                raise ManifestParseError(manifest, line_number, str(e)) from e
        elif keyword == "resolution":
            values = _floats(manifest, line_number, tokens, 2, "resolution")
            if any(v < 1 or v != int(v) for v in values):
                raise ManifestParseError(manifest, line_number, "resolution must be positive integers")
            resolution = (int(values[0]), int(values[1]))
        elif keyword == "background":
            background = tuple(_floats(manifest, line_number, tokens, 3, "background"))
        elif keyword == "frame":
            if len(tokens) < 3:
                raise ManifestParseError(manifest, line_number, "frame needs file, split and appearance index")
            file_name, split, appearance = tokens[:3]
            if split not in SPLITS:
                raise ManifestParseError(manifest, line_number, f"unknown split '{split}'")
            try:
                appearance_index = int(appearance)
            except ValueError:
                raise ManifestParseError(manifest, line_number, "appearance index must be an integer") from None
            pose = np.array(_floats(manifest, line_number, tokens[3:], 16, "pose")).reshape(4, 4)
            try:
                _check_pose(pose)
            except EnerfError as e:
                raise ManifestParseError(manifest, line_number, str(e)) from e
            entries.append((line_number, file_name, split, appearance_index, pose))
        else:
            raise ManifestParseError(manifest, line_number, f"unknown directive '{keyword}'")

    if intrinsics is None or resolution is None:
        raise ManifestParseError(manifest, 0, "manifest needs intrinsics and resolution lines")

    width, height = resolution
    dataset = SceneDataset(intrinsics=intrinsics, width=width, height=height, background=background)
    for line_number, file_name, split, appearance_index, pose in entries:
        image_path = path / file_name
        if not image_path.exists():
            raise DatasetNotFoundError(f"Frame {file_name} (manifest line {line_number}) has no image at {image_path}")
        with Image.open(image_path) as img:
            image = np.array(img.convert("RGB"), dtype=np.uint8)
        if image.shape[:2] != (height, width):
            raise ResolutionMismatchError(
                f"Frame {file_name} is {image.shape[1]}x{image.shape[0]}, manifest says {width}x{height}"
            )
        dataset.frames.append(Frame(file_name, pose, image, appearance_index, split))

    dataset.validate()
    return dataset


def write_scene(scene: OracleScene, path: Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scene.model_dump(), indent=2))
    return path
