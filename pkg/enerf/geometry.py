"""
Rays, scene contraction and the two-stage sampling strategy.

Everything here works on batches: a RayBundle holds R rays and RaySamples
holds an (R, N+1) array of interval edges. Single rays are batches of one.
Geometry is carried in float64 regardless of the model dtype.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .diffcore import Tensor
from .exceptions import GeometryError

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6
ROTATION_TOLERANCE = 1e-4


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_degrees: float) -> "Intrinsics":
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_degrees))
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    appearance_index: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.origin.shape != (3,) or self.direction.shape != (3,):
            raise GeometryError("Ray origin and direction must be 3-vectors")
        if abs(np.linalg.norm(self.direction) - 1.0) > UNIT_TOLERANCE:
            raise GeometryError(f"Ray direction is not unit length: {self.direction}")
        if not 0 < self.t_near < self.t_far:
            raise GeometryError(f"Need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        if self.appearance_index < 0:
            raise GeometryError(f"Negative appearance index {self.appearance_index}")

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass
class RayBundle:
    """A batch of rays."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    appearance: np.ndarray = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        count = len(self.origins)
        self.t_near = np.broadcast_to(np.asarray(self.t_near, dtype=np.float64), (count,)).copy()
        self.t_far = np.broadcast_to(np.asarray(self.t_far, dtype=np.float64), (count,)).copy()
        if self.appearance is None:
            self.appearance = np.zeros(count, dtype=np.int64)
        self.appearance = np.broadcast_to(np.asarray(self.appearance, dtype=np.int64), (count,)).copy()

        if len(self.directions) != count:
            raise GeometryError(f"{count} origins but {len(self.directions)} directions")
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
            raise GeometryError("Ray directions must be unit length")
        if np.any(self.t_near <= 0) or np.any(self.t_far <= self.t_near):
            raise GeometryError("Need 0 < t_near < t_far for every ray")
        if np.any(self.appearance < 0):
            raise GeometryError("Negative appearance index")

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBundle":
        return cls(
            origins=np.stack([r.origin for r in rays]),
            directions=np.stack([r.direction for r in rays]),
            t_near=np.array([r.t_near for r in rays]),
            t_far=np.array([r.t_far for r in rays]),
            appearance=np.array([r.appearance_index for r in rays]),
        )

    def ray(self, i: int) -> Ray:
        return Ray(
            origin=self.origins[i],
            direction=self.directions[i],
            t_near=float(self.t_near[i]),
            t_far=float(self.t_far[i]),
            appearance_index=int(self.appearance[i]),
        )

    def subset(self, index) -> "RayBundle":
        return RayBundle(
            origins=self.origins[index],
            directions=self.directions[index],
            t_near=self.t_near[index],
            t_far=self.t_far[index],
            appearance=self.appearance[index],
        )


@dataclass
class RaySamples:
    """Ordered sample intervals along each ray of a bundle."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.ndim == 1:
            self.edges = self.edges[None, :]
        if self.edges.shape[-1] < 2:
            raise GeometryError("RaySamples need at least two edges")
        if np.any(np.diff(self.edges, axis=-1) <= 0):
            raise GeometryError("Sample edges must be strictly increasing")

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[..., 1:] + self.edges[..., :-1])

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.edges, axis=-1)

    @property
    def n_samples(self) -> int:
        return self.edges.shape[-1] - 1

    def positions(self, bundle: RayBundle) -> np.ndarray:
        """World-space midpoints, shaped (R, N, 3)."""
        return bundle.origins[:, None, :] + bundle.directions[:, None, :] * self.midpoints[..., None]


@dataclass
class WeightHistogram:
    """Per-ray rendering weights over sample intervals."""

    edges: np.ndarray
    weights: Union[Tensor, np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.ndim == 1:
            self.edges = self.edges[None, :]
        values = self.values
        if values.ndim == 1:
            values = values[None, :]
            self.weights = self.weights.reshape(1, -1) if isinstance(self.weights, Tensor) else values
        if values.shape != self.edges[..., :-1].shape:
            raise GeometryError(f"{values.shape[-1]} weights for {self.edges.shape[-1]} edges")
        if np.any(values < 0):
            raise GeometryError("Histogram weights must be non-negative")
        if np.any(values.sum(axis=-1) > 1 + 1e-5):
            raise GeometryError("Histogram weights sum above 1")

    @property
    def values(self) -> np.ndarray:
        return self.weights.data if isinstance(self.weights, Tensor) else np.asarray(self.weights)


def contract(x: np.ndarray) -> np.ndarray:
    """Map points into the [-2, 2]^3 cube using the infinity norm."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise GeometryError("contract: non-finite input")
    norm = np.max(np.abs(x), axis=-1, keepdims=True)
    outside = norm > 1.0
    safe_norm = np.where(outside, norm, 1.0)
    scaled = (2.0 - 1.0 / safe_norm) * (x / safe_norm)
    return np.where(outside, scaled, x)


def jitter_rng(seed: int, step: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one (seed, step, stream) draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, stream])))


def piecewise_edges(
    t_near: np.ndarray, t_far: np.ndarray, n_uniform: int, n_log: int, t_split: float
) -> np.ndarray:
    """Uniform edges to t_split, then geometrically growing edges to t_far."""
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if n_uniform < 1 or n_log < 1:
        raise GeometryError(f"Need n_uniform, n_log >= 1, got {n_uniform}, {n_log}")
    if np.any(t_split <= t_near) or np.any(t_split >= t_far):
        raise GeometryError(f"t_split={t_split} must lie strictly inside (t_near, t_far)")

    steps = np.linspace(0.0, 1.0, n_uniform + 1)
    uniform = t_near[:, None] + (t_split - t_near[:, None]) * steps[None, :]
    exponents = np.arange(1, n_log + 1) / n_log
    geometric = t_split * (t_far[:, None] / t_split) ** exponents[None, :]
    edges = np.concatenate([uniform, geometric], axis=-1)
    edges[:, -1] = t_far
    return edges


def stratify(edges: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Move each interior edge uniformly between its neighbouring bin centers."""
    edges = np.array(edges, dtype=np.float64)
    centers = 0.5 * (edges[..., 1:] + edges[..., :-1])
    lower = centers[..., :-1]
    upper = centers[..., 1:]
    u = rng.random(lower.shape)
    edges[..., 1:-1] = lower + (upper - lower) * u
    return edges


def sample_piecewise(
    rays: Union[Ray, RayBundle],
    n_uniform: int,
    n_log: int,
    t_split: float,
    rng: Optional[np.random.Generator] = None,
) -> RaySamples:
    """Initial samples; stratified when a generator is supplied."""
    bundle = RayBundle.from_rays([rays]) if isinstance(rays, Ray) else rays
    edges = piecewise_edges(bundle.t_near, bundle.t_far, n_uniform, n_log, t_split)
    if rng is not None:
        edges = stratify(edges, rng)
    return RaySamples(edges)


def batched_searchsorted(sorted_rows: np.ndarray, values: np.ndarray, side: str = "left") -> np.ndarray:
    """np.searchsorted applied row by row, for rows in [0, 1]-ish ranges.

    Rows are offset by a per-row constant larger than their span so one flat
    search covers the whole batch.
    """
    sorted_rows = np.asarray(sorted_rows, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    rows, width = sorted_rows.shape
    low = np.minimum(sorted_rows.min(), values.min())
    high = np.maximum(sorted_rows.max(), values.max())
    offset = (high - low + 1.0) * np.arange(rows)[:, None]
    flat = np.searchsorted((sorted_rows - low + offset).ravel(), (values - low + offset).ravel(), side=side)
    return flat.reshape(values.shape) - width * np.arange(rows)[:, None]


def resample_pdf(
    hist: WeightHistogram,
    n: int,
    jitter: bool = False,
    rng: Optional[np.random.Generator] = None,
    padding: float = 1e-2,
) -> RaySamples:
    """Draw n new intervals by inverting the histogram's CDF.

    Quantiles are k/n for k = 0..n, so the output spans exactly the mass of
    the padded histogram. With jitter, interior quantiles move within their
    own 1/n cell.
    """
    if n < 1:
        raise GeometryError(f"resample_pdf needs n >= 1, got {n}")
    if jitter and rng is None:
        raise GeometryError("resample_pdf with jitter needs a generator")

    edges = hist.edges
    weights = hist.values.astype(np.float64) + padding
    totals = weights.sum(axis=-1, keepdims=True)
    empty = totals[..., 0] <= 0
    if np.any(empty):
        weights[empty] = 1.0
        totals = weights.sum(axis=-1, keepdims=True)

    pdf = weights / totals
    cdf = np.concatenate([np.zeros_like(pdf[..., :1]), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf = np.minimum(cdf, 1.0)
    cdf[..., -1] = 1.0

    rows = edges.shape[0]
    u = np.broadcast_to(np.linspace(0.0, 1.0, n + 1), (rows, n + 1)).copy()
    if jitter and n > 1:
        u[:, 1:-1] = (np.arange(1, n) + rng.uniform(-0.5, 0.5, size=(rows, n - 1))) / n

    bins = edges.shape[-1] - 1
    idx = batched_searchsorted(cdf, u, side="right") - 1
    # u = 1 belongs to the last bin with mass, not to trailing empty bins.
    idx[:, -1:] = batched_searchsorted(cdf, u[:, -1:], side="left") - 1
    idx = np.clip(idx, 0, bins - 1)
    cdf_lo = np.take_along_axis(cdf, idx, axis=-1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    edge_lo = np.take_along_axis(edges, idx, axis=-1)
    edge_hi = np.take_along_axis(edges, idx + 1, axis=-1)

    span = np.where(cdf_hi - cdf_lo > 0, cdf_hi - cdf_lo, 1.0)
    frac = np.clip((u - cdf_lo) / span, 0.0, 1.0)
    new_edges = edge_lo + frac * (edge_hi - edge_lo)
    new_edges = np.clip(new_edges, edges[..., :1], edges[..., -1:])
    return RaySamples(new_edges)


def _check_pose(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise GeometryError(f"Pose must be 4x4, got {pose.shape}")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-6):
        raise GeometryError(f"Pose bottom row must be (0, 0, 0, 1), got {pose[3]}")
    rotation = pose[:3, :3]
    deviation = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    if deviation > ROTATION_TOLERANCE:
        raise GeometryError(f"Pose rotation is not orthonormal (deviation {deviation:.2e})")
    return pose


def camera_directions(intrinsics: Intrinsics, pose: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """World-space unit directions through continuous pixel coordinates (M, 2)."""
    pose = _check_pose(pose)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    camera = np.stack(
        [
            (pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
            -(pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
            -np.ones(len(pixels)),
        ],
        axis=-1,
    )
    world = camera @ pose[:3, :3].T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def ray_from_pixel(
    intrinsics: Intrinsics,
    pose: np.ndarray,
    pixel: tuple[float, float],
    t_near: float = 0.1,
    t_far: float = 20.0,
    appearance_index: int = 0,
) -> Ray:
    """Pinhole ray through a continuous pixel coordinate (u, v).

    Cameras look down -z with +y up; image v grows downward. Pixel (i, j)
    has its center at (i + 0.5, j + 0.5).
    """
    direction = camera_directions(intrinsics, pose, np.array([pixel]))[0]
    return Ray(np.asarray(pose, dtype=np.float64)[:3, 3].copy(), direction, t_near, t_far, appearance_index)


def rays_for_pixels(
    intrinsics: Intrinsics,
    pose: np.ndarray,
    pixels: np.ndarray,
    t_near: float,
    t_far: float,
    appearance: Union[int, np.ndarray] = 0,
) -> RayBundle:
    directions = camera_directions(intrinsics, pose, pixels)
    origins = np.broadcast_to(np.asarray(pose, dtype=np.float64)[:3, 3], directions.shape)
    return RayBundle(origins, directions, t_near, t_far, appearance)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """Row-major (u, v) centers for every pixel of an image, shaped (H*W, 2)."""
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=-1)


def image_rays(
    intrinsics: Intrinsics,
    pose: np.ndarray,
    width: int,
    height: int,
    t_near: float,
    t_far: float,
    appearance: int = 0,
) -> RayBundle:
    """One ray per pixel, row-major."""
    return rays_for_pixels(intrinsics, pose, pixel_centers(width, height), t_near, t_far, appearance)


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose at eye looking at target (-z forward, +y up)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)

    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose
