"""
Input encodings.

Positions go through a single-resolution hash grid, directions through real
spherical harmonics, and RGB colors through the same SH polynomials (on
2c - 1, unnormalized) to build graded supervision targets.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import diffcore as dc
from .config import config
from .diffcore import Tensor
from .exceptions import EncodingError

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)

# Corner offsets of a grid cell, in (x, y, z) bit order.
CELL_CORNERS = np.array([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashEncodingConfig:
    table_log2: int = 19
    features_per_entry: int = 4
    grid_resolution: int = 128
    hash_primes: tuple[int, int, int] = HASH_PRIMES

    def __post_init__(self):
        if self.grid_resolution < 2:
            raise EncodingError(f"Grid resolution must be >= 2, got {self.grid_resolution}")
        if self.table_log2 < 1:
            raise EncodingError(f"table_log2 must be positive, got {self.table_log2}")

    @property
    def table_size(self) -> int:
        return 1 << self.table_log2

    @property
    def output_dim(self) -> int:
        return self.features_per_entry + 4


@dataclass(frozen=True)
class SHLevel:
    """Degrees 0..level-1 of the real SH basis."""

    level: int

    def __post_init__(self):
        if not 1 <= self.level <= 4:
            raise EncodingError(f"SH level must be in 1..4, got {self.level}")

    @property
    def component_count(self) -> int:
        return self.level * self.level


def _as_level(level: Union[int, SHLevel]) -> SHLevel:
    return level if isinstance(level, SHLevel) else SHLevel(int(level))


def hash_slots(corners: np.ndarray, settings: HashEncodingConfig) -> np.ndarray:
    """Table slot of each integer grid vertex (..., 3)."""
    coords = corners.astype(np.uint64)
    primes = np.array(settings.hash_primes, dtype=np.uint64)
    hashed = (coords[..., 0] * primes[0]) ^ (coords[..., 1] * primes[1]) ^ (coords[..., 2] * primes[2])
    return (hashed & np.uint64(settings.table_size - 1)).astype(np.int64)


def init_hash_table(settings: HashEncodingConfig, rng: np.random.Generator, scale: float = 1e-4) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(settings.table_size, settings.features_per_entry))


def hash_encode(x_contracted: np.ndarray, table: Tensor, settings: HashEncodingConfig) -> Tensor:
    """Trilinearly interpolated table features, then raw x and a bias of 1.

    Output shape is (..., features_per_entry + 4).
    """
    x = np.asarray(x_contracted, dtype=np.float64)
    if x.shape[-1] != 3:
        raise EncodingError(f"hash_encode expects (..., 3) positions, got {x.shape}")
    if np.any(np.abs(x) > 2.0 + 1e-9) or not np.all(np.isfinite(x)):
        raise EncodingError("hash_encode input outside [-2, 2]^3; contract positions first")
    if table.shape != (settings.table_size, settings.features_per_entry):
        raise EncodingError(
            f"Hash table shape {table.shape} does not match "
            f"({settings.table_size}, {settings.features_per_entry})"
        )

    lead = x.shape[:-1]
    flat = x.reshape(-1, 3)
    grid = (np.clip(flat, -2.0, 2.0) + 2.0) / 4.0 * (settings.grid_resolution - 1)
    base = np.clip(np.floor(grid), 0, settings.grid_resolution - 2).astype(np.int64)
    frac = grid - base

    corners = base[:, None, :] + CELL_CORNERS[None, :, :]
    slots = hash_slots(corners, settings)
    weights = np.prod(np.where(CELL_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)

    rows = dc.gather(table, slots)
    features = dc.sum(rows * weights[..., None].astype(table.dtype), axis=1)
    passthrough = np.concatenate([flat, np.ones((len(flat), 1))], axis=-1).astype(table.dtype)
    encoded = dc.concat([features, dc.as_tensor(passthrough)], axis=-1)
    return encoded.reshape(*lead, settings.output_dim)


# Real SH normalization constants, grouped by degree.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658, 0.3731763325901154, 1.445305721320277)


def _polynomials(x, y, z, level: int) -> list:
    """Cartesian real-SH polynomials, ordered by (degree, order).

    Works for ndarrays and Tensors alike; the constant term is left to the
    caller since it has no operand to broadcast from.
    """
    terms = []
    if level >= 2:
        terms += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if level >= 3:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            SH_C2[0] * (x * y),
            SH_C2[0] * (y * z),
            SH_C2[1] * (2.0 * zz - xx - yy),
            SH_C2[0] * (x * z),
            SH_C2[2] * (xx - yy),
        ]
    if level >= 4:
        terms += [
            SH_C3[0] * (y * (3.0 * xx - yy)),
            SH_C3[1] * (x * y * z),
            SH_C3[2] * (y * (4.0 * zz - xx - yy)),
            SH_C3[3] * (z * (2.0 * zz - 3.0 * xx - 3.0 * yy)),
            SH_C3[2] * (x * (4.0 * zz - xx - yy)),
            SH_C3[4] * (z * (xx - yy)),
            SH_C3[0] * (x * (xx - 3.0 * yy)),
        ]
    return terms


def _evaluate(v, level: SHLevel):
    if isinstance(v, Tensor):
        x, y, z = v[..., 0], v[..., 1], v[..., 2]
        constant = dc.as_tensor(np.full(v.shape[:-1], SH_C0, dtype=v.dtype))
        return dc.stack([constant] + _polynomials(x, y, z, level.level), axis=-1)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    constant = np.full(v.shape[:-1], SH_C0, dtype=v.dtype)
    return np.stack([constant] + _polynomials(x, y, z, level.level), axis=-1)


def sh_basis(d: np.ndarray, level: Union[int, SHLevel]) -> np.ndarray:
    """Real SH basis of unit directions (..., 3) -> (..., level^2)."""
    level = _as_level(level)
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != 3:
        raise EncodingError(f"sh_basis expects (..., 3) directions, got {d.shape}")
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-5):
        raise EncodingError("sh_basis needs unit-length directions")
    return _evaluate(d, level)


def sh_color_encode(
    c: Union[Tensor, np.ndarray],
    level: Union[int, SHLevel],
    strict: Optional[bool] = None,
) -> Union[Tensor, np.ndarray]:
    """SH polynomials evaluated on 2c - 1 without normalization.

    Out-of-range colors are clamped with a warning, or rejected when strict.
    """
    level = _as_level(level)
    strict = config.strict_colors if strict is None else strict
    values = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
    if values.shape[-1] != 3:
        raise EncodingError(f"sh_color_encode expects (..., 3) colors, got {values.shape}")

    low, high = float(values.min()), float(values.max())
    if low < 0.0 or high > 1.0:
        if strict:
            raise EncodingError(f"Color components outside [0, 1]: min {low:.6g}, max {high:.6g}")
        if low < -1e-5 or high > 1.0 + 1e-5:
            logger.warning(f"Clamping colors outside [0, 1]: min {low:.6g}, max {high:.6g}")
        c = dc.clip(c, 0.0, 1.0) if isinstance(c, Tensor) else np.clip(values, 0.0, 1.0)
    elif not isinstance(c, Tensor):
        c = values

    v = 2.0 * c - 1.0
    return _evaluate(v, level)


def sh_color_decode(encoding: np.ndarray) -> np.ndarray:
    """Recover colors from the degree-1 terms of an encoding with level >= 2."""
    encoding = np.asarray(encoding, dtype=np.float64)
    if encoding.shape[-1] < 4:
        raise EncodingError("Decoding needs the degree-1 terms (level >= 2)")
    v = np.stack([encoding[..., 3], encoding[..., 1], encoding[..., 2]], axis=-1) / SH_C1
    return (v + 1.0) / 2.0
