"""
Training losses and image metrics.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import sh_color_encode
from .exceptions import LossError
from .geometry import WeightHistogram, batched_searchsorted
from .renderer import RenderedPixel

logger = logging.getLogger(__name__)

SH_LEVELS = {"fine": 4, "mid": 3, "coarse": 2}
PSNR_CAP = 99.0
INTERLEVEL_EPS = 1e-7


@dataclass
class LossBreakdown:
    total: float = 0.0
    prop: float = 0.0
    fine_mse: float = 0.0
    sh_fine: float = 0.0
    sh_mid: float = 0.0
    sh_coarse: float = 0.0
    tensor: Optional[Tensor] = None

    COLUMNS = ("total", "prop", "fine_mse", "sh_fine", "sh_mid", "sh_coarse")

    def as_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.COLUMNS}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_row().values())


def outer_measure(nerf: WeightHistogram, prop_edges: np.ndarray) -> np.ndarray:
    """NeRF mass of every interval that touches each proposal bin."""
    cumulative = np.concatenate(
        [np.zeros_like(nerf.values[..., :1], dtype=np.float64), np.cumsum(nerf.values, axis=-1, dtype=np.float64)],
        axis=-1,
    )
    bins = nerf.edges.shape[-1] - 1
    lower = np.clip(batched_searchsorted(nerf.edges, prop_edges[..., :-1], side="right") - 1, 0, bins)
    upper = np.clip(batched_searchsorted(nerf.edges, prop_edges[..., 1:], side="left"), 0, bins)
    return np.take_along_axis(cumulative, upper, axis=-1) - np.take_along_axis(cumulative, lower, axis=-1)


def loss_interlevel(nerf_hist: WeightHistogram, prop_hist: WeightHistogram) -> Tensor:
    """Penalty where proposal bins fail to upper-bound the overlapping NeRF mass.

    Summed over bins, averaged over rays. NeRF weights are treated as
    constants.
    """
    if nerf_hist.edges.shape[0] != prop_hist.edges.shape[0]:
        raise LossError(f"{nerf_hist.edges.shape[0]} NeRF rays vs {prop_hist.edges.shape[0]} proposal rays")
    starts_match = np.allclose(nerf_hist.edges[..., 0], prop_hist.edges[..., 0], rtol=0, atol=1e-6)
    ends_match = np.allclose(nerf_hist.edges[..., -1], prop_hist.edges[..., -1], rtol=0, atol=1e-6)
    if not (starts_match and ends_match):
        raise LossError("Histograms cover different ray spans")

    overlap = outer_measure(nerf_hist, prop_hist.edges)
    w_prop = dc.as_tensor(prop_hist.weights)
    excess = dc.relu(overlap.astype(w_prop.dtype) - w_prop)
    penalty = excess * excess / (w_prop + INTERLEVEL_EPS)
    return dc.mean(dc.sum(penalty, axis=-1))


def _squared_error(a: Tensor, b, axis: int = -1) -> Tensor:
    diff = a - b
    return dc.mean(dc.sum(diff * diff, axis=axis))


def loss_total(
    pixel: RenderedPixel,
    gt: np.ndarray,
    proposal_pairs: Sequence[tuple[WeightHistogram, WeightHistogram]] = (),
    sh_levels: Mapping[str, int] = SH_LEVELS,
    sh_terms: bool = True,
    prop_weight: float = 1.0,
    strict: Optional[bool] = None,
) -> LossBreakdown:
    """Proposal loss, fine MSE and graded SH color terms for a ray batch.

    proposal_pairs holds (nerf_hist, prop_hist) per proposal round. MSE and SH
    terms sum over components and average over rays. With sh_terms off the
    three SH columns are exactly 0.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pixel.fine.shape:
        raise LossError(f"Ground truth {gt.shape} vs rendered {pixel.fine.shape}")
    dtype = pixel.fine.dtype
    target = gt.astype(dtype)

    parts: dict[str, Tensor] = {"fine_mse": _squared_error(pixel.fine, target)}

    if proposal_pairs:
        rounds = [loss_interlevel(nerf_hist, prop_hist) for nerf_hist, prop_hist in proposal_pairs]
        prop = rounds[0]
        for term in rounds[1:]:
            prop = prop + term
        parts["prop"] = prop * prop_weight if prop_weight != 1.0 else prop

    if sh_terms:
        for name in ("fine", "mid", "coarse"):
            predicted = pixel.channel(name)
            level = sh_levels[name]
            encoded_gt = sh_color_encode(gt, level, strict=strict).astype(dtype)
            parts[f"sh_{name}"] = _squared_error(sh_color_encode(predicted, level, strict=strict), encoded_gt)

    names = list(parts)
    total = parts[names[0]]
    for name in names[1:]:
        total = total + parts[name]

    values = {name: float(tensor.data) for name, tensor in parts.items()}
    breakdown = LossBreakdown(tensor=total, **values)
    breakdown.total = float(np.sum([getattr(breakdown, c) for c in LossBreakdown.COLUMNS[1:]]))
    return breakdown


def _check_images(img_a: np.ndarray, img_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise LossError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(-10.0 * np.log10(mse), PSNR_CAP))


def metrics_psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; exact equality reports 99."""
    a, b = _check_images(img_a, img_b)
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def metrics_ssim(img_a: np.ndarray, img_b: np.ndarray, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = _check_images(img_a, img_b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]

    c1 = 0.01**2
    c2 = 0.03**2
    blur = lambda image: gaussian_filter(image, sigma=sigma, truncate=3.5)  # noqa: E731

    scores = []
    for channel in range(a.shape[-1]):
        x, y = a[..., channel], b[..., channel]
        mu_x, mu_y = blur(x), blur(y)
        var_x = blur(x * x) - mu_x * mu_x
        var_y = blur(y * y) - mu_y * mu_y
        cov = blur(x * y) - mu_x * mu_y
        numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(np.mean(numerator / denominator))
    return float(np.mean(scores))
