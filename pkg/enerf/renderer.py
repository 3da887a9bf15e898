"""
Volume rendering.

composite() turns per-sample densities and colors into per-ray colors with
transmittance weights. render_rays() runs the full sampler stack (piecewise
samples, proposal densities, histogram resampling) in front of the field.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from . import diffcore as dc
from .config import SamplingConfig
from .diffcore import Tensor
from .exceptions import RenderError
from .field import ProposalDensity, RadianceField
from .geometry import (
    Intrinsics,
    RayBundle,
    RaySamples,
    WeightHistogram,
    image_rays,
    resample_pdf,
    sample_piecewise,
)

logger = logging.getLogger(__name__)

WHITE = (1.0, 1.0, 1.0)


@dataclass
class RenderedPixel:
    """Composited colors for a batch of R rays.

    Colors already include the background blend; premultiplied() returns the
    pre-background sum.
    """

    fine: Tensor
    accumulation: Tensor
    depth: np.ndarray
    weights: Tensor
    mid: Optional[Tensor] = None
    coarse: Optional[Tensor] = None
    background: tuple[float, float, float] = WHITE

    def channel(self, name: str) -> Tensor:
        value = getattr(self, name, None)
        if name not in ("fine", "mid", "coarse") or value is None:
            raise RenderError(f"Channel '{name}' was not rendered")
        return value

    def premultiplied(self, name: str) -> np.ndarray:
        bg = np.asarray(self.background)
        return self.channel(name).data - bg * (1.0 - self.accumulation.data[..., None])


def render_weights(sigmas: Tensor, deltas: np.ndarray) -> Tensor:
    """w_k = T_k * alpha_k along the last axis."""
    tau = sigmas * deltas.astype(sigmas.dtype)
    exclusive = dc.cumsum(tau, axis=-1) - tau
    transmittance = dc.exp(-exclusive)
    alpha = 1.0 - dc.exp(-tau)
    return transmittance * alpha


def composite(
    sigmas: Union[Tensor, np.ndarray],
    deltas: np.ndarray,
    colors: dict[str, Union[Tensor, np.ndarray]],
    t_mid: Optional[np.ndarray] = None,
    background: Sequence[float] = WHITE,
) -> RenderedPixel:
    """Alpha-composite (R, N) samples; every color set shares the weights.

    colors maps channel names ("fine", "mid", "coarse") to (R, N, 3) or
    (R, 1, 3) arrays.
    """
    sigmas = dc.as_tensor(sigmas)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.ndim == 1:
        sigmas = sigmas.reshape(1, -1)
        deltas = deltas.reshape(1, -1)
        colors = {k: dc.as_tensor(v).reshape(1, -1, 3) for k, v in colors.items()}
    if sigmas.shape != deltas.shape:
        raise RenderError(f"composite: {sigmas.shape} sigmas vs {deltas.shape} deltas")
    if np.any(sigmas.data < 0):
        raise RenderError("composite: negative density")
    if np.any(deltas <= 0):
        raise RenderError("composite: non-positive interval length")

    weights = render_weights(sigmas, deltas)
    accumulation = dc.sum(weights, axis=-1)
    bg = np.asarray(background, dtype=sigmas.dtype)
    remainder = (1.0 - accumulation).reshape(-1, 1) * bg

    rendered = {}
    for name, values in colors.items():
        if values is None:
            continue
        values = dc.as_tensor(values)
        if values.shape[-1] != 3 or values.shape[0] != sigmas.shape[0]:
            raise RenderError(f"composite: colors for '{name}' have shape {values.shape}")
        rendered[name] = dc.sum(weights.reshape(*weights.shape, 1) * values, axis=-2) + remainder

    if t_mid is None:
        depth = np.zeros(sigmas.shape[0])
    else:
        w = weights.data.astype(np.float64)
        depth = np.sum(w * t_mid, axis=-1) / np.maximum(w.sum(axis=-1), 1e-10)

    return RenderedPixel(
        fine=rendered.get("fine"),
        mid=rendered.get("mid"),
        coarse=rendered.get("coarse"),
        accumulation=accumulation,
        depth=depth,
        weights=weights,
        background=tuple(float(c) for c in background),
    )


@dataclass
class SamplePlan:
    """Interval edges used at each stage: one per proposal, then the field's."""

    stages: list[RaySamples] = field(default_factory=list)


@dataclass
class RenderResult:
    pixel: RenderedPixel
    proposal_histograms: list[WeightHistogram]
    field_histogram: WeightHistogram
    plan: SamplePlan


class SamplerStack:
    """Piecewise samples, then proposal-guided resampling rounds."""

    def __init__(self, proposals: Sequence[ProposalDensity], sampling: SamplingConfig):
        if len(proposals) != len(sampling.proposal_samples) + 1:
            raise RenderError(
                f"{len(proposals)} proposal networks for {len(sampling.proposal_samples) + 1} proposal rounds"
            )
        self.proposals = list(proposals)
        self.sampling = sampling

    @property
    def stage_counts(self) -> list[int]:
        s = self.sampling
        return [s.n_uniform + s.n_log] + list(s.proposal_samples) + [s.nerf_samples]

    def initial(self, bundle: RayBundle, rng: Optional[np.random.Generator]) -> RaySamples:
        s = self.sampling
        return sample_piecewise(bundle, s.n_uniform, s.n_log, s.t_split, rng)

    def resample(self, hist: WeightHistogram, n: int, rng: Optional[np.random.Generator]) -> RaySamples:
        return resample_pdf(hist, n, jitter=rng is not None, rng=rng, padding=self.sampling.histogram_padding)


def render_rays(
    field_: RadianceField,
    bundle: RayBundle,
    sampler: SamplerStack,
    rng: Optional[np.random.Generator] = None,
    plan: Optional[SamplePlan] = None,
    appearance: Optional[np.ndarray] = None,
    background: Sequence[float] = WHITE,
) -> RenderResult:
    """Render a ray bundle through proposals and field.

    rng enables stratified jitter. A plan replays fixed intervals at every
    stage, which makes the output a smooth function of the parameters.
    appearance=None uses the mean embedding.
    """
    stages = list(plan.stages) if plan is not None else []
    expected = len(sampler.proposals) + 1
    if plan is not None and len(stages) != expected:
        raise RenderError(f"Sample plan has {len(stages)} stages, sampler needs {expected}")

    used: list[RaySamples] = []
    histograms: list[WeightHistogram] = []
    counts = sampler.stage_counts
    for i, proposal in enumerate(sampler.proposals):
        if plan is not None:
            samples = stages[i]
        elif i == 0:
            samples = sampler.initial(bundle, rng)
        else:
            samples = sampler.resample(histograms[-1], counts[i], rng)
        used.append(samples)
        sigma = proposal.density(samples.positions(bundle))
        histograms.append(WeightHistogram(samples.edges, render_weights(sigma, samples.deltas)))

    samples = stages[-1] if plan is not None else sampler.resample(histograms[-1], counts[-1], rng)
    used.append(samples)

    output = field_.forward(samples.positions(bundle), bundle.directions, appearance)
    colors = {name: getattr(output, f"c_{name}") for name in ("fine", "mid", "coarse")}
    pixel = composite(output.sigma, samples.deltas, colors, samples.midpoints, background)
    return RenderResult(
        pixel=pixel,
        proposal_histograms=histograms,
        field_histogram=WeightHistogram(samples.edges, pixel.weights),
        plan=SamplePlan(used),
    )


def render_ray(field_: RadianceField, ray, sampler: SamplerStack, **kwargs) -> RenderResult:
    """render_rays for a single Ray."""
    return render_rays(field_, RayBundle.from_rays([ray]), sampler, **kwargs)


def render_image(
    field_: RadianceField,
    sampler: SamplerStack,
    intrinsics: Intrinsics,
    pose: np.ndarray,
    width: int,
    height: int,
    channels: Sequence[str] = ("fine", "mid", "coarse"),
    appearance: Optional[int] = None,
    chunk: int = 4096,
    background: Sequence[float] = WHITE,
) -> dict[str, np.ndarray]:
    """Deterministic full-image render; returns (H, W, 3) arrays per channel plus depth and acc."""
    s = sampler.sampling
    bundle = image_rays(intrinsics, pose, width, height, s.t_near, s.t_far, appearance or 0)
    pieces: dict[str, list[np.ndarray]] = {name: [] for name in list(channels) + ["depth", "acc"]}

    with dc.no_grad():
        for start in range(0, len(bundle), chunk):
            part = bundle.subset(slice(start, start + chunk))
            index = None if appearance is None else part.appearance
            pixel = render_rays(field_, part, sampler, appearance=index, background=background).pixel
            for name in channels:
                pieces[name].append(pixel.channel(name).data)
            pieces["depth"].append(pixel.depth)
            pieces["acc"].append(pixel.accumulation.data)

    images = {name: np.concatenate(pieces[name]).reshape(height, width, 3) for name in channels}
    images["depth"] = np.concatenate(pieces["depth"]).reshape(height, width)
    images["acc"] = np.concatenate(pieces["acc"]).reshape(height, width)
    return images


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> Path:
    """Write a float image in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def write_pfm(path: Path, image: np.ndarray) -> Path:
    """Write a color (H, W, 3) or grayscale (H, W) image as little-endian PFM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image, dtype="<f4")
    color = image.ndim == 3
    height, width = image.shape[:2]
    with open(path, "wb") as handle:
        handle.write(b"PF\n" if color else b"Pf\n")
        handle.write(f"{width} {height}\n".encode("ascii"))
        handle.write(b"-1.0\n")
        handle.write(np.ascontiguousarray(np.flipud(image)).tobytes())
    return path


def read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as handle:
        header = handle.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise RenderError(f"Not a PFM file: {path}")
        width, height = (int(v) for v in handle.readline().split())
        scale = float(handle.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(handle.read(), dtype=dtype, count=width * height * channels)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)
