"""
Training, evaluation and checkpoints.

A run directory holds:

    config.echo    effective run configuration
    loss.csv       one row per logging step
    ckpt/          ENERF1 checkpoints plus JSON sidecars
    renders/       fine/mid/coarse renders of every eval view (PNG + PFM)
    eval.json      per-view and mean metrics
    resources.json peak RSS, CPU and wall time; decoder pre-training losses
"""

import csv
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from . import diffcore as dc
from .config import FieldConfig, RunConfig, SamplingConfig, Variant, config
from .diffcore import ParamStore, load_checkpoint, save_checkpoint
from .exceptions import CheckpointError, DatasetError, TrainingDivergedError
from .field import (
    DecoderReport,
    ProposalDensity,
    RadianceField,
    copy_decoder,
    decoder_cache_name,
    pretrain_decoders,
)
from .geometry import Intrinsics, RayBundle, jitter_rng, pixel_centers, rays_for_pixels
from .monitor import ResourceSampler
from .objective import LossBreakdown, loss_total, metrics_psnr, metrics_ssim, psnr_from_mse
from .renderer import SamplerStack, render_image, render_rays, write_pfm, write_png
from .scenegen import SceneDataset, generate_dataset, preset_scene

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step",) + LossBreakdown.COLUMNS + ("psnr_train",)
CHECKPOINT_FORMAT = 1

# Calibration captures for decoder pre-training
CALIBRATION_VIEWS = 8
CALIBRATION_RESOLUTION = (32, 32)
CALIBRATION_QUADRATURE = 256


@dataclass
class NerfModel:
    """Everything a forward pass needs: parameters, field, proposals and sampler."""

    store: ParamStore
    field: RadianceField
    proposals: list[ProposalDensity]
    sampler: SamplerStack
    field_config: FieldConfig
    sampling: SamplingConfig
    decoder_report: Optional[DecoderReport] = None

    @property
    def variant(self) -> Variant:
        return self.field.variant

    @property
    def channels(self) -> tuple[str, ...]:
        return self.field.channels

    def lr_overrides(self, lr_tables: float) -> dict[str, float]:
        """Table learning rates keyed by parameter name prefix."""
        names = self.field.table_names() + [p.table_name for p in self.proposals]
        return {name: lr_tables for name in names}


def build_model(
    field_config: FieldConfig,
    sampling: SamplingConfig,
    n_images: int,
    dtype=np.float32,
) -> NerfModel:
    """Freshly initialized model; parameter draws depend only on field_config.init_seed."""
    store = ParamStore(dtype=dtype)
    radiance = RadianceField(store, field_config, n_images)
    proposals = [
        ProposalDensity(
            store,
            f"proposal.{i}",
            table_log2=sampling.proposal_table_log2,
            resolution=sampling.proposal_resolution,
            hidden=sampling.proposal_hidden,
            rng=np.random.default_rng([field_config.init_seed, 100 + i]),
        )
        for i in range(len(sampling.proposal_samples) + 1)
    ]
    sampler = SamplerStack(proposals, sampling)
    logger.debug(
        f"Built {radiance.variant.value} model: {store.num_values()} values, "
        f"{store.num_values(trainable_only=True)} trainable"
    )
    return NerfModel(store, radiance, proposals, sampler, field_config, sampling)


def _atomic_save(path: Path, store: ParamStore, prefix: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(handle)
    try:
        save_checkpoint(Path(tmp), store, prefix=prefix, include_moments=False)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def calibration_dataset(seed: int) -> SceneDataset:
    """Small capture of the calibration preset used to pre-train decoders."""
    return generate_dataset(
        preset_scene("calibration"),
        n_train=CALIBRATION_VIEWS,
        n_eval=1,
        resolution=CALIBRATION_RESOLUTION,
        seed=seed,
        n_quadrature=CALIBRATION_QUADRATURE,
    )


def prepare_decoders(model: NerfModel, cache_dir: Optional[Path] = None) -> Optional[DecoderReport]:
    """Fill the frozen decoder weights of model.

    Sources, in order: field.decoder_checkpoint, a cached pre-training result
    under cache_dir, a fresh pre-training run (which is then cached). Variants
    without pre-trained decoders are left untouched.
    """
    cfg = model.field_config
    if model.variant in (Variant.NO_PRETRAINED, Variant.TEST2):
        return None

    if cfg.decoder_checkpoint is not None:
        count = load_checkpoint(cfg.decoder_checkpoint, model.store, prefix="decoder.")
        logger.info(f"Loaded {count} decoder parameters from {cfg.decoder_checkpoint}")
        return None

    if cfg.decoder_pretrain_steps == 0:
        logger.warning("decoder_pretrain_steps = 0; decoders keep their random initialization")
        return None

    cache_dir = Path(cache_dir) if cache_dir is not None else config.decoders_dir
    cache_path = cache_dir / decoder_cache_name(cfg)
    if cache_path.exists():
        count = load_checkpoint(cache_path, model.store, prefix="decoder.")
        logger.info(f"Reusing cached decoders {cache_path.name} ({count} parameters)")
        return None

    logger.info(f"Pre-training decoders for {cfg.decoder_pretrain_steps} steps (seed {cfg.init_seed})")
    decoder, report = pretrain_decoders(
        calibration_dataset(cfg.init_seed), cfg.decoder_pretrain_steps, cfg, dtype=model.store.dtype
    )
    copy_decoder(decoder.store, model.store)
    _atomic_save(cache_path, decoder.store, prefix="decoder.")
    model.decoder_report = report
    return report


# Ray pools


@dataclass
class PixelPool:
    """Every pixel of a set of frames as a ray with its target color."""

    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    appearance: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def from_dataset(cls, dataset: SceneDataset, t_near: float, t_far: float) -> "PixelPool":
        frames = dataset.train_frames()
        if not frames:
            raise DatasetError("Dataset has no training frames")
        pixels = pixel_centers(dataset.width, dataset.height)
        origins, directions, colors, appearance = [], [], [], []
        for frame in frames:
            bundle = rays_for_pixels(dataset.intrinsics, frame.pose, pixels, t_near, t_far)
            origins.append(bundle.origins)
            directions.append(bundle.directions)
            colors.append(frame.rgb.reshape(-1, 3))
            appearance.append(np.full(len(pixels), frame.appearance_index, dtype=np.int64))
        return cls(
            origins=np.concatenate(origins),
            directions=np.concatenate(directions),
            colors=np.concatenate(colors),
            appearance=np.concatenate(appearance),
        )

    def batch_indices(self, seed: int, step: int, count: int) -> np.ndarray:
        """Uniform draw with replacement; depends only on (seed, step)."""
        return np.random.default_rng([seed, step]).integers(0, len(self), count)

    def bundle(self, indices: np.ndarray, t_near: float, t_far: float) -> RayBundle:
        return RayBundle(
            self.origins[indices], self.directions[indices], t_near, t_far, self.appearance[indices]
        )


# Training


def learning_rate_scale(step: int, warmup_steps: int, warmup_factor: float) -> float:
    """Linear ramp from warmup_factor to 1 over warmup_steps."""
    if warmup_steps <= 0:
        return 1.0
    return warmup_factor + (1.0 - warmup_factor) * min(1.0, step / warmup_steps)


@dataclass
class TrainResult:
    model: NerfModel
    history: list[dict[str, float]] = field(default_factory=list)
    step: int = 0
    resources: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1]["total"] if self.history else None


class Trainer:
    """Runs optimization steps over a dataset's training pixels."""

    def __init__(
        self,
        model: NerfModel,
        dataset: SceneDataset,
        run_config: RunConfig,
        run_dir: Optional[Path] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.run_config = run_config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.sampling = run_config.sampling
        self.pool = PixelPool.from_dataset(dataset, self.sampling.t_near, self.sampling.t_far)
        self.background = tuple(dataset.background)
        self.sh_terms = model.variant != Variant.NO_MULTIPERF
        self.sh_levels = {
            "fine": run_config.loss.sh_fine,
            "mid": run_config.loss.sh_mid,
            "coarse": run_config.loss.sh_coarse,
        }
        self.monitor = ResourceSampler()

    def _dump_batch(self, step: int, indices: np.ndarray) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = self.run_dir / f"diverged_step{step:06d}.npz"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            step=step,
            indices=indices,
            origins=self.pool.origins[indices],
            directions=self.pool.directions[indices],
            colors=self.pool.colors[indices],
            appearance=self.pool.appearance[indices],
        )
        return path

    def step(self, step: int) -> LossBreakdown:
        """One optimization step; batch and jitter depend only on (seed, step)."""
        train_cfg = self.run_config.train
        indices = self.pool.batch_indices(train_cfg.seed, step, train_cfg.rays_per_batch)
        bundle = self.pool.bundle(indices, self.sampling.t_near, self.sampling.t_far)

        store = self.model.store
        store.zero_grad()
        result = render_rays(
            self.model.field,
            bundle,
            self.model.sampler,
            rng=jitter_rng(train_cfg.seed, step, 1),
            appearance=bundle.appearance,
            background=self.background,
        )
        pairs = [(result.field_histogram, hist) for hist in result.proposal_histograms]
        breakdown = loss_total(
            result.pixel,
            self.pool.colors[indices],
            proposal_pairs=pairs,
            sh_levels=self.sh_levels,
            sh_terms=self.sh_terms,
            prop_weight=self.run_config.loss.prop_weight,
            strict=self.run_config.loss.strict_colors,
        )
        if not breakdown.is_finite():
            dump = self._dump_batch(step, indices)
            logger.error(f"Non-finite loss at step {step}: {breakdown.as_row()}")
            raise TrainingDivergedError(step, dump)

        dc.backward(breakdown.tensor)
        scale = learning_rate_scale(step, train_cfg.warmup_steps, train_cfg.warmup_factor)
        dc.adam_step(
            store,
            train_cfg.lr_mlp * scale,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.eps,
            lr_overrides=self.model.lr_overrides(train_cfg.lr_tables * scale),
        )
        return breakdown

    def checkpoint(self, step: int, name: Optional[str] = None) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = self.run_dir / "ckpt" / (name or f"step_{step:06d}.ckpt")
        return checkpoint_save(path, self.model, step, self.dataset)

    def fit(self, start_step: int = 0) -> TrainResult:
        """Train from start_step up to train.iterations."""
        train_cfg = self.run_config.train
        iterations = train_cfg.iterations
        result = TrainResult(model=self.model, step=start_step)

        writer = None
        handle = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            loss_path = self.run_dir / "loss.csv"
            resume = start_step > 0 and loss_path.exists()
            handle = open(loss_path, "a" if resume else "w", newline="")
            writer = csv.DictWriter(handle, fieldnames=LOSS_COLUMNS)
            if not resume:
                writer.writeheader()

        logger.info(
            f"Training {self.model.variant.value} for steps {start_step}..{iterations} "
            f"on {len(self.pool)} pixels, {train_cfg.rays_per_batch} rays per batch"
        )
        progress = tqdm(
            range(start_step, iterations),
            initial=start_step,
            total=iterations,
            disable=not config.progress,
            desc=self.model.variant.value,
            unit="step",
        )
        try:
            for step in progress:
                breakdown = self.step(step)
                last = step == iterations - 1
                if step % train_cfg.log_every == 0 or last:
                    row = {"step": step, **breakdown.as_row(), "psnr_train": psnr_from_mse(breakdown.fine_mse / 3.0)}
                    result.history.append(row)
                    if writer is not None:
                        writer.writerow(row)
                        handle.flush()
                    usage = self.monitor.sample()
                    scale = learning_rate_scale(step, train_cfg.warmup_steps, train_cfg.warmup_factor)
                    logger.info(
                        f"step {step}: loss {breakdown.total:.5f} (prop {breakdown.prop:.5f}, "
                        f"mse {breakdown.fine_mse:.5f}), psnr {row['psnr_train']:.2f}, "
                        f"lr x{scale:.3f}, cpu {usage.cpu_percent:.0f}%, rss {usage.memory_mb:.0f}MB"
                    )
                    progress.set_postfix(loss=f"{breakdown.total:.4f}", psnr=f"{row['psnr_train']:.2f}")

                done = step + 1
                if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0 and not last:
                    self.checkpoint(done)
                if train_cfg.eval_every and done % train_cfg.eval_every == 0 and not last:
                    report = evaluate(self.model, self.dataset, chunk=train_cfg.chunk)
                    logger.info(f"step {done}: held-out psnr {report.mean('psnr', 'fine'):.2f}")
                result.step = done
        finally:
            progress.close()
            if handle is not None:
                handle.close()

        if self.run_dir is not None:
            self.checkpoint(result.step, name="final.ckpt")
        result.resources = self.monitor.summary()
        return result


def train(
    dataset: SceneDataset,
    run_config: RunConfig,
    run_dir: Optional[Path] = None,
    model: Optional[NerfModel] = None,
    start_step: int = 0,
    dtype=np.float32,
    decoder_cache: Optional[Path] = None,
) -> TrainResult:
    """Build (or continue) a model and train it on dataset."""
    dataset.validate()
    if model is None:
        model = build_model(run_config.field, run_config.sampling, dataset.n_images, dtype=dtype)
        prepare_decoders(model, decoder_cache)
    return Trainer(model, dataset, run_config, run_dir).fit(start_step)


# Evaluation


@dataclass
class ViewMetrics:
    name: str
    psnr: dict[str, float]
    ssim: dict[str, float]

    def to_dict(self) -> dict:
        return {"view": self.name, "psnr": self.psnr, "ssim": self.ssim}


@dataclass
class EvalReport:
    """Per-view metrics for every rendered channel; means are plain averages."""

    channels: tuple[str, ...]
    views: list[ViewMetrics] = field(default_factory=list)

    def mean(self, metric: str, channel: str = "fine") -> float:
        values = [getattr(view, metric)[channel] for view in self.views]
        return float(np.mean(values)) if values else float("nan")

    def means(self) -> dict[str, float]:
        return {
            f"{metric}_{channel}": self.mean(metric, channel)
            for channel in self.channels
            for metric in ("psnr", "ssim")
        }

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "views": [view.to_dict() for view in self.views],
            "mean": self.means(),
        }


def evaluate_images(
    predictions: dict[str, dict[str, np.ndarray]],
    references: dict[str, np.ndarray],
) -> EvalReport:
    """Score predicted images (view -> channel -> image) against references (view -> image)."""
    channels: tuple[str, ...] = ()
    views = []
    for name, rendered in predictions.items():
        channels = channels or tuple(rendered)
        gt = references[name]
        views.append(
            ViewMetrics(
                name=name,
                psnr={c: metrics_psnr(rendered[c], gt) for c in channels},
                ssim={c: metrics_ssim(rendered[c], gt) for c in channels},
            )
        )
    return EvalReport(channels=channels, views=views)


def evaluate(
    model: NerfModel,
    dataset: SceneDataset,
    chunk: int = 4096,
    render_dir: Optional[Path] = None,
    write_float: bool = True,
) -> EvalReport:
    """Render every eval view on all of the model's channels and score them.

    Renders use no jitter and the mean appearance embedding.
    """
    predictions: dict[str, dict[str, np.ndarray]] = {}
    references: dict[str, np.ndarray] = {}
    for frame in dataset.eval_frames():
        images = render_image(
            model.field,
            model.sampler,
            dataset.intrinsics,
            frame.pose,
            dataset.width,
            dataset.height,
            channels=model.channels,
            chunk=chunk,
            background=dataset.background,
        )
        stem = Path(frame.file_name).stem
        predictions[stem] = {c: images[c] for c in model.channels}
        references[stem] = frame.rgb
        if render_dir is not None:
            for channel in model.channels:
                write_png(render_dir / f"{stem}_{channel}.png", images[channel])
                if write_float:
                    write_pfm(render_dir / f"{stem}_{channel}.pfm", images[channel])
            if write_float:
                write_pfm(render_dir / f"{stem}_depth.pfm", images["depth"])

    report = evaluate_images(predictions, references)
    if not report.views:
        report.channels = model.channels
    return report


def write_eval_report(report: EvalReport, run_dir: Path, extra: Optional[dict] = None) -> Path:
    path = Path(run_dir) / "eval.json"
    payload = report.to_dict()
    payload.update(extra or {})
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def write_resource_report(run_dir: Path, resources: dict, decoder_report: Optional[DecoderReport] = None) -> Path:
    """Write machine-dependent facts (memory, timings, decoder losses) beside eval.json."""
    path = Path(run_dir) / "resources.json"
    payload = dict(resources)
    if decoder_report is not None:
        payload["decoder"] = decoder_report.to_dict()
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


# Checkpoints


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def checkpoint_save(path: Path, model: NerfModel, step: int, dataset: Optional[SceneDataset] = None) -> Path:
    """Write parameters and Adam moments, plus a JSON sidecar with run metadata."""
    path = Path(path)
    save_checkpoint(path, model.store)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "variant": model.variant.value,
        "step": step,
        "adam_step": model.store.step,
        "n_images": model.field.n_images,
        "field": model.field_config.model_dump(mode="json"),
        "sampling": model.sampling.model_dump(mode="json"),
    }
    if dataset is not None:
        meta["intrinsics"] = list(dataset.intrinsics.as_tuple())
        meta["resolution"] = [dataset.width, dataset.height]
        meta["background"] = list(dataset.background)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    logger.info(f"Saved checkpoint {path} at step {step}")
    return path


def read_checkpoint_meta(path: Path) -> dict:
    sidecar = _sidecar(Path(path))
    if not sidecar.exists():
        raise CheckpointError(f"Missing checkpoint metadata {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Unreadable checkpoint metadata {sidecar}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {meta.get('format')!r} in {sidecar}")
    return meta


@dataclass
class LoadedCheckpoint:
    model: NerfModel
    step: int
    meta: dict

    @property
    def intrinsics(self) -> Optional[Intrinsics]:
        values = self.meta.get("intrinsics")
        return Intrinsics(*values) if values else None

    @property
    def resolution(self) -> Optional[tuple[int, int]]:
        values = self.meta.get("resolution")
        return tuple(values) if values else None

    @property
    def background(self) -> tuple[float, float, float]:
        return tuple(self.meta.get("background", (1.0, 1.0, 1.0)))


def checkpoint_load(path: Path, model: Optional[NerfModel] = None, dtype=np.float32) -> LoadedCheckpoint:
    """Restore parameters, Adam state and step.

    With model=None a model is rebuilt from the sidecar. A model of a
    different variant is rejected.
    """
    path = Path(path)
    meta = read_checkpoint_meta(path)
    variant = meta["variant"]
    if model is None:
        field_config = FieldConfig.model_validate(meta["field"])
        sampling = SamplingConfig.model_validate(meta["sampling"])
        model = build_model(field_config, sampling, meta["n_images"], dtype=dtype)
    elif model.variant.value != variant:
        raise CheckpointError(
            f"Checkpoint {path} holds variant '{variant}' but the model is variant '{model.variant.value}'"
        )

    load_checkpoint(path, model.store)
    model.store.step = int(meta["adam_step"])
    logger.info(f"Loaded {variant} checkpoint {path} at step {meta['step']}")
    return LoadedCheckpoint(model=model, step=int(meta["step"]), meta=meta)
