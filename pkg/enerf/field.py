"""
The radiance field and its ablation variants.

A spatial MLP reads the hash encoding of a contracted position (optionally
alongside a frozen decoder's features) and emits density, view-independent
color, the blend factor y and geometry features. A directional MLP reads
the SH direction encoding, a frozen decoder's features and a per-image
appearance embedding, and emits view-dependent color. The two colors are
blended into the joint color.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import diffcore as dc
from .config import FieldConfig, Variant
from .diffcore import ParamStore, Tensor
from .encoders import HashEncodingConfig, hash_encode, init_hash_table, sh_basis
from .exceptions import FieldError
from .geometry import contract, piecewise_edges, rays_for_pixels

logger = logging.getLogger(__name__)

SIGMA_CLAMP = 10.0


def density_activation(raw: Tensor) -> Tensor:
    """exp with the pre-activation clamped to [-10, 10]."""
    return dc.exp(dc.clip(raw, -SIGMA_CLAMP, SIGMA_CLAMP))


class MLP:
    """Linear layers with ReLU between them and no activation after the last."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        in_dim: int,
        hidden: int,
        out_dim: int,
        layers: int,
        rng: np.random.Generator,
        frozen: bool = False,
    ):
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []

        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == layers - 1
            bound = np.sqrt(1.0 / fan_in) if last else np.sqrt(6.0 / fan_in)
            self.weights.append(
                store.add(f"{prefix}.{i}.weight", rng.uniform(-bound, bound, (fan_in, fan_out)), frozen)
            )
            self.biases.append(store.add(f"{prefix}.{i}.bias", np.zeros(fan_out), frozen))

    def __call__(self, x: Tensor) -> Tensor:
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            x = dc.linear(x, weight, bias)
            if i < len(self.weights) - 1:
                x = dc.relu(x)
        return x


class FrozenDecoder:
    """Coarse-level (position) and fine-level (direction) feature extractors.

    Weights are registered frozen, so optimizer steps never touch them.
    """

    def __init__(
        self,
        store: ParamStore,
        position_dim: int,
        direction_dim: int,
        hidden: int = 32,
        features: int = 32,
        layers: int = 3,
        rng: Optional[np.random.Generator] = None,
        prefix: str = "decoder",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.prefix = prefix
        self.features = features
        self.coarse = MLP(store, f"{prefix}.coarse", position_dim, hidden, features, layers, rng, frozen=True)
        self.fine = MLP(store, f"{prefix}.fine", direction_dim, hidden, features, layers, rng, frozen=True)

    def position(self, x_enc: Tensor) -> Tensor:
        return self.coarse(x_enc)

    def direction(self, d_enc: Tensor) -> Tensor:
        return self.fine(d_enc)


@dataclass
class FieldOutput:
    """Per-sample field values for R rays of N samples.

    sigma is (R, N); colors are (R, N, 3) or (R, 1, 3) when constant along
    the ray; y is (R, N, 1). Variants without a color split leave c_mid,
    c_coarse and y as None.
    """

    sigma: Tensor
    c_fine: Tensor
    c_mid: Optional[Tensor] = None
    c_coarse: Optional[Tensor] = None
    y: Optional[Tensor] = None
    x_factor: Optional[Tensor] = None

    def channel(self, name: str) -> Tensor:
        value = getattr(self, f"c_{name}", None)
        if value is None:
            raise FieldError(f"Channel '{name}' is not produced by this field")
        return value


@dataclass
class SpatialOutput:
    sigma: Tensor
    c_coarse: Optional[Tensor]
    y: Optional[Tensor]
    geo: Tensor


def joint_color(y, c_mid, c_coarse):
    """c_fine = y * c_mid + (1 - y) * c_coarse."""
    return y * c_mid + (1.0 - y) * c_coarse


def joint_color_test1(x_factor, y, c_mid, c_coarse):
    """Average of the y-weighted blend and its mirror weighted by x."""
    fine1 = y * c_mid + (1.0 - y) * c_coarse
    fine2 = (1.0 - x_factor) * c_mid + x_factor * c_coarse
    return 0.5 * (fine1 + fine2)


def _as_variant(value: Union[str, Variant]) -> Variant:
    try:
        return Variant(value)
    except ValueError:
        raise FieldError(f"Unknown variant '{value}'; expected one of {', '.join(Variant.names())}") from None


class RadianceField:
    """Spatial and directional MLPs, appearance table and frozen decoders."""

    CHANNELS = ("fine", "mid", "coarse")

    def __init__(self, store: ParamStore, field_config: FieldConfig, n_images: int, prefix: str = "field"):
        self.store = store
        self.config = field_config
        self.variant = _as_variant(field_config.variant)
        self.prefix = prefix
        self.n_images = max(int(n_images), 1)
        self.hash_config = HashEncodingConfig(
            table_log2=field_config.table_log2,
            features_per_entry=field_config.features_per_entry,
            grid_resolution=field_config.grid_resolution,
        )
        self.direction_level = field_config.direction_level

        rng = np.random.default_rng(field_config.init_seed)
        cfg = field_config
        position_dim = self.hash_config.output_dim
        direction_dim = self.direction_level**2
        split_colors = self.variant != Variant.NO_MULTIPERF
        self.spatial_out = (5 if split_colors else 1) + cfg.geo_features

        self.hash_table = store.add(f"{prefix}.hash.table", init_hash_table(self.hash_config, rng))
        self.appearance_table = store.add(
            f"{prefix}.appearance", rng.normal(0.0, 0.01, (self.n_images, cfg.appearance_dim))
        )

        self.decoder: Optional[FrozenDecoder] = None
        self.spatial_head: Optional[MLP] = None
        self.directional_head: Optional[MLP] = None

        if self.variant == Variant.TEST2:
            # Trainable MLPs emit features; frozen decoders and fixed linear heads follow.
            features = cfg.decoder_features
            self.decoder = FrozenDecoder(
                store, features, features, cfg.decoder_hidden, features, cfg.decoder_layers, rng
            )
            self.spatial = MLP(
                store, f"{prefix}.spatial", position_dim, cfg.spatial_hidden, features, cfg.spatial_layers, rng
            )
            dir_in = direction_dim + cfg.appearance_dim + (cfg.geo_features if cfg.mid_uses_spatial_features else 0)
            self.directional = MLP(
                store, f"{prefix}.directional", dir_in, cfg.directional_hidden, features, cfg.directional_layers, rng
            )
            self.spatial_head = MLP(store, f"{prefix}.head.spatial", features, 1, self.spatial_out, 1, rng, frozen=True)
            self.directional_head = MLP(store, f"{prefix}.head.directional", features, 1, 3, 1, rng, frozen=True)
            return

        if self.variant != Variant.NO_PRETRAINED:
            self.decoder = FrozenDecoder(
                store,
                position_dim,
                direction_dim,
                cfg.decoder_hidden,
                cfg.decoder_features,
                cfg.decoder_layers,
                rng,
            )
        decoder_width = cfg.decoder_features if self.decoder is not None else 0

        self.spatial = MLP(
            store,
            f"{prefix}.spatial",
            position_dim + decoder_width,
            cfg.spatial_hidden,
            self.spatial_out,
            cfg.spatial_layers,
            rng,
        )

        uses_geo = cfg.mid_uses_spatial_features or not split_colors
        dir_in = direction_dim + decoder_width + cfg.appearance_dim + (cfg.geo_features if uses_geo else 0)
        dir_out = 4 if self.variant == Variant.TEST1 else 3
        self.directional = MLP(
            store, f"{prefix}.directional", dir_in, cfg.directional_hidden, dir_out, cfg.directional_layers, rng
        )

    @property
    def channels(self) -> tuple[str, ...]:
        return ("fine",) if self.variant == Variant.NO_MULTIPERF else self.CHANNELS

    @property
    def uses_geo(self) -> bool:
        return self.config.mid_uses_spatial_features or self.variant == Variant.NO_MULTIPERF

    def table_names(self) -> list[str]:
        return [self.hash_table_name, f"{self.prefix}.appearance"]

    @property
    def hash_table_name(self) -> str:
        return f"{self.prefix}.hash.table"

    def _const(self, values: np.ndarray) -> Tensor:
        return dc.as_tensor(np.asarray(values, dtype=self.store.dtype))

    # Encodings

    def encode_positions(self, positions: np.ndarray) -> Tensor:
        return hash_encode(contract(positions), self.hash_table, self.hash_config)

    def encode_directions(self, directions: np.ndarray) -> Tensor:
        return self._const(sh_basis(directions, self.direction_level))

    def appearance(self, indices: Optional[np.ndarray], count: int) -> Tensor:
        """Embeddings for the given image indices, or the mean embedding."""
        if indices is None:
            mean = dc.mean(self.appearance_table, axis=0, keepdims=True)
            return dc.broadcast_to(mean, (count, self.config.appearance_dim))
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        bad = indices[(indices < 0) | (indices >= self.n_images)]
        if len(bad):
            raise FieldError(f"Unknown appearance index {int(bad[0])} (have {self.n_images} images)")
        return dc.gather(self.appearance_table, indices)

    # Branches

    def spatial_forward(self, x_enc: Tensor) -> SpatialOutput:
        if self.variant == Variant.TEST2:
            raw = self.spatial_head(self.decoder.position(self.spatial(x_enc)))
        elif self.decoder is not None:
            raw = self.spatial(dc.concat([x_enc, self.decoder.position(x_enc)], axis=-1))
        else:
            raw = self.spatial(x_enc)

        sigma = density_activation(raw[..., 0])
        if self.variant == Variant.NO_MULTIPERF:
            return SpatialOutput(sigma=sigma, c_coarse=None, y=None, geo=raw[..., 1:])
        return SpatialOutput(
            sigma=sigma,
            c_coarse=dc.sigmoid(raw[..., 1:4]),
            y=dc.sigmoid(raw[..., 4:5]),
            geo=raw[..., 5:],
        )

    def directional_forward(self, d_enc: Tensor, a: Tensor, geo: Optional[Tensor] = None) -> Tensor:
        """Raw sigmoid outputs of the directional branch.

        Without geo the inputs are per ray; with geo, d_enc and a are
        broadcast across the samples of each ray.
        """
        if geo is not None:
            lead = geo.shape[:-1]
            d_enc = dc.broadcast_to(d_enc[:, None, :], lead + (d_enc.shape[-1],))
            a = dc.broadcast_to(a[:, None, :], lead + (a.shape[-1],))

        if self.variant == Variant.TEST2:
            parts = [d_enc, a] + ([geo] if geo is not None else [])
            raw = self.directional_head(self.decoder.direction(self.directional(dc.concat(parts, axis=-1))))
            return dc.sigmoid(raw)

        parts = [d_enc]
        if self.decoder is not None:
            parts.append(self.decoder.direction(d_enc))
        parts.append(a)
        if geo is not None:
            parts.append(geo)
        return dc.sigmoid(self.directional(dc.concat(parts, axis=-1)))

    def forward(
        self,
        positions: np.ndarray,
        directions: np.ndarray,
        appearance: Optional[np.ndarray] = None,
    ) -> FieldOutput:
        """Evaluate (R, N, 3) sample positions seen along (R, 3) directions.

        appearance=None uses the mean embedding over training images.
        """
        positions = np.asarray(positions, dtype=np.float64)
        count = positions.shape[0]
        spatial = self.spatial_forward(self.encode_positions(positions))
        d_enc = self.encode_directions(directions)
        a = self.appearance(appearance, count)

        geo = spatial.geo if self.uses_geo else None
        out = self.directional_forward(d_enc, a, geo)
        if geo is None:
            out = out[:, None, :]

        if self.variant == Variant.NO_MULTIPERF:
            return FieldOutput(sigma=spatial.sigma, c_fine=out)

        c_mid = out[..., 0:3] if self.variant == Variant.TEST1 else out
        if self.variant == Variant.TEST1:
            x_factor = out[..., 3:4]
            c_fine = joint_color_test1(x_factor, spatial.y, c_mid, spatial.c_coarse)
            return FieldOutput(spatial.sigma, c_fine, c_mid, spatial.c_coarse, spatial.y, x_factor)

        c_fine = joint_color(spatial.y, c_mid, spatial.c_coarse)
        return FieldOutput(spatial.sigma, c_fine, c_mid, spatial.c_coarse, spatial.y)


def build_variant(field_config: FieldConfig, n_images: int, store: Optional[ParamStore] = None) -> RadianceField:
    """Construct the field for field_config.variant in store (a new float32 store if None)."""
    store = store if store is not None else ParamStore()
    _as_variant(field_config.variant)
    return RadianceField(store, field_config, n_images)


class ProposalDensity:
    """Small hash grid plus a one-hidden-layer MLP emitting density only."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        table_log2: int = 16,
        resolution: int = 64,
        hidden: int = 16,
        rng: Optional[np.random.Generator] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.hash_config = HashEncodingConfig(table_log2=table_log2, features_per_entry=4, grid_resolution=resolution)
        self.table = store.add(f"{prefix}.hash.table", init_hash_table(self.hash_config, rng))
        self.mlp = MLP(store, f"{prefix}.mlp", self.hash_config.output_dim, hidden, 1, 2, rng)

    @property
    def table_name(self) -> str:
        return f"{self.prefix}.hash.table"

    def density(self, positions: np.ndarray) -> Tensor:
        """(R, N, 3) positions -> (R, N) densities."""
        encoded = hash_encode(contract(positions), self.table, self.hash_config)
        return density_activation(self.mlp(encoded)[..., 0])


# Decoder pre-training


@dataclass
class DecoderReport:
    seed: int
    steps: int
    initial_loss: float
    final_loss: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps": self.steps,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        }


def decoder_cache_name(field_config: FieldConfig) -> str:
    cfg = field_config
    return (
        f"decoder-s{cfg.init_seed}-n{cfg.decoder_pretrain_steps}"
        f"-h{cfg.decoder_hidden}-f{cfg.decoder_features}-l{cfg.decoder_layers}"
        f"-r{cfg.grid_resolution}-d{cfg.direction_level}.ckpt"
    )


def _calibration_inputs(dataset, rng: np.random.Generator, pool: int = 4096):
    """Contracted sample positions and ray directions drawn from the training frames."""
    frames = dataset.train_frames()
    if not frames:
        raise FieldError("Calibration scene has no training frames")

    width, height = dataset.resolution
    per_frame = max(1, pool // len(frames))
    origins, directions, near, far = [], [], [], []
    for frame in frames:
        pixels = np.stack([rng.uniform(0, width, per_frame), rng.uniform(0, height, per_frame)], axis=-1)
        bundle = rays_for_pixels(dataset.intrinsics, frame.pose, pixels, 0.1, 20.0)
        origins.append(bundle.origins)
        directions.append(bundle.directions)
        near.append(bundle.t_near)
        far.append(bundle.t_far)

    origins = np.concatenate(origins)
    directions = np.concatenate(directions)
    edges = piecewise_edges(np.concatenate(near), np.concatenate(far), 16, 16, 1.0)
    mids = 0.5 * (edges[:, 1:] + edges[:, :-1])
    positions = origins[:, None, :] + directions[:, None, :] * mids[..., None]
    return contract(positions.reshape(-1, 3)), directions


def pretrain_decoders(
    calibration_scene,
    steps: int,
    field_config: Optional[FieldConfig] = None,
    batch_size: int = 512,
    lr: float = 1e-3,
    dtype=np.float32,
) -> tuple[FrozenDecoder, DecoderReport]:
    """Train both decoders as autoencoders on a calibration scene, then freeze.

    Each decoder maps its encoding through the feature bottleneck and a
    temporary linear head reconstructs the encoding. The decoder lives in its
    own store (decoder.store, names under "decoder."); the heads are
    discarded.
    """
    cfg = field_config if field_config is not None else FieldConfig()
    seed = cfg.init_seed
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=dtype)

    hash_config = HashEncodingConfig(
        table_log2=cfg.table_log2, features_per_entry=cfg.features_per_entry, grid_resolution=cfg.grid_resolution
    )
    direction_dim = cfg.direction_level**2
    decoder = FrozenDecoder(
        store, hash_config.output_dim, direction_dim, cfg.decoder_hidden, cfg.decoder_features, cfg.decoder_layers, rng
    )

    positions, directions = _calibration_inputs(calibration_scene, np.random.default_rng([seed, 0]))
    table = dc.as_tensor(init_hash_table(hash_config, np.random.default_rng([seed, 3])).astype(dtype))

    heads = ParamStore(dtype=dtype)
    head_rng = np.random.default_rng([seed, 4])
    coarse_head = MLP(heads, "head.coarse", cfg.decoder_features, 1, hash_config.output_dim, 1, head_rng)
    fine_head = MLP(heads, "head.fine", cfg.decoder_features, 1, direction_dim, 1, head_rng)

    def reconstruction_loss(batch_rng: np.random.Generator) -> Tensor:
        picked = positions[batch_rng.integers(0, len(positions), batch_size)]
        x_enc = hash_encode(picked, table, hash_config)
        picked = directions[batch_rng.integers(0, len(directions), batch_size)]
        d_enc = dc.as_tensor(sh_basis(picked, cfg.direction_level).astype(dtype))
        return dc.mse(coarse_head(decoder.position(x_enc)), x_enc) + dc.mse(fine_head(decoder.direction(d_enc)), d_enc)

    def fixed_batch_loss() -> float:
        with dc.no_grad():
            return float(reconstruction_loss(np.random.default_rng([seed, 1])).data)

    initial = fixed_batch_loss()

    for param in store.parameters():
        param.frozen = False
    for step in range(steps):
        store.zero_grad()
        heads.zero_grad()
        dc.backward(reconstruction_loss(np.random.default_rng([seed, 2, step])))
        dc.adam_step(store, lr)
        dc.adam_step(heads, lr)

    for param in store.parameters():
        param.frozen = True
        param.m = None
        param.v = None
        param.tensor.grad = None
    store.step = 0

    final = fixed_batch_loss()
    report = DecoderReport(seed=seed, steps=steps, initial_loss=initial, final_loss=final)
    logger.info(f"Decoder pre-training: {steps} steps, reconstruction loss {initial:.6f} -> {final:.6f}")
    return decoder, report


def copy_decoder(source: ParamStore, target: ParamStore, prefix: str = "decoder.") -> int:
    """Copy pre-trained decoder weights into a model store."""
    names = [name for name in source.names(prefix) if name in target]
    target.copy_from(source, prefix)
    return len(names)


def channel_names(channels: Union[str, Sequence[str]]) -> list[str]:
    names = [c.strip() for c in channels.split(",")] if isinstance(channels, str) else list(channels)
    unknown = [c for c in names if c not in RadianceField.CHANNELS]
    if unknown:
        raise FieldError(f"Unknown channel(s) {', '.join(unknown)}; expected fine, mid, coarse")
    return names
