"""
Configuration for enerf.

Process-level settings load from environment variables (and a .env file)
with sensible defaults. Run-level settings live in an INI-style file with
sections [scene], [sampling], [field], [loss], [train] and [io], validated by
pydantic models that reject unknown keys. Persistent data is stored in
~/.enerf/ unless ENERF_HOME says otherwise.
"""

import configparser
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()


def _env_flag(name: str, default: str) -> bool:
    return os.environ.get(name, default).lower() in ("1", "true", "yes", "on")


@dataclass
class Config:
    """Process-wide enerf configuration."""

    # Paths
    data_dir: Path = Path(os.environ.get("ENERF_HOME", str(Path.home() / ".enerf")))
    log_file: Path = None
    decoders_dir: Path = None

    # Logging
    log_level: str = os.environ.get("ENERF_LOG_LEVEL", "INFO")
    log_max_bytes: int = int(os.environ.get("LOG_MAX_BYTES", str(10 * 1024 * 1024)))  # 10MB
    log_backup_count: int = int(os.environ.get("LOG_BACKUP_COUNT", "5"))

    # Numerics
    validate_tensors: bool = _env_flag("ENERF_VALIDATE_TENSORS", "false")
    strict_colors: bool = _env_flag("ENERF_STRICT_COLORS", "false")

    # Training
    progress: bool = _env_flag("ENERF_PROGRESS", "true")

    def __post_init__(self):
        """Initialize derived paths."""
        self.data_dir = Path(self.data_dir).expanduser()
        self.log_file = self.data_dir / "enerf.log"
        self.decoders_dir = self.data_dir / "decoders"

    def ensure_dirs(self):
        """Create the data directories."""
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.decoders_dir.mkdir(parents=True, exist_ok=True)


config = Config()


class Variant(str, Enum):
    """Field variants for ablation."""

    ENHANCE = "enhance"
    NO_MULTIPERF = "no_multiperf"
    NO_PRETRAINED = "no_pretrained"
    TEST1 = "test1"
    TEST2 = "test2"

    @classmethod
    def names(cls) -> list[str]:
        return [v.value for v in cls]


class Rig(str, Enum):
    """Camera paths for synthetic captures."""

    ORBIT = "orbit"
    FORWARD = "forward"
    SPIRAL = "spiral"


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SceneConfig(_Section):
    name: str = Field("lambertian", description="Preset scene name or path to a scene JSON file")
    views: int = Field(30, ge=1, description="Number of training views")
    eval_views: int = Field(5, ge=1, description="Number of held-out views")
    width: int = Field(64, ge=1, description="Image width in pixels")
    height: int = Field(64, ge=1, description="Image height in pixels")
    rig: Rig = Field(Rig.ORBIT, description="Camera path: orbit, forward or spiral")
    seed: int = Field(0, description="Seed for the camera path and exposure draws")
    exposure_jitter: float = Field(0.0, ge=0.0, le=0.5, description="Per-image exposure spread")
    quadrature: int = Field(4096, ge=16, description="Quadrature intervals per ray for ground truth")


class SamplingConfig(_Section):
    t_near: float = Field(0.1, gt=0.0, description="Ray start distance")
    t_split: float = Field(1.0, gt=0.0, description="End of the uniform segment")
    t_far: float = Field(20.0, gt=0.0, description="Ray end distance")
    n_uniform: int = Field(32, ge=1, description="Uniform intervals on [t_near, t_split]")
    n_log: int = Field(32, ge=1, description="Geometric intervals on [t_split, t_far]")
    proposal_samples: list[int] = Field([96, 48], description="Resample counts for later proposal rounds")
    nerf_samples: int = Field(32, ge=1, description="Intervals evaluated by the main field")
    histogram_padding: float = Field(1e-2, ge=0.0, description="Uniform mass added per bin before resampling")
    proposal_table_log2: int = Field(16, ge=4, le=24, description="log2 of the proposal hash table size")
    proposal_resolution: int = Field(64, ge=2, description="Proposal grid resolution per axis")
    proposal_hidden: int = Field(16, ge=1, description="Hidden units of the proposal density MLP")

    _split_lists = field_validator("proposal_samples", mode="before")(_split_csv)

    @field_validator("proposal_samples")
    @classmethod
    def _positive_counts(cls, value: list[int]) -> list[int]:
        if any(n < 1 for n in value):
            raise ValueError("proposal sample counts must be >= 1")
        return value

    @model_validator(mode="after")
    def _ordered_span(self):
        if not self.t_near < self.t_split < self.t_far:
            raise ValueError(
                f"need t_near < t_split < t_far, got {self.t_near}, {self.t_split}, {self.t_far}"
            )
        return self


class FieldConfig(_Section):
    variant: Variant = Field(Variant.ENHANCE, description="Field variant")
    spatial_layers: int = Field(3, ge=1, description="Linear layers in the spatial MLP")
    spatial_hidden: int = Field(64, ge=1, description="Hidden units in the spatial MLP")
    directional_layers: int = Field(2, ge=1, description="Linear layers in the directional MLP")
    directional_hidden: int = Field(32, ge=1, description="Hidden units in the directional MLP")
    appearance_dim: int = Field(16, ge=1, description="Per-image appearance embedding size")
    geo_features: int = Field(16, ge=1, description="Spatial features exposed to the mid branch")
    mid_uses_spatial_features: bool = Field(False, description="Feed spatial features into the mid branch")
    table_log2: int = Field(19, ge=4, le=24, description="log2 of the hash table size")
    features_per_entry: int = Field(4, ge=1, description="Features stored per hash entry")
    grid_resolution: int = Field(128, ge=2, description="Hash grid resolution per axis")
    direction_level: int = Field(4, ge=1, le=4, description="SH level of the direction encoding")
    decoder_hidden: int = Field(32, ge=1, description="Hidden units of each frozen decoder MLP")
    decoder_features: int = Field(32, ge=1, description="Output features of each frozen decoder MLP")
    decoder_layers: int = Field(3, ge=1, description="Linear layers of each frozen decoder MLP")
    decoder_pretrain_steps: int = Field(300, ge=0, description="Decoder pre-training iterations")
    decoder_checkpoint: Optional[Path] = Field(None, description="Load frozen decoders from this file")
    init_seed: int = Field(0, description="Seed for parameter initialization")


class LossConfig(_Section):
    sh_fine: int = Field(4, ge=1, le=4, description="SH level applied to the fine color")
    sh_mid: int = Field(3, ge=1, le=4, description="SH level applied to the mid color")
    sh_coarse: int = Field(2, ge=1, le=4, description="SH level applied to the coarse color")
    prop_weight: float = Field(1.0, ge=0.0, description="Multiplier on the proposal loss")
    strict_colors: bool = Field(config.strict_colors, description="Raise on out-of-range colors")


class TrainConfig(_Section):
    iterations: int = Field(2000, ge=0, description="Optimization steps")
    rays_per_batch: int = Field(1024, ge=1, description="Rays per step")
    lr_tables: float = Field(1e-2, ge=0.0, description="Learning rate for hash and embedding tables")
    lr_mlp: float = Field(1e-3, ge=0.0, description="Learning rate for MLP weights")
    beta1: float = Field(0.9, ge=0.0, lt=1.0, description="Adam first-moment decay")
    beta2: float = Field(0.999, ge=0.0, lt=1.0, description="Adam second-moment decay")
    eps: float = Field(1e-8, gt=0.0, description="Adam stabilizer")
    warmup_steps: int = Field(100, ge=0, description="Learning-rate warmup length")
    warmup_factor: float = Field(0.1, gt=0.0, le=1.0, description="Starting fraction of the learning rate")
    seed: int = Field(0, description="Seed for ray batches and jitter")
    log_every: int = Field(50, ge=1, description="Steps between loss log rows")
    eval_every: int = Field(0, ge=0, description="Steps between held-out evaluations (0 = end only)")
    checkpoint_every: int = Field(500, ge=0, description="Steps between checkpoints (0 = end only)")
    chunk: int = Field(4096, ge=1, description="Rays per chunk when rendering full images")


class IoConfig(_Section):
    data: Optional[Path] = Field(None, description="Dataset directory")
    out: Optional[Path] = Field(None, description="Run directory")
    write_pfm: bool = Field(True, description="Also write 32-bit PFM renders")
    render_eval: bool = Field(True, description="Write eval renders into renders/")


class RunConfig(BaseModel):
    """Complete run configuration."""

    model_config = ConfigDict(extra="forbid")

    scene: SceneConfig = Field(default_factory=SceneConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    io: IoConfig = Field(default_factory=IoConfig)

    def with_overrides(self, overrides: dict[str, dict[str, Any]]) -> "RunConfig":
        """Return a copy with per-section overrides applied and validated."""
        data = self.model_dump()
        for section, values in overrides.items():
            if section not in data:
                raise ValueError(f"Unknown config section [{section}]")
            data[section].update({k: v for k, v in values.items() if v is not None})
        return RunConfig.model_validate(data)


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """Load a run config from an INI file (defaults when path is None)."""
    if path is None:
        return RunConfig()

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path)

    data: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        data[section] = dict(parser.items(section))

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ValueError(f"Invalid config {path}: {e}") from e


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def dump_run_config(run_config: RunConfig) -> str:
    """Serialize the effective config in the same INI format it loads from."""
    lines = ["# Effective enerf run configuration", ""]
    for section, values in run_config.model_dump().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config_echo(run_config: RunConfig, run_dir: Path) -> Path:
    """Write config.echo into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_path = run_dir / "config.echo"
    echo_path.write_text(dump_run_config(run_config))
    return echo_path
