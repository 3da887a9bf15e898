"""
Command-line interface: enerf gen | train | eval | render | ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

import argparse
import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .ablation import AblationRunner, write_reports
from .config import RunConfig, Rig, Variant, config, load_run_config, write_config_echo
from .exceptions import CheckpointError, DatasetError, EnerfError, FieldError
from .field import channel_names
from .models import RunStatus
from .renderer import render_image, write_pfm, write_png
from .scenegen import generate_dataset, load_dataset, load_scene, save_dataset, write_scene
from .trainer import build_model, checkpoint_load, evaluate, train, write_eval_report, write_resource_report

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Errors caused by bad inputs rather than by a failing run
INPUT_ERRORS = (DatasetError, CheckpointError, FieldError)


def setup_logging(log_file: Optional[Path] = None, level: Optional[str] = None):
    """Rotating file log plus console output."""
    if log_file is None:
        config.ensure_dirs()
        log_file = config.log_file
    log_file = Path(log_file)
    log_file.parent.mkdir(parents=True, exist_ok=True)

    formatter = logging.Formatter(LOG_FORMAT)
    file_handler = RotatingFileHandler(
        log_file,
        maxBytes=config.log_max_bytes,
        backupCount=config.log_backup_count,
    )
    file_handler.setFormatter(formatter)
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)

    logging.basicConfig(
        level=getattr(logging, (level or config.log_level).upper(), logging.INFO),
        handlers=[file_handler, console_handler],
        force=True,
    )


# Argument types


def positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'") from None
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def non_negative_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'") from None
    if number < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {number}")
    return number


def resolution(value: str) -> tuple[int, int]:
    parts = value.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected WxH, got '{value}'")
    width, height = (positive_int(p) for p in parts)
    return width, height


def int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'") from None


def variant_list(value: str) -> list[str]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = [v for v in names if v not in Variant.names()]
    if unknown:
        raise argparse.ArgumentTypeError(
            f"unknown variant(s) {', '.join(unknown)}; choose from {', '.join(Variant.names())}"
        )
    return names


# Config-backed flags


def _field_default(section: str, key: str) -> Any:
    model = RunConfig.model_fields[section].annotation
    info = model.model_fields[key]
    value = info.default
    if hasattr(value, "value"):
        value = value.value
    if isinstance(value, list):
        value = ",".join(str(v) for v in value)
    return value, info.description


def config_option(parser: argparse.ArgumentParser, flag: str, section: str, key: str, **kwargs):
    """Flag that overrides [section] key; its help shows the config default."""
    default, description = _field_default(section, key)
    parser.add_argument(
        flag,
        dest=f"{section}.{key}",
        default=argparse.SUPPRESS,
        help=f"{description} (default: {default})",
        **kwargs,
    )


def collect_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    overrides: dict[str, dict[str, Any]] = {}
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            overrides.setdefault(section, {})[key] = value
    return overrides


def effective_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config).with_overrides(collect_overrides(args))


# Commands


def cmd_gen(args: argparse.Namespace) -> int:
    setup_logging()
    run_config = effective_config(args)
    scene_cfg = run_config.scene
    resolution_ = args.res or (scene_cfg.width, scene_cfg.height)
    scene = load_scene(scene_cfg.name)
    out = Path(args.out)

    logger.info(
        f"Generating {scene.name}: {scene_cfg.views} train + {scene_cfg.eval_views} eval views "
        f"at {resolution_[0]}x{resolution_[1]}, rig {scene_cfg.rig.value}, seed {scene_cfg.seed}"
    )
    dataset = generate_dataset(
        scene,
        n_train=scene_cfg.views,
        n_eval=scene_cfg.eval_views,
        resolution=resolution_,
        camera_rig=scene_cfg.rig,
        seed=scene_cfg.seed,
        exposure_jitter=scene_cfg.exposure_jitter,
        n_quadrature=scene_cfg.quadrature,
        t_near=run_config.sampling.t_near,
        t_far=run_config.sampling.t_far,
    )
    save_dataset(dataset, out)
    try:
        write_scene(scene, out / "scene.json")
    except OSError as e:
        raise DatasetError(f"Cannot write scene file into {out}: {e}") from e
    logger.info(f"Wrote dataset to {out}")
    return 0


def _run_dir(run_config: RunConfig) -> Path:
    if run_config.io.out is not None:
        return Path(run_config.io.out)
    return Path("runs") / f"{run_config.field.variant.value}_seed{run_config.train.seed}"


def cmd_train(args: argparse.Namespace) -> int:
    run_config = effective_config(args)
    if run_config.io.data is None:
        print("enerf train: a dataset is required (--data or [io] data)", file=sys.stderr)
        return 2
    run_dir = _run_dir(run_config)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(run_dir / "train.log")

    dataset = load_dataset(run_config.io.data)
    write_config_echo(run_config, run_dir)

    model = None
    start_step = 0
    if args.resume:
        model = build_model(run_config.field, run_config.sampling, dataset.n_images)
        start_step = checkpoint_load(args.resume, model).step
        logger.info(f"Resuming from {args.resume} at step {start_step}")

    result = train(dataset, run_config, run_dir, model=model, start_step=start_step)
    render_dir = run_dir / "renders" if run_config.io.render_eval else None
    report = evaluate(result.model, dataset, run_config.train.chunk, render_dir, run_config.io.write_pfm)

    write_eval_report(report, run_dir, {"variant": result.model.variant.value, "step": result.step})
    write_resource_report(run_dir, result.resources, result.model.decoder_report)

    summary = ", ".join(f"{name} {value:.4f}" for name, value in report.means().items())
    logger.info(f"Finished {result.step} steps; held-out {summary}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "eval.log")
    loaded = checkpoint_load(args.ckpt)
    dataset = load_dataset(args.data)
    render_dir = out / "renders" if args.renders else None
    report = evaluate(loaded.model, dataset, args.chunk, render_dir)
    write_eval_report(report, out, {"variant": loaded.model.variant.value, "step": loaded.step})
    logger.info(f"Wrote {out / 'eval.json'}")
    return 0


def _resolve_poses(specs: Sequence[str], data: Optional[Path]) -> list[tuple[str, np.ndarray]]:
    """A pose is a frame file name from --data or a text file of 16 floats."""
    dataset = load_dataset(data) if data is not None else None
    frames = {f.file_name: f for f in dataset.frames} if dataset else {}
    frames.update({Path(name).stem: f for name, f in list(frames.items())})

    poses = []
    for spec in specs:
        if spec in frames:
            poses.append((Path(frames[spec].file_name).stem, frames[spec].pose))
            continue
        path = Path(spec)
        if not path.exists():
            raise DatasetError(f"Pose '{spec}' is neither a dataset frame nor a pose file")
        try:
            values = np.loadtxt(path, dtype=np.float64).reshape(-1)
        except ValueError as e:
            raise DatasetError(f"Unreadable pose file {path}: {e}") from e
        if values.size != 16:
            raise DatasetError(f"Pose file {path} holds {values.size} values, expected 16")
        poses.append((path.stem, values.reshape(4, 4)))
    return poses


def cmd_render(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "render.log")

    loaded = checkpoint_load(args.ckpt)
    model = loaded.model
    channels = channel_names(args.channels)
    unavailable = [c for c in channels if c not in model.channels]
    if unavailable:
        raise FieldError(
            f"Channel(s) {', '.join(unavailable)} unavailable for variant {model.variant.value}"
        )

    intrinsics = loaded.intrinsics
    size = args.res or loaded.resolution
    if intrinsics is None or size is None:
        raise CheckpointError(f"{args.ckpt} has no camera metadata; it was not saved by a training run")
    if args.res and tuple(args.res) != tuple(loaded.resolution):
        sx = args.res[0] / loaded.resolution[0]
        sy = args.res[1] / loaded.resolution[1]
        intrinsics = type(intrinsics)(intrinsics.fx * sx, intrinsics.fy * sy, intrinsics.cx * sx, intrinsics.cy * sy)

    written = []
    for name, pose in _resolve_poses(args.pose, args.data):
        images = render_image(
            model.field,
            model.sampler,
            intrinsics,
            pose,
            size[0],
            size[1],
            channels=channels,
            chunk=args.chunk,
            background=loaded.background,
        )
        for channel in channels:
            written.append(write_png(out / f"{name}_{channel}.png", images[channel]))
            if args.pfm:
                write_pfm(out / f"{name}_{channel}.pfm", images[channel])
    logger.info(f"Wrote {len(written)} images to {out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out / "ablate.log")
    run_config = effective_config(args)

    runner = AblationRunner(args.data, out, args.variants, args.seeds, run_config, workers=args.workers)
    runs = runner.run()
    csv_path, text_path = write_reports(runs, out, args.data)
    print(text_path.read_text())

    failed = [r for r in runs if r.status == RunStatus.FAILED.value]
    if failed:
        logger.error(f"{len(failed)} of {len(runs)} runs failed; see {csv_path}")
        return 1
    logger.info(f"Wrote {csv_path} and {text_path}")
    return 0


# Parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="enerf",
        description="Differentiable radiance fields with joint (fine), view-dependent (mid) "
        "and view-independent (coarse) color.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # gen
    gen = sub.add_parser("gen", help="Render a synthetic dataset with the oracle", formatter_class=fmt)
    gen.add_argument("--out", required=True, type=Path, help="Dataset directory to write")
    gen.add_argument("--config", type=Path, default=None, help="Run config file ([scene] section is used)")
    config_option(gen, "--scene", "scene", "name", metavar="NAME|FILE")
    config_option(gen, "--views", "scene", "views", type=positive_int)
    config_option(gen, "--eval-views", "scene", "eval_views", type=positive_int)
    gen.add_argument(
        "--res", type=resolution, default=None, metavar="WxH", help="Image size (overrides [scene] width/height)"
    )
    config_option(gen, "--rig", "scene", "rig", choices=[r.value for r in Rig])
    config_option(gen, "--seed", "scene", "seed", type=int)
    config_option(gen, "--exposure-jitter", "scene", "exposure_jitter", type=float)
    config_option(gen, "--quadrature", "scene", "quadrature", type=positive_int)
    gen.set_defaults(handler=cmd_gen)

    # train
    tr = sub.add_parser("train", help="Train one variant and evaluate it on held-out views", formatter_class=fmt)
    tr.add_argument("--config", type=Path, default=None, help="Run config file")
    tr.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue from")
    config_option(tr, "--data", "io", "data", type=Path)
    config_option(tr, "--out", "io", "out", type=Path)
    config_option(tr, "--variant", "field", "variant", choices=Variant.names())
    config_option(tr, "--iterations", "train", "iterations", type=non_negative_int)
    config_option(tr, "--rays-per-batch", "train", "rays_per_batch", type=positive_int)
    config_option(tr, "--seed", "train", "seed", type=int)
    config_option(tr, "--init-seed", "field", "init_seed", type=int)
    config_option(tr, "--lr-tables", "train", "lr_tables", type=float)
    config_option(tr, "--lr-mlp", "train", "lr_mlp", type=float)
    config_option(tr, "--log-every", "train", "log_every", type=positive_int)
    config_option(tr, "--eval-every", "train", "eval_every", type=non_negative_int)
    config_option(tr, "--checkpoint-every", "train", "checkpoint_every", type=non_negative_int)
    config_option(tr, "--decoder-steps", "field", "decoder_pretrain_steps", type=non_negative_int)
    config_option(tr, "--decoder-checkpoint", "field", "decoder_checkpoint", type=Path)
    tr.set_defaults(handler=cmd_train)

    # eval
    ev = sub.add_parser("eval", help="Score a checkpoint on a dataset's eval views", formatter_class=fmt)
    ev.add_argument("--ckpt", required=True, type=Path, help="Checkpoint file")
    ev.add_argument("--data", required=True, type=Path, help="Dataset directory")
    ev.add_argument("--out", required=True, type=Path, help="Directory for eval.json and renders")
    ev.add_argument("--renders", action=argparse.BooleanOptionalAction, default=True, help="Write eval renders")
    ev.add_argument("--chunk", type=positive_int, default=4096, help="Rays per render chunk")
    ev.set_defaults(handler=cmd_eval)

    # render
    rd = sub.add_parser("render", help="Render channels of a checkpoint from given poses", formatter_class=fmt)
    rd.add_argument("--ckpt", required=True, type=Path, help="Checkpoint file")
    rd.add_argument(
        "--pose",
        required=True,
        action="append",
        help="Dataset frame name (needs --data) or a file of 16 pose floats; repeatable",
    )
    rd.add_argument("--data", type=Path, default=None, help="Dataset directory for frame poses")
    rd.add_argument("--channels", default="fine,mid,coarse", help="Comma-separated channels to write")
    rd.add_argument("--out", required=True, type=Path, help="Output directory")
    rd.add_argument("--res", type=resolution, default=None, metavar="WxH", help="Image size (default: training size)")
    rd.add_argument("--pfm", action="store_true", help="Also write 32-bit PFM images")
    rd.add_argument("--chunk", type=positive_int, default=4096, help="Rays per render chunk")
    rd.set_defaults(handler=cmd_render)

    # ablate
    ab = sub.add_parser("ablate", help="Train the variant x seed matrix and tabulate metrics", formatter_class=fmt)
    ab.add_argument("--data", required=True, type=Path, help="Dataset directory")
    ab.add_argument("--out", required=True, type=Path, help="Output directory for runs and tables")
    ab.add_argument("--config", type=Path, default=None, help="Run config file shared by every run")
    ab.add_argument("--variants", type=variant_list, default=Variant.names(), help="Comma-separated variants")
    ab.add_argument("--seeds", type=int_list, default=[0, 1, 2], help="Comma-separated seeds")
    ab.add_argument("--workers", type=positive_int, default=1, help="Parallel training processes")
    config_option(ab, "--iterations", "train", "iterations", type=non_negative_int)
    config_option(ab, "--rays-per-batch", "train", "rays_per_batch", type=positive_int)
    config_option(ab, "--decoder-steps", "field", "decoder_pretrain_steps", type=non_negative_int)
    ab.set_defaults(handler=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except INPUT_ERRORS as e:
        logger.error(str(e))
        print(f"enerf {args.command}: {e}", file=sys.stderr)
        return 2
    except EnerfError as e:
        logger.error(str(e))
        print(f"enerf {args.command}: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as e:
        # Config files and flag values that fail validation
        logger.error(str(e))
        print(f"enerf {args.command}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error(str(e))
        print(f"enerf {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
