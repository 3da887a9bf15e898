"""
Ablation matrix: train every (variant, seed) pair on one dataset and tabulate
held-out PSNR/SSIM per color channel.

Runs go to <out>/<variant>_seed<seed>/ and are recorded in <out>/runs.db.
The combined table is written as ablation.csv and as aligned text
(ablation.txt).
"""

import csv
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from jinja2 import Environment, PackageLoader

from .config import RunConfig, Variant, write_config_echo
from .exceptions import EnerfError
from .models import AblationRun, RunStatus, initialize_db
from .monitor import get_directory_size
from .scenegen import load_dataset
from .trainer import evaluate, train, write_eval_report, write_resource_report

logger = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "variant",
    "seed",
    "psnr_fine",
    "ssim_fine",
    "psnr_mid",
    "ssim_mid",
    "psnr_coarse",
    "ssim_coarse",
)
METRIC_COLUMNS = TABLE_COLUMNS[2:]


@dataclass
class AblationJob:
    variant: str
    seed: int
    data_dir: Path
    run_dir: Path
    run_config: dict

    @property
    def label(self) -> str:
        return f"{self.variant}/seed{self.seed}"


def job_config(base: RunConfig, variant: str, seed: int, data_dir: Path, run_dir: Path) -> RunConfig:
    """The base config with variant, seeds and paths filled in."""
    return base.with_overrides(
        {
            "field": {"variant": variant, "init_seed": seed},
            "train": {"seed": seed},
            "io": {"data": data_dir, "out": run_dir},
        }
    )


def run_job(job: AblationJob) -> dict:
    """Train and evaluate one configuration; module level so worker processes can import it."""
    run_config = RunConfig.model_validate(job.run_config)
    dataset = load_dataset(job.data_dir)
    write_config_echo(run_config, job.run_dir)
    result = train(dataset, run_config, job.run_dir)
    render_dir = job.run_dir / "renders" if run_config.io.render_eval else None
    report = evaluate(result.model, dataset, run_config.train.chunk, render_dir, run_config.io.write_pfm)
    write_eval_report(report, job.run_dir, {"variant": job.variant, "step": result.step})
    write_resource_report(job.run_dir, result.resources, result.model.decoder_report)
    return report.means()


def _format_metric(value: Optional[float], column: str) -> str:
    if value is None or not np.isfinite(value):
        return ""
    return f"{value:.2f}" if column.startswith("psnr") else f"{value:.4f}"


class AblationRunner:
    """Trains the (variant, seed) matrix and writes the combined tables."""

    def __init__(
        self,
        data_dir: Path,
        out_dir: Path,
        variants: Sequence[str],
        seeds: Sequence[int],
        run_config: Optional[RunConfig] = None,
        workers: int = 1,
    ):
        self.data_dir = Path(data_dir)
        self.out_dir = Path(out_dir)
        self.variants = [Variant(v).value for v in variants]
        self.seeds = [int(s) for s in seeds]
        self.run_config = run_config or RunConfig()
        self.workers = max(1, int(workers))

    def jobs(self) -> list[AblationJob]:
        jobs = []
        for variant in self.variants:
            for seed in self.seeds:
                run_dir = self.out_dir / f"{variant}_seed{seed}"
                cfg = job_config(self.run_config, variant, seed, self.data_dir, run_dir)
                jobs.append(AblationJob(variant, seed, self.data_dir, run_dir, cfg.model_dump(mode="json")))
        return jobs

    def _record(self, job: AblationJob) -> AblationRun:
        run, _ = AblationRun.get_or_create(variant=job.variant, seed=job.seed)
        run.status = RunStatus.RUNNING.value
        run.run_dir = str(job.run_dir)
        run.metrics = None
        run.error = None
        run.started_at = datetime.now()
        run.finished_at = None
        run.duration_seconds = None
        run.save()
        return run

    def _finish(self, run: AblationRun, metrics: Optional[dict] = None, error: Optional[str] = None):
        run.finished_at = datetime.now()
        run.duration_seconds = (run.finished_at - run.started_at).total_seconds()
        if error is None:
            run.status = RunStatus.COMPLETED.value
            run.set_metrics(metrics or {})
            size = get_directory_size(Path(run.run_dir)) if run.run_dir else 0.0
            logger.info(
                f"Run {run.variant}/seed{run.seed} completed in {run.duration_seconds:.1f}s ({size:.1f} MB written)"
            )
        else:
            run.status = RunStatus.FAILED.value
            run.error = error
            logger.error(f"Run {run.variant}/seed{run.seed} failed: {error}")
        run.save()

    def run(self) -> list[AblationRun]:
        """Execute every job; failures are recorded and do not stop the others."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        initialize_db(self.out_dir / "runs.db")
        jobs = self.jobs()
        records = {job.label: self._record(job) for job in jobs}
        logger.info(f"Ablation: {len(jobs)} runs, {self.workers} worker(s)")

        if self.workers == 1:
            for job in jobs:
                try:
                    metrics = run_job(job)
                except EnerfError as e:
                    self._finish(records[job.label], error=str(e))
                except Exception as e:
                    logger.debug(traceback.format_exc())
                    self._finish(records[job.label], error=f"{type(e).__name__}: {e}")
                else:
                    self._finish(records[job.label], metrics)
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futures = {pool.submit(run_job, job): job for job in jobs}
                for future in as_completed(futures):
                    job = futures[future]
                    try:
                        metrics = future.result()
                    except Exception as e:
                        self._finish(records[job.label], error=f"{type(e).__name__}: {e}")
                    else:
                        self._finish(records[job.label], metrics)

        return [AblationRun.get_by_id(records[job.label].id) for job in jobs]


def table_rows(runs: Sequence[AblationRun]) -> list[dict[str, str]]:
    """Per-run rows in run order, then one median row per variant."""
    rows = []
    by_variant: dict[str, list[dict[str, float]]] = {}
    for run in runs:
        metrics = run.get_metrics() if run.status == RunStatus.COMPLETED.value else {}
        by_variant.setdefault(run.variant, [])
        if run.status == RunStatus.COMPLETED.value:
            by_variant[run.variant].append(metrics)
        rows.append(
            {
                "variant": run.variant,
                "seed": str(run.seed),
                **{column: _format_metric(metrics.get(column), column) for column in METRIC_COLUMNS},
            }
        )

    for variant, completed in by_variant.items():
        row = {"variant": variant, "seed": "median"}
        for column in METRIC_COLUMNS:
            values = [m[column] for m in completed if column in m and np.isfinite(m[column])]
            row[column] = _format_metric(float(np.median(values)), column) if values else ""
        rows.append(row)
    return rows


def write_csv(rows: Sequence[dict[str, str]], path: Path) -> Path:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def render_text_table(rows: Sequence[dict[str, str]], runs: Sequence[AblationRun], data_dir: Path) -> str:
    """Aligned plain-text table from templates/ablation.txt.j2."""
    env = Environment(loader=PackageLoader("enerf", "templates"), trim_blocks=True, lstrip_blocks=True)
    template = env.get_template("ablation.txt.j2")

    cells = [list(TABLE_COLUMNS)] + [[row[c] for c in TABLE_COLUMNS] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(TABLE_COLUMNS))]
    failed = [run.to_dict() for run in runs if run.status == RunStatus.FAILED.value]
    return template.render(
        title="Ablation results",
        data_dir=str(data_dir),
        rows=cells,
        widths=widths,
        failed=failed,
    )


def write_reports(runs: Sequence[AblationRun], out_dir: Path, data_dir: Path) -> tuple[Path, Path]:
    rows = table_rows(runs)
    csv_path = write_csv(rows, Path(out_dir) / "ablation.csv")
    text_path = Path(out_dir) / "ablation.txt"
    text_path.write_text(render_text_table(rows, runs, data_dir))
    return csv_path, text_path
