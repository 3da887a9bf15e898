"""
Database models for ablation run history.

Uses Peewee ORM with SQLite. Each (variant, seed) pair of an ablation gets
one row with its status, run directory, metrics and timing.
"""

import json
from datetime import datetime
from enum import Enum
from pathlib import Path

from peewee import (
    AutoField,
    CharField,
    DatabaseProxy,
    DateTimeField,
    FloatField,
    IntegerField,
    Model,
    SqliteDatabase,
    TextField,
)

database = DatabaseProxy()


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


def initialize_db(db_path: Path):
    """Open the run-history database at db_path and create the runs table."""
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    db = SqliteDatabase(
        str(db_path),
        pragmas={
            "journal_mode": "wal",
            "cache_size": -16 * 1000,
            "busy_timeout": 5000,
        },
    )
    database.initialize(db)
    database.create_tables([AblationRun], safe=True)
    return db


class BaseModel(Model):
    """Binds models to the run-history database."""

    class Meta:
        database = database


class AblationRun(BaseModel):
    """One trained (variant, seed) configuration."""

    id = AutoField()
    variant = CharField(index=True)
    seed = IntegerField()
    status = CharField(default=RunStatus.PENDING.value)
    run_dir = CharField(null=True)
    metrics = TextField(null=True)  # JSON dict of psnr_*/ssim_* values
    error = TextField(null=True)
    started_at = DateTimeField(null=True)
    finished_at = DateTimeField(null=True)
    duration_seconds = FloatField(null=True)
    created_at = DateTimeField(default=datetime.now)

    class Meta:
        table_name = "ablation_runs"
        indexes = ((("variant", "seed"), True),)

    def get_metrics(self) -> dict[str, float]:
        if not self.metrics:
            return {}
        try:
            return json.loads(self.metrics)
        except (json.JSONDecodeError, TypeError):
            return {}

    def set_metrics(self, values: dict[str, float]):
        self.metrics = json.dumps(values, sort_keys=True)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "variant": self.variant,
            "seed": self.seed,
            "status": self.status,
            "run_dir": self.run_dir,
            "metrics": self.get_metrics(),
            "error": self.error,
            "started_at": self.started_at.isoformat() if self.started_at else None,
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "duration_seconds": self.duration_seconds,
        }
