"""
Resource sampling for training runs.

Snapshots CPU and memory usage of the current process (and its children,
for parallel ablations) so the trainer can log them per logging step and
write peak figures into eval.json.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import psutil

logger = logging.getLogger(__name__)


def get_directory_size(path: Path) -> float:
    """Total size of the files under path, in MB; unreadable entries count as zero."""
    total = 0
    try:
        for dirpath, _, filenames in os.walk(path):
            for filename in filenames:
                try:
                    total += os.path.getsize(os.path.join(dirpath, filename))
                except OSError:
                    pass
    except OSError:
        pass
    return total / 1024 / 1024


@dataclass
class ResourceSnapshot:
    cpu_percent: float
    memory_mb: float
    children: int = 0

    def to_dict(self) -> dict:
        return {
            "cpu_percent": round(self.cpu_percent, 1),
            "memory_mb": round(self.memory_mb, 1),
            "children": self.children,
        }


@dataclass
class ResourceSampler:
    """Tracks usage of one process across a run."""

    pid: int = field(default_factory=os.getpid)
    peak_memory_mb: float = 0.0
    peak_cpu_percent: float = 0.0
    samples: int = 0
    started: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        self._proc = psutil.Process(self.pid)
        self._cpu_start = self._cpu_seconds()
        # First cpu_percent call primes the counter and returns 0.
        self._proc.cpu_percent(interval=None)

    def _cpu_seconds(self) -> float:
        times = self._proc.cpu_times()
        return times.user + times.system

    def sample(self) -> ResourceSnapshot:
        """Current CPU and RSS, including child processes."""
        cpu_percent = 0.0
        memory_mb = 0.0
        child_count = 0
        try:
            cpu_percent = self._proc.cpu_percent(interval=None)
            memory_mb = self._proc.memory_info().rss / 1024 / 1024
            try:
                children = self._proc.children(recursive=True)
                child_count = len(children)
                for child in children:
                    memory_mb += child.memory_info().rss / 1024 / 1024
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                pass
        except psutil.NoSuchProcess:
            logger.warning(f"Process {self.pid} no longer exists")
        except psutil.AccessDenied:
            logger.warning(f"Access denied for process {self.pid}")

        self.samples += 1
        self.peak_memory_mb = max(self.peak_memory_mb, memory_mb)
        self.peak_cpu_percent = max(self.peak_cpu_percent, cpu_percent)
        return ResourceSnapshot(cpu_percent=cpu_percent, memory_mb=memory_mb, children=child_count)

    def summary(self) -> dict:
        """Peak usage, CPU time and wall time since construction."""
        self.sample()
        try:
            cpu_seconds = self._cpu_seconds() - self._cpu_start
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            cpu_seconds = 0.0
        return {
            "peak_memory_mb": round(self.peak_memory_mb, 1),
            "peak_cpu_percent": round(self.peak_cpu_percent, 1),
            "cpu_seconds": round(cpu_seconds, 2),
            "wall_seconds": round(time.monotonic() - self.started, 2),
        }
