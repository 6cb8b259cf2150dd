"""Storage layer for run directories and append-only metric records"""
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from src.errors import ConfigError
from src.models import MetricsRecord

logger = logging.getLogger(__name__)


class RecordStorage(ABC):
    """Abstract base class for append-only record backends"""

    def __init__(self, path: Path, flush_every: int = 100):
        self.path = Path(path)
        self.flush_every = flush_every
        self.pending: List[Dict[str, Any]] = []

    def save(self, record: Dict[str, Any]) -> None:
        """Add a record to the pending batch"""
        self.pending.append(record)

        # Flush if batch is full
        if len(self.pending) >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        if not self.pending:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._write(self.pending)
        logger.debug(f"Saved {len(self.pending)} records to {self.path}")
        self.pending = []

    def close(self) -> None:
        self.flush()

    @abstractmethod
    def _write(self, records: List[Dict[str, Any]]) -> None:
        """Append a batch of records to the backing file"""
        pass

    @abstractmethod
    def read(self) -> List[Dict[str, Any]]:
        """All records flushed so far"""
        pass


class JSONLStorage(RecordStorage):
    """One JSON object per line"""

    def _write(self, records: List[Dict[str, Any]]) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with open(self.path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]


class CSVStorage(RecordStorage):
    """CSV backend; the header is written with the first batch"""

    def _write(self, records: List[Dict[str, Any]]) -> None:
        frame = pd.DataFrame(records)
        if self.path.exists():
            frame.to_csv(self.path, mode='a', header=False, index=False, encoding='utf-8')
        else:
            frame.to_csv(self.path, index=False, encoding='utf-8')

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        return pd.read_csv(self.path, encoding='utf-8').to_dict(orient='records')


class MetricsWriter:
    """Appends {phase, step, metric, value, wall_ms} rows; steps never go back within a phase"""

    def __init__(self, storage: RecordStorage):
        self.storage = storage
        self._start = time.perf_counter()
        self._last_step: Dict[str, int] = {}
        self._lock = threading.Lock()

    def log(self, phase: str, step: int, metric: str, value: float) -> MetricsRecord:
        with self._lock:
            last = self._last_step.get(phase)
            if last is not None and step < last:
                raise ValueError(f"metrics step {step} goes back from {last} in phase {phase!r}")
            self._last_step[phase] = step
            record = MetricsRecord(phase=phase, step=int(step), metric=metric, value=float(value),
                                   wall_ms=(time.perf_counter() - self._start) * 1000.0)
            self.storage.save(record.to_dict())
            return record

    def close(self) -> None:
        with self._lock:
            self.storage.close()


class RunDirectory:
    """Layout of one run.

    <root>/config.resolved.json, checkpoints/, datasets/, metrics.jsonl,
    report.json, report.csv, run.log and a .lock file held while a command
    works in the directory.
    """

    LOCK_NAME = ".lock"

    def __init__(self, root: Path, force: bool = False):
        self.root = Path(root)
        self.force = force
        self._locked = False

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def config_path(self) -> Path:
        return self.root / "config.resolved.json"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def report_json(self) -> Path:
        return self.root / "report.json"

    @property
    def report_csv(self) -> Path:
        return self.root / "report.csv"

    @property
    def log_path(self) -> Path:
        return self.root / "run.log"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints_dir / f"{name}.dfbf"

    def dataset(self, name: str) -> Path:
        return self.datasets_dir / f"{name}.dfds"

    def history(self, phase: str) -> Path:
        return self.root / f"{phase}_history.jsonl"

    def open(self) -> "RunDirectory":
        self.root.mkdir(parents=True, exist_ok=True)
        self.checkpoints_dir.mkdir(exist_ok=True)
        self.datasets_dir.mkdir(exist_ok=True)
        lock = self.root / self.LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"run directory {self.root} is locked by another run (remove {lock} if stale)")
        with os.fdopen(fd, 'w') as f:
            f.write(str(os.getpid()))
        self._locked = True
        return self

    def close(self) -> None:
        if self._locked:
            (self.root / self.LOCK_NAME).unlink(missing_ok=True)
            self._locked = False

    def __enter__(self) -> "RunDirectory":
        return self.open()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def claim(self, path: Path) -> Path:
        """Path an output may be written to; existing files need ``force``"""
        path = Path(path)
        if path.exists() and not self.force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, path: Path, payload: Dict[str, Any]) -> Path:
        path = self.claim(path)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path

    def write_table(self, path: Path, rows: List[Dict[str, Any]]) -> Path:
        path = self.claim(path)
        pd.DataFrame(rows).to_csv(path, index=False, encoding='utf-8')
        return path

    def write_records(self, path: Path, records: List[Dict[str, Any]]) -> Path:
        """Replace ``path`` with one JSON line per record"""
        path = self.claim(path)
        path.unlink(missing_ok=True)
        path.touch()
        storage = JSONLStorage(path, flush_every=max(1, len(records)))
        for record in records:
            storage.save(record)
        storage.close()
        return path

    def write_config(self, resolved_json: str) -> Path:
        """Echo the resolved config of the command currently using the directory"""
        path = self.config_path
        if path.exists() and path.read_text(encoding='utf-8') != resolved_json:
            logger.info(f"Replacing {path.name}: this command resolved a different config")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(resolved_json, encoding='utf-8')
        return path

    def metrics_writer(self, flush_every: int = 100, backend: str = "jsonl", fresh: bool = False) -> MetricsWriter:
        """Writer appending to the run's metrics file.

        ``fresh`` starts a new file; replacing an existing one needs ``force``.
        """
        if backend == "jsonl":
            path = self.metrics_path
            storage: RecordStorage = JSONLStorage(path, flush_every)
        elif backend == "csv":
            path = self.metrics_path.with_suffix(".csv")
            storage = CSVStorage(path, flush_every)
        else:
            raise ConfigError(f"unknown metrics backend {backend!r}")
        if fresh:
            self.claim(path).unlink(missing_ok=True)
        return MetricsWriter(storage)


def read_metrics(path: Path) -> Optional[pd.DataFrame]:
    """Metrics file as a DataFrame, or None when it does not exist"""
    path = Path(path)
    if not path.exists():
        return None
    storage = CSVStorage(path) if path.suffix == ".csv" else JSONLStorage(path)
    return pd.DataFrame(storage.read())
