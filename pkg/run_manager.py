"""
Run directories: PID lock, resolved config, manifest and content hashes.

One process at a time may write to a run directory. The lock file holds
the owner's PID; a lock whose PID is no longer alive is stale and is
reclaimed.
"""
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import psutil
from pydantic import BaseModel, ConfigDict, Field

from config_manager import RunConfig
from database_manager import REGISTRY_FILE, DatabaseManager, registry_url
from database_repositories import MetricRepository, RunRepository
from enums import RunStatus
from errors import RunLockedError

logger = logging.getLogger(__name__)

LOCK_FILE = "run.lock"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"


def file_hash(path: Path) -> str:
    """sha256 of a file, or of a directory's files in sorted relative-path order."""
    path = Path(path)
    digest = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(child.relative_to(path)).encode("utf-8"))
            digest.update(file_hash(child).encode("ascii"))
        return digest.hexdigest()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class RunManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    stage: Optional[str] = None
    seed: int = 0
    config_hash: str
    status: str = RunStatus.RUNNING.value
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    metrics: Dict[str, float] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)
    registry_id: Optional[int] = None


class RunDirectory:
    """Manages one run directory's lock and manifest."""

    def __init__(self, path: Path):
        """
        Initialize a run directory handle (nothing is written yet).

        Args:
            path: Directory for the run's files.
        """
        self.path = Path(path)
        self.lock_file = self.path / LOCK_FILE
        self.manifest_file = self.path / MANIFEST_FILE
        self.config_file = self.path / CONFIG_FILE

    def __enter__(self) -> "RunDirectory":
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()

    def is_locked(self) -> bool:
        """True if a live process other than this one holds the lock."""
        pid = self._read_pid()
        if pid is None or pid == os.getpid():
            return False
        return self._is_process_alive(pid)

    def acquire(self) -> None:
        """
        Take the lock, reclaiming a stale one.

        Raises:
            RunLockedError: If a live process already holds it.
        """
        self.path.mkdir(parents=True, exist_ok=True)
        for attempt in range(2):
            if self._create_lock():
                return
            pid = self._read_pid()
            if pid == os.getpid():
                return
            if pid is not None and self._is_process_alive(pid):
                raise RunLockedError(f"{self.path} is locked by running process {pid}")
            if attempt == 0:
                self._reclaim_stale(pid)
        raise RunLockedError(f"{self.path} was locked by another process while reclaiming a stale lock")

    def release(self) -> None:
        if self._read_pid() == os.getpid():
            try:
                self.lock_file.unlink()
            except OSError:
                pass

    def write_manifest(self, manifest: RunManifest) -> Path:
        with open(self.manifest_file, "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2, sort_keys=True)
        return self.manifest_file

    def read_manifest(self) -> Optional[RunManifest]:
        if not self.manifest_file.exists():
            return None
        with open(self.manifest_file, "r", encoding="utf-8") as f:
            return RunManifest.model_validate(json.load(f))

    def hash_outputs(self, names: List[str]) -> Dict[str, str]:
        """Hashes of the named files/directories inside the run directory that exist."""
        return {name: file_hash(self.path / name) for name in names if (self.path / name).exists()}

    # Private helper methods

    def _create_lock(self) -> bool:
        """Atomically create the lock holding our PID; False if it already exists."""
        staging = self.path / f"{LOCK_FILE}.{os.getpid()}"
        staging.write_text(str(os.getpid()))
        try:
            # link() fails if the target exists, and the lock is never seen without its PID.
            os.link(staging, self.lock_file)
            return True
        except FileExistsError:
            return False
        finally:
            staging.unlink(missing_ok=True)

    def _reclaim_stale(self, dead_pid: Optional[int]) -> None:
        """Move a dead holder's lock aside; put it back if another process got there first."""
        aside = self.path / f"{LOCK_FILE}.stale.{os.getpid()}"
        try:
            os.replace(self.lock_file, aside)
        except FileNotFoundError:
            return
        moved = self._read_pid(aside)
        if moved != dead_pid:
            try:
                os.link(aside, self.lock_file)
            except FileExistsError:
                pass
            aside.unlink(missing_ok=True)
            raise RunLockedError(f"{self.path} is locked by running process {moved}")
        aside.unlink(missing_ok=True)
        if dead_pid is None:
            logger.warning("removed unreadable lock on %s", self.path)
        else:
            logger.warning("reclaiming stale lock on %s (pid %d is gone)", self.path, dead_pid)

    def _read_pid(self, lock_file: Optional[Path] = None) -> Optional[int]:
        lock_file = lock_file or self.lock_file
        if not lock_file.exists():
            return None
        try:
            return int(lock_file.read_text().strip())
        except (ValueError, OSError):
            return None

    @staticmethod
    def _is_process_alive(pid: int) -> bool:
        try:
            return psutil.pid_exists(pid) and psutil.Process(pid).status() != psutil.STATUS_ZOMBIE
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            return False


class RunTracker:
    """
    Pairs a run directory with its registry row.

    Usage:
        with RunTracker(root, run_dir, "train", config, stage="stage1") as tracker:
            ...
            tracker.add_metrics({"loss": 0.1})
    """

    def __init__(self, output_root: Path, run_dir: Path, kind: str, config: RunConfig,
                 stage: Optional[str] = None, inputs: Optional[Dict[str, Path]] = None):
        self.output_root = Path(output_root)
        self.directory = RunDirectory(run_dir)
        self.kind = kind
        self.stage = stage
        self.config = config
        self.inputs = inputs or {}
        self.manifest: Optional[RunManifest] = None
        self.run_id: Optional[int] = None
        self.output_root.mkdir(parents=True, exist_ok=True)
        self.db = DatabaseManager(registry_url(self.output_root))
        self.db.create_tables()
        self.runs = RunRepository(self.db)
        self.metric_repo = MetricRepository(self.db)

    def __enter__(self) -> "RunTracker":
        self.directory.acquire()
        run = self.runs.start_run(
            self.kind, str(self.directory.path), self.config.config_hash(), self.config.seed, self.stage,
        )
        self.run_id = run.id
        self.manifest = RunManifest(
            kind=self.kind,
            stage=self.stage,
            seed=self.config.seed,
            config_hash=self.config.config_hash(),
            inputs={name: file_hash(p) for name, p in self.inputs.items() if Path(p).exists()},
            registry_id=run.id,
        )
        self.directory.write_manifest(self.manifest)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            status = RunStatus.COMPLETED if exc_type is None else RunStatus.ABORTED
            message = None if exc is None else f"{exc_type.__name__}: {exc}"
            self.manifest.status = status.value
            if message:
                self.manifest.notes.append(message)
            self.directory.write_manifest(self.manifest)
            self.runs.finish_run(self.run_id, status, message)
        finally:
            self.directory.release()

    @property
    def path(self) -> Path:
        return self.directory.path

    def add_metrics(self, metrics: Dict[str, float], variant: Optional[str] = None) -> None:
        prefix = f"{variant}." if variant else ""
        self.manifest.metrics.update({prefix + k: float(v) for k, v in metrics.items()})
        self.metric_repo.record(self.run_id, metrics, variant)
        self.directory.write_manifest(self.manifest)

    def add_outputs(self, names: List[str]) -> None:
        self.manifest.outputs.update(self.directory.hash_outputs(names))
        self.directory.write_manifest(self.manifest)

    def note(self, message: str) -> None:
        self.manifest.notes.append(message)
        self.directory.write_manifest(self.manifest)


def list_runs(output_root: Path, limit: int = 20, kind: Optional[str] = None) -> List[Tuple[Any, Dict[str, float]]]:
    """Recent runs with their metrics, newest first; empty when no registry exists yet."""
    if not (Path(output_root) / REGISTRY_FILE).exists():
        return []
    db = DatabaseManager(registry_url(output_root))
    db.create_tables()
    runs = RunRepository(db).get_recent(limit, kind)
    metrics = MetricRepository(db)
    return [(run, {m.name if not m.variant else f"{m.variant}.{m.name}": m.value for m in metrics.for_run(run.id)})
            for run in runs]
