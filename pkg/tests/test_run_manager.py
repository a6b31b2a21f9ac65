"""
Tests for run directories, PID locks and the run registry.
"""
import json
import multiprocessing
import os
import subprocess
import sys

import pytest

from conftest import make_tiny_config
from database_manager import DatabaseManager, registry_url
from database_repositories import MetricRepository, RunRepository
from enums import RunStatus
from errors import RunLockedError
from run_manager import RunDirectory, RunManifest, RunTracker, file_hash, list_runs


@pytest.fixture
def db(tmp_path):
    manager = DatabaseManager(registry_url(tmp_path))
    manager.create_tables()
    return manager


def test_file_hash_of_file_and_directory(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "a.txt").write_text("alpha")
    (tmp_path / "d" / "b.txt").write_text("beta")
    first = file_hash(tmp_path / "d")
    assert file_hash(tmp_path / "d") == first
    assert file_hash(tmp_path / "d" / "a.txt") != file_hash(tmp_path / "d" / "b.txt")
    (tmp_path / "d" / "b.txt").write_text("gamma")
    assert file_hash(tmp_path / "d") != first


def test_lock_acquire_and_release(tmp_path):
    run = RunDirectory(tmp_path / "run")
    with run:
        assert run.lock_file.read_text() == str(os.getpid())
        assert not run.is_locked()
    assert not run.lock_file.exists()


@pytest.fixture
def live_child():
    child = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(60)"])
    yield child.pid
    child.kill()
    child.wait()


def test_live_lock_blocks(tmp_path, live_child):
    run = RunDirectory(tmp_path / "run")
    run.path.mkdir()
    run.lock_file.write_text(str(live_child))
    assert run.is_locked()
    with pytest.raises(RunLockedError, match=str(live_child)):
        run.acquire()
    assert run.lock_file.read_text() == str(live_child)
    assert sorted(p.name for p in run.path.iterdir()) == ["run.lock"]


def test_stale_lock_is_reclaimed(tmp_path):
    child = subprocess.Popen([sys.executable, "-c", "pass"])
    child.wait()
    run = RunDirectory(tmp_path / "run")
    run.path.mkdir()
    run.lock_file.write_text(str(child.pid))
    assert not run.is_locked()
    run.acquire()
    assert run.lock_file.read_text() == str(os.getpid())
    run.release()
    assert list(run.path.iterdir()) == []


def test_reclaim_keeps_a_lock_taken_meanwhile(tmp_path, live_child):
    run = RunDirectory(tmp_path / "run")
    run.path.mkdir()
    run.lock_file.write_text(str(live_child))
    # The dead holder's lock was replaced before we moved it aside.
    with pytest.raises(RunLockedError, match=str(live_child)):
        run._reclaim_stale(dead_pid=999999)
    assert run.lock_file.read_text() == str(live_child)


def _contend(path, barrier, release, results):
    run = RunDirectory(path)
    barrier.wait()
    try:
        run.acquire()
    except RunLockedError:
        results.put("locked")
        return
    results.put("held")
    release.wait(30)
    run.release()


@pytest.mark.skipif("fork" not in multiprocessing.get_all_start_methods(), reason="needs fork")
def test_concurrent_acquire_has_one_winner(tmp_path):
    ctx = multiprocessing.get_context("fork")
    workers = 4
    barrier, release, results = ctx.Barrier(workers), ctx.Event(), ctx.Queue()
    procs = [
        ctx.Process(target=_contend, args=(tmp_path / "run", barrier, release, results))
        for _ in range(workers)
    ]
    for p in procs:
        p.start()
    try:
        outcomes = sorted(results.get(timeout=30) for _ in procs)
    finally:
        release.set()
        for p in procs:
            p.join(30)
    assert outcomes == ["held"] + ["locked"] * (workers - 1)
    assert not (tmp_path / "run" / "run.lock").exists()


def test_garbage_lock_is_ignored(tmp_path):
    run = RunDirectory(tmp_path / "run")
    run.path.mkdir()
    run.lock_file.write_text("not a pid")
    run.acquire()
    run.release()
    assert not run.lock_file.exists()


def test_manifest_round_trip(tmp_path):
    run = RunDirectory(tmp_path / "run")
    run.path.mkdir()
    assert run.read_manifest() is None
    manifest = RunManifest(kind="train", stage="stage1", config_hash="abc", metrics={"loss": 0.5})
    run.write_manifest(manifest)
    assert run.read_manifest() == manifest


def test_run_repository_lifecycle(db):
    runs = RunRepository(db)
    run = runs.start_run("train", "/tmp/x", "hash", seed=3, stage="stage1")
    assert run.id is not None and run.status == RunStatus.RUNNING.value
    done = runs.finish_run(run.id, RunStatus.COMPLETED)
    assert done.status == "completed" and done.finished_at is not None
    with pytest.raises(ValueError, match="already completed"):
        runs.finish_run(run.id, RunStatus.ABORTED)
    with pytest.raises(ValueError, match="not found"):
        runs.finish_run(12345, RunStatus.ABORTED)


def test_recent_runs_filter_and_order(db):
    runs = RunRepository(db)
    for kind in ("train", "generate", "train"):
        runs.start_run(kind, "/tmp", "h")
    recent = runs.get_recent(limit=2)
    assert [r.id for r in recent] == [3, 2]
    assert [r.kind for r in runs.get_recent(kind="train")] == ["train", "train"]


def test_metric_repository(db):
    run = RunRepository(db).start_run("ablate", "/tmp", "h")
    metrics = MetricRepository(db)
    stored = metrics.record(run.id, {"hkv": 2.0, "hmv": 1.0}, variant="full")
    assert [m.name for m in stored] == ["hkv", "hmv"]
    assert [m.value for m in metrics.for_run(run.id)] == [2.0, 1.0]
    with pytest.raises(ValueError):
        metrics.record(999, {"x": 1.0})


def test_tracker_records_completion(tmp_path):
    config = make_tiny_config()
    inputs = tmp_path / "input.bin"
    inputs.write_bytes(b"data")
    with RunTracker(tmp_path, tmp_path / "train-stage1", "train", config, stage="stage1",
                    inputs={"data": inputs}) as tracker:
        (tracker.path / "out.txt").write_text("result")
        tracker.add_metrics({"loss": 0.25})
        tracker.add_outputs(["out.txt", "missing.txt"])
        tracker.note("hello")
        assert tracker.directory.lock_file.exists()

    manifest = json.loads((tmp_path / "train-stage1" / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config_hash"] == config.config_hash()
    assert manifest["inputs"]["data"] == file_hash(inputs)
    assert set(manifest["outputs"]) == {"out.txt"}
    assert manifest["metrics"] == {"loss": 0.25}
    assert manifest["notes"] == ["hello"]
    assert not (tmp_path / "train-stage1" / "run.lock").exists()

    (run, metrics), = list_runs(tmp_path)
    assert run.status == "completed" and run.stage == "stage1"
    assert metrics == {"loss": 0.25}


def test_tracker_marks_failures_aborted(tmp_path):
    config = make_tiny_config()
    with pytest.raises(RuntimeError, match="boom"):
        with RunTracker(tmp_path, tmp_path / "gen", "generate", config) as tracker:
            tracker.add_metrics({"hkv": 1.0}, variant="base")
            raise RuntimeError("boom")
    manifest = json.loads((tmp_path / "gen" / "manifest.json").read_text())
    assert manifest["status"] == "aborted"
    assert manifest["notes"][-1] == "RuntimeError: boom"
    assert manifest["metrics"] == {"base.hkv": 1.0}
    (run, metrics), = list_runs(tmp_path, kind="generate")
    assert run.status == "aborted" and run.message == "RuntimeError: boom"
    assert metrics == {"base.hkv": 1.0}
