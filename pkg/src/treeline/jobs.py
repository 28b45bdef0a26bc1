"""Background job scheduling for plan, execute, and export operations.

FIFO per project: a project never has two jobs running at once, so its event
log stays serialized no matter how many worker threads exist. Parallelism is
configurable across projects (default 1 worker). Terminal job records are
stable; polling never mutates anything.
"""

from __future__ import annotations

import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import errors

QUEUED = "queued"
RUNNING = "running"
DONE = "done"
FAILED = "failed"
CANCELLED = "cancelled"

TERMINAL_STATES = (DONE, FAILED, CANCELLED)


@dataclass
class Job:
    job_id: str
    project_id: str
    kind: str  # "plan" | "execute" | "export"
    node_id: Optional[str]
    payload: dict[str, Any] = field(default_factory=dict)
    state: str = QUEUED
    progress: float = 0.0
    created_at: float = field(default_factory=time.time)
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    error: Optional[dict] = None
    result: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "project_id": self.project_id,
            "kind": self.kind,
            "node_id": self.node_id,
            "state": self.state,
            "progress": self.progress,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "error": self.error,
            "result": dict(self.result),
        }


class JobQueue:
    """Thread-pool scheduler with per-project serialization.

    ``runner(job)`` does the actual work and returns the job result dict; it
    may raise TreelineError for a typed failure. ``on_cancel(job)`` runs when
    a still-queued job is withdrawn.
    """

    def __init__(self, runner: Callable[[Job], dict],
                 on_cancel: Optional[Callable[[Job], None]] = None,
                 workers: int = 1):
        self._runner = runner
        self._on_cancel = on_cancel
        self._jobs: dict[str, Job] = {}
        self._pending: dict[str, deque[Job]] = {}
        self._busy_projects: set[str] = set()
        self._cv = threading.Condition()
        self._done_events: dict[str, threading.Event] = {}
        self._stop = False
        self._threads = [
            threading.Thread(target=self._worker, name=f"treeline-worker-{i}", daemon=True)
            for i in range(max(1, workers))
        ]
        for t in self._threads:
            t.start()

    # -- submission and queries -------------------------------------------------

    def submit(self, project_id: str, kind: str, node_id: Optional[str],
               payload: dict | None = None) -> Job:
        job = Job(job_id=uuid.uuid4().hex, project_id=project_id, kind=kind,
                  node_id=node_id, payload=dict(payload or {}))
        with self._cv:
            self._jobs[job.job_id] = job
            self._pending.setdefault(project_id, deque()).append(job)
            self._done_events[job.job_id] = threading.Event()
            self._cv.notify_all()
        return job

    def poll(self, job_id: str) -> Job:
        with self._cv:
            job = self._jobs.get(job_id)
            if job is None:
                raise errors.UnknownJob(f"no job {job_id}")
            return job

    def active_for_node(self, node_id: str) -> Optional[Job]:
        with self._cv:
            for job in self._jobs.values():
                if job.node_id == node_id and job.state not in TERMINAL_STATES:
                    return job
        return None

    def cancel(self, job_id: str) -> Job:
        """Withdraw a still-queued job; running jobs are not interruptible."""
        with self._cv:
            job = self._jobs.get(job_id)
            if job is None:
                raise errors.UnknownJob(f"no job {job_id}")
            if job.state != QUEUED:
                raise errors.JobNotCancellable(f"job {job_id} is {job.state}")
            self._pending[job.project_id].remove(job)
            job.state = CANCELLED
            job.finished_at = time.time()
            self._done_events[job.job_id].set()
        if self._on_cancel:
            self._on_cancel(job)
        return job

    def wait(self, job_id: str, timeout: Optional[float] = None) -> Job:
        with self._cv:
            event = self._done_events.get(job_id)
            if event is None:
                raise errors.UnknownJob(f"no job {job_id}")
        if not event.wait(timeout):
            raise errors.StorageFailure(f"timed out waiting for job {job_id}")
        return self.poll(job_id)

    def shutdown(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=5)

    # -- worker loop ------------------------------------------------------------

    def _take(self) -> Optional[Job]:
        with self._cv:
            while not self._stop:
                for project_id, queue in self._pending.items():
                    if queue and project_id not in self._busy_projects:
                        job = queue.popleft()
                        self._busy_projects.add(project_id)
                        job.state = RUNNING
                        job.started_at = time.time()
                        return job
                self._cv.wait(timeout=0.2)
            return None

    def _worker(self) -> None:
        while True:
            job = self._take()
            if job is None:
                return
            try:
                result = self._runner(job)
                with self._cv:
                    job.result = result or {}
                    job.state = DONE
                    job.progress = 1.0
            except errors.TreelineError as exc:
                with self._cv:
                    job.error = exc.to_envelope()
                    job.state = FAILED
            except Exception as exc:  # defensive: never kill the worker
                with self._cv:
                    job.error = {"code": "InternalError", "message": str(exc), "details": {}}
                    job.state = FAILED
            finally:
                with self._cv:
                    job.finished_at = time.time()
                    self._busy_projects.discard(job.project_id)
                    self._done_events[job.job_id].set()
                    self._cv.notify_all()
