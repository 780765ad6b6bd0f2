"""Materialization scheduling, job tracking and retries.

Every job computes its records once, stages them under
``<root>/jobs/<job_id>/staged.jsonl`` and then merges the staged set into each
enabled sink (offline first, then online). Sink status is tracked per sink, so
a retry only re-merges what has not landed yet and always reuses the staged
records with their original ``creation_ts``. A restarted scheduler turns jobs
left ``running`` into ``failed`` so they can be retried from their staging.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import (
    FeatureStoreError,
    InvalidState,
    JobConflict,
    NoSinkEnabled,
    NotFound,
    OverlapWithRunningBackfill,
)
from .intervals import FeatureWindow, IntervalSet
from .offline_store import OfflineStore
from .online_store import OnlineStore
from .records import FeatureRecord, FeatureSetRef, read_json, read_records, write_json, write_records
from .registry import FeatureSetSpec, Registry

log = logging.getLogger(__name__)

ACTIVE = ("queued", "running")
TERMINAL = ("succeeded", "failed", "canceled")
SINK_ORDER = ("offline", "online")


@dataclass
class MaterializationJob:
    job_id: str
    fsv: FeatureSetRef
    window: FeatureWindow
    kind: str
    state: str = "queued"
    sinks: tuple[str, ...] = ()
    sink_status: dict[str, str] = field(default_factory=dict)
    attempt: int = 0
    ttl: Optional[int] = None
    created_at: Optional[int] = None
    finished_at: Optional[int] = None
    run_now: Optional[int] = None
    suspended_by: Optional[str] = None
    error: Optional[str] = None

    @property
    def seq(self) -> int:
        return int(self.job_id.rsplit("-", 1)[1])

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "fsv": {"name": self.fsv[0], "version": self.fsv[1]},
            "window": self.window.to_list(),
            "kind": self.kind,
            "state": self.state,
            "sinks": list(self.sinks),
            "sink_status": dict(self.sink_status),
            "attempt": self.attempt,
            "ttl": self.ttl,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "run_now": self.run_now,
            "suspended_by": self.suspended_by,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MaterializationJob:
        return cls(
            d["job_id"],
            (d["fsv"]["name"], int(d["fsv"]["version"])),
            FeatureWindow(*d["window"]),
            d["kind"],
            d["state"],
            tuple(d["sinks"]),
            dict(d["sink_status"]),
            d["attempt"],
            d.get("ttl"),
            d.get("created_at"),
            d.get("finished_at"),
            d.get("run_now"),
            d.get("suspended_by"),
            d.get("error"),
        )


@dataclass(frozen=True)
class Transition:
    job_id: str
    from_state: Optional[str]
    to_state: str

    def to_dict(self):
        return {"job_id": self.job_id, "from": self.from_state, "to": self.to_state}


Calculate = Callable[[FeatureSetSpec, FeatureWindow, int, str], list[FeatureRecord]]
FaultInjector = Callable[[str, MaterializationJob], None]


class Scheduler:
    def __init__(
        self,
        root: Path,
        registry: Registry,
        offline: OfflineStore,
        online: OnlineStore,
        calculate: Calculate,
        max_attempts: int = 5,
        fault_injector: Optional[FaultInjector] = None,
        auto_retry: bool = True,
    ):
        self.root = Path(root) / "jobs"
        self.registry = registry
        self.offline = offline
        self.online = online
        self.calculate = calculate
        self.max_attempts = max_attempts
        self.fault_injector = fault_injector
        self.auto_retry = auto_retry
        self._coord = threading.RLock()
        self._jobs: dict[str, MaterializationJob] = {}
        self._data_state: dict[FeatureSetRef, IntervalSet] = {}
        self._load()

    # persistence ------------------------------------------------------

    def _job_dir(self, job_id: str) -> Path:
        return self.root / job_id

    def _save(self, job: MaterializationJob) -> None:
        write_json(self._job_dir(job.job_id) / "state.json", job.to_dict())

    def _load(self) -> None:
        if not self.root.exists():
            return
        for d in sorted(self.root.iterdir()):
            state = d / "state.json"
            if not state.exists():
                continue
            job = MaterializationJob.from_dict(read_json(state))
            if job.state == "running":
                # the previous process died mid-run
                job.state = "failed"
                job.error = "interrupted"
                for sink in job.sinks:
                    if job.sink_status.get(sink) != "merged":
                        job.sink_status[sink] = "failed"
                self._save(job)
                log.warning("job %s was interrupted; marked failed", job.job_id)
            self._jobs[job.job_id] = job
            if job.state == "succeeded":
                self._state(job.fsv).add(job.window.start_ts, job.window.end_ts)

    def _state(self, fsv: FeatureSetRef) -> IntervalSet:
        return self._data_state.setdefault(tuple(fsv), IntervalSet())

    def _new_job(self, fs: FeatureSetSpec, window: FeatureWindow, kind: str, now) -> MaterializationJob:
        seq = max((j.seq for j in self._jobs.values()), default=0) + 1
        policy = fs.materialization
        job = MaterializationJob(
            job_id=f"job-{seq:06d}",
            fsv=fs.ref,
            window=window,
            kind=kind,
            sinks=tuple(policy.sinks),
            sink_status={s: "pending" for s in policy.sinks},
            ttl=policy.ttl,
            created_at=now,
        )
        self._jobs[job.job_id] = job
        self._save(job)
        return job

    # queries ----------------------------------------------------------

    def job_status(self, job_id: str) -> MaterializationJob:
        with self._coord:
            if job_id not in self._jobs:
                raise NotFound(f"job {job_id}")
            return replace(self._jobs[job_id], sink_status=dict(self._jobs[job_id].sink_status))

    def jobs(self, fsv: Optional[FeatureSetRef] = None) -> list[MaterializationJob]:
        with self._coord:
            return sorted(
                (self.job_status(j.job_id) for j in self._jobs.values() if fsv is None or j.fsv == tuple(fsv)),
                key=lambda j: j.seq,
            )

    def data_state(self, fsv: FeatureSetRef) -> IntervalSet:
        with self._coord:
            return IntervalSet(self._state(fsv))

    def staged_records(self, job_id: str) -> Optional[list[FeatureRecord]]:
        path = self._job_dir(job_id) / "staged.jsonl"
        return read_records(path) if path.exists() else None

    def _retryable(self, job: MaterializationJob) -> bool:
        return job.state == "failed" and job.attempt < self.max_attempts

    def _reserving(self, fsv: FeatureSetRef) -> list[MaterializationJob]:
        return [
            j for j in self._jobs.values()
            if j.fsv == tuple(fsv) and (j.state in ACTIVE or self._retryable(j))
        ]

    # requests ---------------------------------------------------------

    def request_backfill(self, fsv: FeatureSetRef, window: FeatureWindow, now: Optional[int] = None) -> str:
        fs = self.registry.get_feature_set(*fsv)
        if not fs.materialization.sinks:
            raise NoSinkEnabled(f"{fs.name} v{fs.version} has no store enabled")
        with self._coord:
            for j in self._jobs.values():
                if j.fsv == fs.ref and j.kind == "backfill" and j.state in ACTIVE and j.window.overlaps(window):
                    raise OverlapWithRunningBackfill(f"overlaps {j.job_id} {j.window.to_list()}")
            job = self._new_job(fs, window, "backfill", now)
            for j in self._jobs.values():
                if (
                    j.fsv == fs.ref and j.kind == "scheduled" and j.state == "queued"
                    and j.suspended_by is None and j.window.overlaps(window)
                ):
                    j.suspended_by = job.job_id
                    self._save(j)
            return job.job_id

    def cancel(self, job_id: str) -> MaterializationJob:
        with self._coord:
            job = self._get(job_id)
            if job.state != "queued":
                raise InvalidState(f"{job_id} is {job.state}; only queued jobs can be canceled")
            job.state = "canceled"
            self._save(job)
            self._resume_suspended()
            return self.job_status(job_id)

    def _get(self, job_id: str) -> MaterializationJob:
        if job_id not in self._jobs:
            raise NotFound(f"job {job_id}")
        return self._jobs[job_id]

    # scheduling -------------------------------------------------------

    def next_scheduled_window(self, fs: FeatureSetSpec, now: int) -> Optional[FeatureWindow]:
        """Oldest un-materialized, unreserved piece of a schedule-aligned window ending by ``now - delay``."""
        policy = fs.materialization
        interval, origin = policy.schedule_interval, policy.schedule_origin
        limit = now - policy.materialization_delay
        if limit < origin + interval:
            return None
        end = origin + (limit - origin) // interval * interval
        blocked = IntervalSet(self._state(fs.ref))
        for j in self._reserving(fs.ref):
            blocked.add(j.window.start_ts, j.window.end_ts)
        gaps = blocked.gaps(origin, end)
        if not gaps:
            return None
        s, e = gaps[0]
        aligned_end = origin + ((s - origin) // interval + 1) * interval
        return FeatureWindow(s, min(e, aligned_end))

    def _resume_suspended(self) -> list[Transition]:
        out = []
        for j in self._jobs.values():
            if j.suspended_by is not None and j.state == "queued":
                blocker = self._jobs.get(j.suspended_by)
                if blocker is None or blocker.state in TERMINAL:
                    j.suspended_by = None
                    self._save(j)
                    out.append(Transition(j.job_id, "suspended", "queued"))
        return out

    def _runnable(self) -> list[MaterializationJob]:
        queued = [j for j in self._jobs.values() if j.state == "queued" and j.suspended_by is None]
        return sorted(queued, key=lambda j: (j.kind != "backfill", j.seq))

    def tick(self, now: int) -> list[Transition]:
        transitions: list[Transition] = []
        with self._coord:
            if self.auto_retry:
                for j in sorted(self._jobs.values(), key=lambda j: j.seq):
                    if self._retryable(j):
                        transitions.append(Transition(j.job_id, "failed", "running"))
                        transitions.append(Transition(j.job_id, "running", self._retry(j, now).state))
            for fs in self.registry.list_feature_sets():
                if not fs.materialization.sinks:
                    continue
                window = self.next_scheduled_window(fs, now)
                if window is not None:
                    job = self._new_job(fs, window, "scheduled", now)
                    transitions.append(Transition(job.job_id, None, "queued"))
            # backfills sort first; scheduled jobs they suspended resume once they finish
            while True:
                transitions.extend(self._resume_suspended())
                runnable = self._runnable()
                if not runnable:
                    break
                job = runnable[0]
                running = [j for j in self._jobs.values() if j.state == "running" and j.fsv == job.fsv]
                if any(j.window.overlaps(job.window) for j in running):
                    break
                transitions.append(Transition(job.job_id, "queued", "running"))
                result = self.run_job(job.job_id, now)
                transitions.append(Transition(job.job_id, "running", result.state))
        return transitions

    # execution --------------------------------------------------------

    def run_job(self, job_id: str, now: int) -> MaterializationJob:
        with self._coord:
            job = self._get(job_id)
            if job.state != "queued" or job.suspended_by is not None:
                raise InvalidState(f"{job_id} is not runnable (state={job.state})")
            running = [j for j in self._jobs.values() if j.state == "running" and j.fsv == job.fsv]
            if any(j.window.overlaps(job.window) for j in running):
                raise JobConflict(f"{job_id} overlaps a running job")
            job.state = "running"
            job.attempt = 1
            job.run_now = now
            self._save(job)
            return self._execute(job, now)

    def retry(self, job_id: str, now: Optional[int] = None) -> MaterializationJob:
        with self._coord:
            job = self._get(job_id)
            if job.state != "failed":
                raise InvalidState(f"{job_id} is {job.state}; only failed jobs can be retried")
            if job.attempt >= self.max_attempts:
                raise InvalidState(f"{job_id} exhausted {self.max_attempts} attempts")
            return self._retry(job, now)

    def _retry(self, job: MaterializationJob, now: Optional[int]) -> MaterializationJob:
        job.state = "running"
        job.attempt += 1
        job.error = None
        self._save(job)
        return self._execute(job, job.run_now if now is None else now)

    def _execute(self, job: MaterializationJob, finish_now: int) -> MaterializationJob:
        records = self.staged_records(job.job_id)
        if records is None:
            fs = self.registry.get_feature_set(*job.fsv)
            try:
                # run_now is fixed on first run so every attempt stamps the same creation_ts
                records = self.calculate(fs, job.window, job.run_now, job.job_id)
            except FeatureStoreError as e:
                return self._finish(job, "failed", finish_now, f"{e.kind}: {e}")
            write_records(self._job_dir(job.job_id) / "staged.jsonl", records)

        for sink in SINK_ORDER:
            if sink not in job.sinks or job.sink_status.get(sink) == "merged":
                continue
            try:
                if self.fault_injector is not None:
                    self.fault_injector(sink, job)
                if sink == "offline":
                    self.offline.merge_offline(job.fsv, records)
                else:
                    self.online.merge_online(job.fsv, records, ttl=job.ttl)
                job.sink_status[sink] = "merged"
            except FeatureStoreError as e:
                job.sink_status[sink] = "failed"
                job.error = f"{sink}: {e.kind}: {e}"
            self._save(job)

        if all(job.sink_status[s] == "merged" for s in job.sinks):
            self._state(job.fsv).add(job.window.start_ts, job.window.end_ts)
            return self._finish(job, "succeeded", finish_now, None)
        return self._finish(job, "failed", finish_now, job.error)

    def _finish(self, job: MaterializationJob, state: str, now, error) -> MaterializationJob:
        job.state = state
        job.finished_at = now
        job.error = error
        self._save(job)
        log.info("job %s %s (attempt %d)", job.job_id, state, job.attempt)
        return self.job_status(job.job_id)

    @contextmanager
    def exclusive(self, fsv: FeatureSetRef):
        """Hold the coordinator with no job of ``fsv`` running, reserving its whole timeline."""
        with self._coord:
            if any(j.fsv == tuple(fsv) and j.state == "running" for j in self._jobs.values()):
                raise JobConflict(f"{fsv} has a running materialization job")
            yield
