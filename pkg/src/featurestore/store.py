"""A feature store rooted at one directory: registry, both stores and jobs."""

from __future__ import annotations

import fcntl
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import compute
from .intervals import FeatureWindow
from .offline_store import OfflineStore
from .online_store import OnlineStore
from .records import FeatureRecord, write_json
from .registry import FeatureSetSpec, Registry
from .scheduler import FaultInjector, Scheduler

LAYOUT = ("registry", "offline", "online", "jobs")


class FeatureStore:
    def __init__(
        self,
        root,
        *,
        max_attempts: int = 5,
        fault_injector: Optional[FaultInjector] = None,
        auto_retry: bool = True,
    ):
        self.root = Path(root)
        self.registry = Registry(self.root)
        self.offline = OfflineStore(self.root)
        self.online = OnlineStore(self.root)
        self.scheduler = Scheduler(
            self.root,
            self.registry,
            self.offline,
            self.online,
            self._calculate,
            max_attempts=max_attempts,
            fault_injector=fault_injector,
            auto_retry=auto_retry,
        )

    @classmethod
    def init(cls, root, **kwargs) -> FeatureStore:
        root = Path(root)
        for d in LAYOUT:
            (root / d).mkdir(parents=True, exist_ok=True)
        marker = root / "featurestore.json"
        if not marker.exists():
            write_json(marker, {"format": 1})
        return cls(root, **kwargs)

    def _calculate(self, fs: FeatureSetSpec, window: FeatureWindow, now: int, job_id=None):
        return self.calculate(fs, window, now, job_id)

    def calculate(
        self, fs: FeatureSetSpec, window: FeatureWindow, now: int, job_id: Optional[str] = None
    ) -> list[FeatureRecord]:
        return compute.calculate(
            fs, window, now, self.registry.index_columns(fs), base_dir=self.root, job_id=job_id
        )

    @contextmanager
    def lock(self):
        """Advisory inter-process lock on the root for mutating commands."""
        self.root.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.root / ".lock", os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            yield
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)
