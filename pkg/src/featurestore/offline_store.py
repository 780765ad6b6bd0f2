"""Append-only offline store partitioned by UTC event day.

Layout per feature set version::

    <root>/offline/<name>/<version>/manifest.json
    <root>/offline/<name>/<version>/date=YYYY-MM-DD/part-<digest>.jsonl

Each partition is one sorted JSON-lines file named by the hash of its content.
A merge writes the new partition files first, then swaps ``manifest.json`` in
a single rename; only then are superseded files removed. Readers go through
the manifest, so a merge is visible all at once or not at all.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .errors import StoreIoError
from .intervals import FeatureWindow
from .records import (
    FeatureRecord,
    FeatureSetRef,
    atomic_write,
    dumps,
    read_json,
    read_records,
    write_json,
)


@dataclass(frozen=True)
class MergeReport:
    inserted: int = 0
    skipped: int = 0
    overridden: int = 0
    noop: int = 0


def event_day(ts: int) -> str:
    return datetime.fromtimestamp(ts / 1000, tz=timezone.utc).strftime("%Y-%m-%d")


class OfflineStore:
    def __init__(self, root: Path):
        self.root = Path(root) / "offline"
        self._locks: dict[FeatureSetRef, threading.Lock] = {}
        self._guard = threading.Lock()
        # test seam: called with the partition name before each partition write
        self.before_partition_write: Optional[Callable[[str], None]] = None

    def _dir(self, fsv: FeatureSetRef) -> Path:
        return self.root / fsv[0] / str(fsv[1])

    def _lock(self, fsv: FeatureSetRef) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(tuple(fsv), threading.Lock())

    def manifest(self, fsv: FeatureSetRef) -> dict[str, Any]:
        path = self._dir(fsv) / "manifest.json"
        if not path.exists():
            return {"partitions": {}}
        return read_json(path)

    def _load_partition(self, fsv: FeatureSetRef, entry: dict[str, Any]) -> list[FeatureRecord]:
        return read_records(self._dir(fsv) / entry["file"])

    def merge_offline(self, fsv: FeatureSetRef, records: Iterable[FeatureRecord]) -> MergeReport:
        """Insert each record whose (ids, event_ts, creation_ts) key is absent."""
        by_day: dict[str, list[FeatureRecord]] = {}
        for r in records:
            by_day.setdefault(event_day(r.event_ts), []).append(r)

        with self._lock(fsv):
            base = self._dir(fsv)
            manifest = self.manifest(fsv)
            parts = dict(manifest["partitions"])
            inserted = skipped = 0
            written: list[Path] = []
            superseded: list[Path] = []
            try:
                for day in sorted(by_day):
                    current = self._load_partition(fsv, parts[day]) if day in parts else []
                    keys = {r.full_key for r in current}
                    added = []
                    for r in by_day[day]:
                        if r.full_key in keys:
                            skipped += 1
                            continue
                        keys.add(r.full_key)
                        added.append(r)
                    if not added:
                        continue
                    merged = sorted(current + added, key=FeatureRecord.sort_key)
                    text = "".join(dumps(r.to_dict()) + "\n" for r in merged)
                    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
                    rel = f"date={day}/part-{digest}.jsonl"
                    if self.before_partition_write is not None:
                        self.before_partition_write(day)
                    atomic_write(base / rel, text)
                    written.append(base / rel)
                    if day in parts:
                        superseded.append(base / parts[day]["file"])
                    parts[day] = {"file": rel, "records": len(merged)}
                    inserted += len(added)
                if written:
                    write_json(base / "manifest.json", {"partitions": dict(sorted(parts.items()))})
            except Exception as e:
                for p in written:
                    p.unlink(missing_ok=True)
                raise StoreIoError(f"offline merge into {fsv} failed: {e}") from e
            for p in superseded:
                p.unlink(missing_ok=True)
        return MergeReport(inserted=inserted, skipped=skipped)

    def scan_offline(
        self,
        fsv: FeatureSetRef,
        window: Optional[FeatureWindow] = None,
        ids_filter: Optional[dict[str, Any]] = None,
    ) -> list[FeatureRecord]:
        out = []
        for day, entry in sorted(self.manifest(fsv)["partitions"].items()):
            if window is not None:
                lo, hi = event_day(window.start_ts), event_day(window.end_ts - 1)
                if not (lo <= day <= hi):
                    continue
            for r in self._load_partition(fsv, entry):
                if window is not None and not window.contains(r.event_ts):
                    continue
                if ids_filter and any(r.ids.get(k) != v for k, v in ids_filter.items()):
                    continue
                out.append(r)
        out.sort(key=FeatureRecord.sort_key)
        return out

    def latest_per_id(self, fsv: FeatureSetRef, as_of: Optional[int] = None) -> list[FeatureRecord]:
        """Per ids combination, the record maximizing (event_ts, creation_ts)."""
        best: dict[str, FeatureRecord] = {}
        for r in self.scan_offline(fsv):
            if as_of is not None and r.creation_ts > as_of:
                continue
            cur = best.get(r.key)
            if cur is None or r.recency > cur.recency:
                best[r.key] = r
        return sorted(best.values(), key=FeatureRecord.sort_key)

    def count(self, fsv: FeatureSetRef) -> int:
        return sum(p["records"] for p in self.manifest(fsv)["partitions"].values())
