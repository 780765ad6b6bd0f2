"""Latest-record-per-key online store.

Entries live in memory and are written through to
``<root>/online/<name>/<version>/snapshot.jsonl`` after every merge batch, so a
restarted engine reloads exactly what was acknowledged.

Merge rule per record: insert when the key is absent, override when the new
``(event_ts, creation_ts)`` is strictly greater, otherwise no-op. Expiry is
only consulted on reads; merges compare against the stored record even when
it has expired, which keeps the final state independent of merge order.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .errors import StoreIoError
from .offline_store import MergeReport
from .records import FeatureRecord, FeatureSetRef, atomic_write, dumps, encode_ids


@dataclass(frozen=True)
class OnlineEntry:
    key: str
    record: FeatureRecord
    expires_at: Optional[int] = None

    def expired(self, now: int) -> bool:
        return self.expires_at is not None and now >= self.expires_at

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "record": self.record.to_dict(), "expires_at": self.expires_at}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> OnlineEntry:
        return cls(d["key"], FeatureRecord.from_dict(d["record"]), d.get("expires_at"))


@dataclass(frozen=True)
class Missing:
    reason: str  # "expired" | "never_materialized"

    def __bool__(self):
        return False


class OnlineStore:
    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) / "online" if root is not None else None
        self._tables: dict[FeatureSetRef, dict[str, OnlineEntry]] = {}
        self._lock = threading.RLock()

    def _snapshot_path(self, fsv: FeatureSetRef) -> Path:
        return self.root / fsv[0] / str(fsv[1]) / "snapshot.jsonl"

    def _table(self, fsv: FeatureSetRef) -> dict[str, OnlineEntry]:
        fsv = tuple(fsv)
        table = self._tables.get(fsv)
        if table is None:
            table = {}
            if self.root is not None and self._snapshot_path(fsv).exists():
                with open(self._snapshot_path(fsv), encoding="utf-8") as f:
                    for line in f:
                        if line.strip():
                            e = OnlineEntry.from_dict(json.loads(line))
                            table[e.key] = e
            self._tables[fsv] = table
        return table

    def _persist(self, fsv: FeatureSetRef, table: dict[str, OnlineEntry]):
        if self.root is None:
            return
        text = "".join(dumps(table[k].to_dict()) + "\n" for k in sorted(table))
        atomic_write(self._snapshot_path(fsv), text)

    def merge_online(
        self,
        fsv: FeatureSetRef,
        records: Iterable[FeatureRecord],
        now: Optional[int] = None,
        ttl: Optional[int] = None,
    ) -> MergeReport:
        """Apply the online merge rule to each record; ``expires_at = creation_ts + ttl``.

        ``now`` is accepted for interface symmetry; merging never depends on it.
        """
        inserted = overridden = noop = 0
        with self._lock:
            table = self._table(fsv)
            staged = dict(table)
            for r in records:
                key = r.key
                cur = staged.get(key)
                if cur is not None and r.recency <= cur.record.recency:
                    noop += 1
                    continue
                if cur is None:
                    inserted += 1
                else:
                    overridden += 1
                expires = r.creation_ts + ttl if ttl is not None else None
                staged[key] = OnlineEntry(key, r, expires)
            if inserted or overridden:
                try:
                    self._persist(fsv, staged)
                except OSError as e:
                    raise StoreIoError(f"online snapshot for {fsv} failed: {e}") from e
                self._tables[tuple(fsv)] = staged
        return MergeReport(inserted=inserted, overridden=overridden, noop=noop)

    def get_online(
        self, fsv: FeatureSetRef, ids: Union[dict[str, Any], list, tuple], now: int
    ) -> Union[FeatureRecord, Missing]:
        key = encode_ids(ids.values() if isinstance(ids, dict) else ids)
        with self._lock:
            entry = self._table(fsv).get(key)
        if entry is None:
            return Missing("never_materialized")
        if entry.expired(now):
            return Missing("expired")
        return entry.record

    def entries(self, fsv: FeatureSetRef) -> list[OnlineEntry]:
        with self._lock:
            table = self._table(fsv)
            return [table[k] for k in sorted(table)]

    def records(self, fsv: FeatureSetRef) -> list[FeatureRecord]:
        return sorted((e.record for e in self.entries(fsv)), key=FeatureRecord.sort_key)

    def reload(self) -> None:
        """Drop the in-memory tables; the next access re-reads the snapshots."""
        with self._lock:
            self._tables.clear()
