"""Store bootstrap in both directions and offline/online consistency checks.

Bootstrap goes through the stores' own merge operations so the same merge,
tie and TTL rules apply as during materialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from .records import FeatureRecord, FeatureSetRef, dumps

if TYPE_CHECKING:
    from .store import FeatureStore


def bootstrap_offline_to_online(store: FeatureStore, fsv: FeatureSetRef, now: int) -> int:
    """Merge the offline latest record per id into the online store; returns entries changed."""
    fs = store.registry.get_feature_set(*fsv)
    with store.scheduler.exclusive(fs.ref):
        latest = store.offline.latest_per_id(fs.ref)
        report = store.online.merge_online(fs.ref, latest, now, ttl=fs.materialization.ttl)
    return report.inserted + report.overridden


def bootstrap_online_to_offline(store: FeatureStore, fsv: FeatureSetRef) -> int:
    """Merge every online record into the offline store; returns records inserted."""
    fs = store.registry.get_feature_set(*fsv)
    with store.scheduler.exclusive(fs.ref):
        report = store.offline.merge_offline(fs.ref, store.online.records(fs.ref))
    return report.inserted


def _stamp(r: Optional[FeatureRecord]) -> Optional[list[int]]:
    return None if r is None else [r.event_ts, r.creation_ts]


@dataclass
class ConsistencyReport:
    fsv: FeatureSetRef
    checked: int = 0
    expired_skipped: int = 0
    divergent: list[dict[str, Any]] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return not self.divergent

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_set": {"name": self.fsv[0], "version": self.fsv[1]},
            "checked": self.checked,
            "expired_skipped": self.expired_skipped,
            "divergent": self.divergent,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())


def check_consistency(store: FeatureStore, fsv: FeatureSetRef, now: int) -> ConsistencyReport:
    fs = store.registry.get_feature_set(*fsv)
    offline = {r.key: r for r in store.offline.latest_per_id(fs.ref)}
    online = {e.key: e for e in store.online.entries(fs.ref)}
    report = ConsistencyReport(fs.ref)
    for key in sorted(set(offline) | set(online)):
        entry = online.get(key)
        if entry is not None and entry.expired(now):
            report.expired_skipped += 1
            continue
        report.checked += 1
        off = offline.get(key)
        on = entry.record if entry is not None else None
        if off != on:
            ref = off or on
            report.divergent.append(
                {"key": key, "ids": dict(ref.ids), "offline": _stamp(off), "online": _stamp(on)}
            )
    return report
