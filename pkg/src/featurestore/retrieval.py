"""Point-in-time feature retrieval.

For an observation at ``ts0`` and a feature set with source delay ``d`` the
qualifying records are those of the same ids with ``event_ts < ts0 - d`` (and
``creation_ts <= as_of`` when an as-of is given). The one maximizing
``(event_ts, creation_ts)`` is returned, the same order the online store uses,
so training and serving pick the same record.

A cell without a qualifying record is ``no_data`` when the instant just
before ``ts0 - d`` lies in materialized coverage, ``not_materialized``
otherwise.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Optional, Sequence

from .errors import EntityMismatch, SchemaConflict, UnknownFeature
from .intervals import FeatureWindow, IntervalSet
from .online_store import Missing
from .records import FeatureRecord, FeatureSetRef, dumps, encode_ids
from .registry import FeatureSetSpec

if TYPE_CHECKING:
    from .store import FeatureStore

OBSERVATION_TS = "observation_ts"

Request = tuple[FeatureSetRef, Sequence[str]]


@dataclass(frozen=True)
class Cell:
    value: Any
    status: str  # value | no_data | not_materialized | expired | never_materialized
    event_ts: Optional[int] = None
    creation_ts: Optional[int] = None


@dataclass
class RetrievalResult:
    spine: list[dict[str, Any]]
    features: list[str]
    sources: dict[str, FeatureSetRef]
    delays: dict[FeatureSetRef, int]
    cells: list[dict[str, Cell]] = field(default_factory=list)
    as_of: Optional[int] = None

    def rows(self) -> list[dict[str, Any]]:
        out = []
        for spine_row, cells in zip(self.spine, self.cells):
            row = dict(spine_row)
            for f in self.features:
                row[f] = cells[f].value
                row[f"{f}__status"] = cells[f].status
            out.append(row)
        return out

    def to_jsonl(self) -> str:
        return "".join(dumps(r) + "\n" for r in self.rows())


@dataclass
class _Prepared:
    fs: FeatureSetSpec
    features: list[str]
    index: list[str]


def _prepare(store: FeatureStore, spine: list[dict], requests: Iterable[Request]) -> list[_Prepared]:
    out = []
    seen: dict[str, FeatureSetRef] = {}
    for fsv, names in requests:
        fs = store.registry.get_feature_set(*fsv)
        unknown = [n for n in names if n not in fs.feature_names]
        if unknown:
            raise UnknownFeature(f"{fs.name} v{fs.version} has no features {unknown}")
        for n in names:
            if n in seen:
                raise SchemaConflict(f"feature {n!r} requested from both {seen[n]} and {fs.ref}")
            seen[n] = fs.ref
        index = [c for c, _ in store.registry.index_columns(fs)]
        for i, row in enumerate(spine):
            if OBSERVATION_TS not in row:
                raise EntityMismatch(f"spine row {i} has no {OBSERVATION_TS}")
            lacking = [c for c in index if c not in row]
            if lacking:
                raise EntityMismatch(f"spine row {i} lacks index columns {lacking}")
        out.append(_Prepared(fs, list(names), index))
    return out


def point_in_time_join(
    spine: list[dict[str, Any]],
    prepared: list[_Prepared],
    records: dict[FeatureSetRef, list[FeatureRecord]],
    coverage: dict[FeatureSetRef, IntervalSet],
    as_of: Optional[int] = None,
) -> RetrievalResult:
    result = RetrievalResult(
        spine=[dict(r) for r in spine],
        features=[f for p in prepared for f in p.features],
        sources={f: p.fs.ref for p in prepared for f in p.features},
        delays={p.fs.ref: p.fs.source.source_delay for p in prepared},
        cells=[{} for _ in spine],
        as_of=as_of,
    )
    for p in prepared:
        by_key: dict[str, list[FeatureRecord]] = {}
        for r in records[p.fs.ref]:
            if as_of is None or r.creation_ts <= as_of:
                by_key.setdefault(r.key, []).append(r)
        events = {}
        for k, recs in by_key.items():
            recs.sort(key=lambda r: r.recency)
            events[k] = [r.event_ts for r in recs]
        delay = p.fs.source.source_delay
        cover = coverage[p.fs.ref]
        for row, cells in zip(spine, result.cells):
            upper = row[OBSERVATION_TS] - delay
            key = encode_ids(row[c] for c in p.index)
            recs = by_key.get(key, [])
            i = bisect_left(events.get(key, []), upper)
            if i > 0:
                rec = recs[i - 1]
                for f in p.features:
                    cells[f] = Cell(rec.features.get(f), "value", rec.event_ts, rec.creation_ts)
            else:
                status = "no_data" if cover.contains(upper - 1) else "not_materialized"
                for f in p.features:
                    cells[f] = Cell(None, status)
    return result


def get_offline_features(
    store: FeatureStore,
    spine: list[dict[str, Any]],
    requests: Iterable[Request],
    as_of: Optional[int] = None,
) -> RetrievalResult:
    prepared = _prepare(store, spine, requests)
    records = {p.fs.ref: store.offline.scan_offline(p.fs.ref) for p in prepared}
    coverage = {p.fs.ref: store.scheduler.data_state(p.fs.ref) for p in prepared}
    return point_in_time_join(spine, prepared, records, coverage, as_of)


def get_offline_features_unmaterialized(
    store: FeatureStore,
    spine: list[dict[str, Any]],
    requests: Iterable[Request],
    as_of: Optional[int] = None,
    now: Optional[int] = None,
) -> RetrievalResult:
    """Compute features on the fly over ``[0, max(ts0 - delay))`` and join them.

    Records are stamped ``creation_ts = now`` (default: the window end), so the
    result matches a materialized join after a backfill of that window at the
    same ``now``.
    """
    prepared = _prepare(store, spine, requests)
    records: dict[FeatureSetRef, list[FeatureRecord]] = {}
    coverage: dict[FeatureSetRef, IntervalSet] = {}
    for p in prepared:
        delay = p.fs.source.source_delay
        end = max((row[OBSERVATION_TS] - delay for row in spine), default=0)
        if end <= 0:
            records[p.fs.ref], coverage[p.fs.ref] = [], IntervalSet()
            continue
        window = FeatureWindow(0, end)
        records[p.fs.ref] = store.calculate(p.fs, window, end if now is None else now)
        coverage[p.fs.ref] = IntervalSet([(0, end)])
    return point_in_time_join(spine, prepared, records, coverage, as_of)


def get_online_features(
    store: FeatureStore,
    requests: Iterable[Request],
    ids: dict[str, Any],
    now: int,
) -> dict[str, Cell]:
    out: dict[str, Cell] = {}
    for fsv, names in requests:
        fs = store.registry.get_feature_set(*fsv)
        unknown = [n for n in names if n not in fs.feature_names]
        if unknown:
            raise UnknownFeature(f"{fs.name} v{fs.version} has no features {unknown}")
        index = [c for c, _ in store.registry.index_columns(fs)]
        lacking = [c for c in index if c not in ids]
        if lacking:
            raise EntityMismatch(f"ids lack index columns {lacking}")
        got = store.online.get_online(fs.ref, [ids[c] for c in index], now)
        for n in names:
            if n in out:
                raise SchemaConflict(f"feature {n!r} requested twice")
            if isinstance(got, Missing):
                out[n] = Cell(None, got.reason)
            else:
                out[n] = Cell(got.features.get(n), "value", got.event_ts, got.creation_ts)
    return out


def audit_leakage(result: RetrievalResult, spine: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Re-check every value cell against its observation time; empty when leakage-free."""
    violations = []
    for i, (row, cells) in enumerate(zip(spine, result.cells)):
        ts0 = row[OBSERVATION_TS]
        for f, cell in cells.items():
            if cell.status != "value":
                continue
            delay = result.delays[result.sources[f]]
            if cell.event_ts is None or not cell.event_ts < ts0 - delay:
                violations.append({"row": i, "feature": f, "event_ts": cell.event_ts, "limit": ts0 - delay})
            elif result.as_of is not None and cell.creation_ts > result.as_of:
                violations.append({"row": i, "feature": f, "creation_ts": cell.creation_ts, "as_of": result.as_of})
    return violations
