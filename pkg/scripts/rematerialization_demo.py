"""Walk one id through four materializations and print both stores after each job.

Source rows arrive at 9, 19 and 29; three jobs materialize event times 10, 20
and 30. A late correction to the row at 19 is then re-materialized at 41. The
offline store keeps both versions of event 20, the online store keeps the
newest event (30) throughout.
"""

import argparse
import tempfile
from pathlib import Path

from featurestore import (
    EntityDef,
    FeatureSetSpec,
    FeatureStore,
    FeatureWindow,
    MaterializationPolicy,
    SourceDef,
    TransformDef,
)

FSV = ("latest_amount", 1)


def write_rows(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f'{{"account_id": "a", "ts": {t}, "amount": {v}}}\n' for t, v in rows))


def show(store: FeatureStore, title: str):
    print(f"\n== {title}")
    print("offline (event_ts, creation_ts, value):")
    for r in store.offline.scan_offline(FSV):
        print(f"  {r.event_ts:>3} {r.creation_ts:>3} {r.features['amount']}")
    print("online:")
    for e in store.online.entries(FSV):
        print(f"  {e.key}: event_ts={e.record.event_ts} creation_ts={e.record.creation_ts} "
              f"value={e.record.features['amount']}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, help="store root (default: a temporary directory)")
    args = ap.parse_args()
    root = args.root or Path(tempfile.mkdtemp(prefix="remat-"))

    store = FeatureStore.init(root)
    source = root / "sources" / "txn.jsonl"
    write_rows(source, [(9, 9), (19, 19), (29, 29)])
    store.registry.register_entity(EntityDef("account", 1, (("account_id", "string"),)))
    store.registry.register_feature_set(FeatureSetSpec(
        name=FSV[0],
        version=FSV[1],
        entities=(("account", 1),),
        source=SourceDef("sources/txn.jsonl", "ts", source_lookback=1),
        transformation=TransformDef("dsl", dsl_program="agg latest(amount) over 1ms as amount"),
        features=(("amount", "int64"),),
        timestamp_column="event_ts",
        materialization=MaterializationPolicy(True, True, schedule_interval=1),
    ))

    s = store.scheduler
    for event, created in ((10, 11), (20, 21), (30, 31)):
        s.run_job(s.request_backfill(FSV, FeatureWindow(event, event + 1), now=created), created)
    show(store, "after the first three jobs")

    write_rows(source, [(9, 9), (19, 190), (29, 29)])
    s.run_job(s.request_backfill(FSV, FeatureWindow(20, 21), now=41), 41)
    show(store, "after re-materializing event 20 at 41")
    print(f"\nstore root: {root}")


if __name__ == "__main__":
    main()
