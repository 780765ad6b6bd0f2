import json
import os
from pathlib import Path

import hypothesis
import pytest

from featurestore import (
    EntityDef,
    FeatureSetSpec,
    FeatureStore,
    MaterializationPolicy,
    SourceDef,
    TransformDef,
)

hypothesis.settings.register_profile("ci", deadline=None, max_examples=100)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def write_source(directory: Path, rows, name="part-0.jsonl"):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / name, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    return directory


ACCOUNT = EntityDef("account", 1, (("account_id", "string"),))


def make_feature_set(
    name="txn",
    version=1,
    program="agg sum(amount) over 3ms as amount_sum\nagg count(amount) over 3ms as amount_count\n",
    features=(("amount_sum", "int64"), ("amount_count", "int64")),
    source_path="sources/txn",
    lookback=3,
    delay=0,
    interval=1,
    offline=True,
    online=True,
    ttl=None,
    mat_delay=0,
    origin=0,
    entities=(("account", 1),),
    opaque_id=None,
    schema=None,
):
    transformation = (
        TransformDef("opaque", opaque_id=opaque_id) if opaque_id else TransformDef("dsl", dsl_program=program)
    )
    return FeatureSetSpec(
        name=name,
        version=version,
        entities=tuple(entities),
        source=SourceDef(source_path, "ts", lookback, delay, schema),
        transformation=transformation,
        features=tuple(features),
        timestamp_column="event_ts",
        materialization=MaterializationPolicy(
            offline_enabled=offline,
            online_enabled=online,
            schedule_interval=interval,
            ttl=ttl,
            materialization_delay=mat_delay,
            schedule_origin=origin,
        ),
    )


@pytest.fixture
def store(tmp_path):
    return FeatureStore.init(tmp_path / "fs")


@pytest.fixture
def txn_store(store):
    """Store with one account entity, a small txn source and a sum/count feature set."""
    write_source(
        store.root / "sources" / "txn",
        [
            {"account_id": "a", "ts": 1, "amount": 5},
            {"account_id": "a", "ts": 2, "amount": 7},
            {"account_id": "b", "ts": 2, "amount": 1},
            {"account_id": "a", "ts": 6, "amount": 10},
        ],
    )
    store.registry.register_entity(ACCOUNT)
    store.registry.register_feature_set(make_feature_set())
    return store


# acceptance reporting: one line per criterion in the terminal summary
ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(ACCEPTANCE_RESULTS.items()):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {name}")


def rematerialized_records():
    """R0..R3 for one id with t0 < t0' < t1 < t1' < t2 < t2' < t3' (R3 re-materializes t1)."""
    from featurestore import FeatureRecord

    ids = {"account_id": "a"}
    t0, t0c, t1, t1c, t2, t2c, t3c = 10, 11, 20, 21, 30, 31, 41
    return [
        FeatureRecord(ids, t0, t0c, {"f": 0}),
        FeatureRecord(ids, t1, t1c, {"f": 1}),
        FeatureRecord(ids, t2, t2c, {"f": 2}),
        FeatureRecord(ids, t1, t3c, {"f": 3}),
    ]
