"""Randomized sink-failure sweep: how many attempts until both stores converge.

Each trial runs the same set of backfill jobs with sink merges failing at
random (probability ``--p`` per merge attempt) and retries failed jobs through
scheduler ticks until they succeed or exhaust ``--max-attempts``. A trial
converges when every job succeeded and the stores equal a fault-free run.
"""

import argparse
import random
import shutil
import tempfile
import time
from collections import Counter
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
from featurestore.consistency import check_consistency
from featurestore.errors import StoreIoError

FSV = ("txn", 1)
JOBS = [((0, 10), 100), ((10, 20), 110), ((5, 15), 120), ((15, 30), 130)]


def build(root: Path, injector=None, max_attempts=5) -> FeatureStore:
    store = FeatureStore.init(root, fault_injector=injector, max_attempts=max_attempts)
    src = root / "sources" / "txn.jsonl"
    src.parent.mkdir(parents=True, exist_ok=True)
    src.write_text("".join(f'{{"account_id": "{k}", "ts": {t}, "amount": {t % 7}}}\n'
                           for k in "abc" for t in range(0, 30, 2)))
    store.registry.register_entity(EntityDef("account", 1, (("account_id", "string"),)))
    store.registry.register_feature_set(FeatureSetSpec(
        name="txn", version=1, entities=(("account", 1),),
        source=SourceDef("sources/txn.jsonl", "ts", source_lookback=4),
        transformation=TransformDef("dsl", dsl_program="agg sum(amount) over 4ms as s"),
        features=(("s", "int64"),), timestamp_column="event_ts",
        # a long interval keeps ticks from scheduling anything of their own
        materialization=MaterializationPolicy(True, True, schedule_interval=10**9),
    ))
    return store


def run(store: FeatureStore):
    s = store.scheduler
    for window, now in JOBS:
        s.run_job(s.request_backfill(FSV, FeatureWindow(*window), now=now), now)
    for tick in range(200, 200 + 10 * s.max_attempts):
        if not any(j.state == "failed" and j.attempt < s.max_attempts for j in s.jobs()):
            break
        s.tick(tick)
    return s.jobs()


def state(store):
    return store.offline.scan_offline(FSV), store.online.entries(FSV)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--p", type=float, default=0.3, help="failure probability per sink merge")
    ap.add_argument("--max-attempts", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rnd = random.Random(args.seed)
    work = Path(tempfile.mkdtemp(prefix="sweep-"))
    try:
        ref = build(work / "ref")
        run(ref)
        reference = state(ref)
        attempts, outcomes = Counter(), Counter()
        started = time.perf_counter()
        for trial in range(args.trials):
            def flaky(sink, job):
                if rnd.random() < args.p:
                    raise StoreIoError(f"injected {sink} failure")

            store = build(work / f"t{trial}", flaky, args.max_attempts)
            jobs = run(store)
            attempts.update(j.attempt for j in jobs)
            if all(j.state == "succeeded" for j in jobs):
                same = state(store) == reference
                clean = check_consistency(store, FSV, now=10**6).consistent
                outcomes["converged" if same and clean else "diverged"] += 1
            else:
                outcomes["exhausted"] += 1
            shutil.rmtree(work / f"t{trial}")
        elapsed = time.perf_counter() - started
    finally:
        shutil.rmtree(work, ignore_errors=True)

    print(f"{args.trials} trials, p={args.p}, max_attempts={args.max_attempts}, {elapsed:.1f}s")
    print("outcomes:", dict(outcomes))
    print("attempts per job:")
    total = sum(attempts.values())
    for n in sorted(attempts):
        print(f"  {n}: {attempts[n]:>5} ({attempts[n] / total:.1%})")


if __name__ == "__main__":
    main()
