"""``fs`` command line. Every command is a thin wrapper over a library call."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any

from . import consistency, retrieval
from .errors import FeatureStoreError
from .intervals import FeatureWindow
from .records import dumps
from .registry import EntityDef, FeatureSetSpec
from .store import FeatureStore

EXIT_ERROR = 2


def _emit(obj: Any) -> None:
    sys.stdout.write(dumps(obj) + "\n")


def _load_json(path: str) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _open(args, init: bool = False) -> FeatureStore:
    root = args.root or os.environ.get("FS_ROOT")
    if not root:
        raise SystemExit("fs: --root or FS_ROOT is required")
    if init:
        return FeatureStore.init(root)
    if not Path(root).is_dir():
        raise SystemExit(f"fs: {root} is not a feature store root (run `fs init`)")
    return FeatureStore(root)


def _parse_features(specs: list[str]) -> list[tuple[tuple[str, int], list[str]]]:
    out = []
    for spec in specs:
        try:
            name, version, names = spec.split(":", 2)
            out.append(((name, int(version)), [n for n in names.split(",") if n]))
        except ValueError:
            raise SystemExit(f"fs: bad --features {spec!r}, expected name:version:f1,f2") from None
    return out


def _parse_ids(text: str, store: FeatureStore, requests) -> dict[str, Any]:
    types = {}
    for fsv, _ in requests:
        types.update(store.registry.index_columns(store.registry.get_feature_set(*fsv)))
    ids = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        ids[k] = int(v) if types.get(k) == "int64" else v
    return ids


def _job_json(job) -> dict:
    return job.to_dict()


# ----------------------------------------------------------------------- commands


def cmd_init(args):
    store = _open(args, init=True)
    _emit({"root": str(store.root)})


def cmd_entity_register(args):
    store = _open(args)
    with store.lock():
        entity = store.registry.register_entity(EntityDef.from_dict(_load_json(args.file)))
    _emit(entity.to_dict())


def cmd_featureset_register(args):
    store = _open(args)
    with store.lock():
        spec = store.registry.register_feature_set(FeatureSetSpec.from_dict(_load_json(args.file)))
    _emit(spec.to_dict())


def cmd_featureset_update(args):
    store = _open(args)
    with store.lock():
        spec = store.registry.update_feature_set(args.name, args.version, _load_json(args.patch_file))
    _emit(spec.to_dict())


def cmd_list_featuresets(args):
    store = _open(args)
    _emit([s.to_dict() for s in store.registry.list_feature_sets(args.prefix or "")])


def cmd_backfill(args):
    store = _open(args)
    with store.lock():
        job_id = store.scheduler.request_backfill(
            (args.name, args.version), FeatureWindow(args.start, args.end), now=args.now
        )
        out = {"job_id": job_id}
        if args.now is not None:
            out["transitions"] = [t.to_dict() for t in store.scheduler.tick(args.now)]
        out["job"] = _job_json(store.scheduler.job_status(job_id))
    _emit(out)


def cmd_tick(args):
    store = _open(args)
    with store.lock():
        transitions = store.scheduler.tick(args.now)
    _emit([t.to_dict() for t in transitions])


def cmd_job_status(args):
    _emit(_job_json(_open(args).scheduler.job_status(args.job_id)))


def cmd_job_retry(args):
    store = _open(args)
    with store.lock():
        job = store.scheduler.retry(args.job_id, now=args.now)
    _emit(_job_json(job))


def cmd_datastate(args):
    state = _open(args).scheduler.data_state((args.name, args.version))
    _emit({"materialized": [list(s) for s in state]})


def cmd_get_offline(args):
    store = _open(args)
    with open(args.spine, encoding="utf-8") as f:
        spine = [json.loads(line) for line in f if line.strip()]
    requests = _parse_features(args.features)
    if args.unmaterialized:
        result = retrieval.get_offline_features_unmaterialized(
            store, spine, requests, as_of=args.as_of, now=args.now
        )
    else:
        result = retrieval.get_offline_features(store, spine, requests, as_of=args.as_of)
    Path(args.out).write_text(result.to_jsonl(), encoding="utf-8")
    statuses: dict[str, int] = {}
    for cells in result.cells:
        for cell in cells.values():
            statuses[cell.status] = statuses.get(cell.status, 0) + 1
    _emit({"out": args.out, "rows": len(result.spine), "cells": statuses})


def cmd_get_online(args):
    store = _open(args)
    requests = _parse_features(args.features)
    ids = _parse_ids(args.ids, store, requests)
    cells = retrieval.get_online_features(store, requests, ids, args.now)
    _emit({name: {"value": c.value, "status": c.status} for name, c in cells.items()})


def cmd_bootstrap(args):
    store = _open(args)
    fsv = (args.name, args.version)
    with store.lock():
        if args.direction == "offline-to-online":
            n = consistency.bootstrap_offline_to_online(store, fsv, args.now)
        else:
            n = consistency.bootstrap_online_to_offline(store, fsv)
    _emit({"direction": args.direction, "count": n})


def cmd_check_consistency(args):
    report = consistency.check_consistency(_open(args), (args.name, args.version), args.now)
    _emit(report.to_dict())


# ------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", help="feature store root (default: $FS_ROOT)")

    parser = argparse.ArgumentParser(prog="fs", description="Single-node feature store")
    sub = parser.add_subparsers(dest="command", required=True)

    def leaf(group, name, fn, **kw):
        p = group.add_parser(name, parents=[common], **kw)
        p.set_defaults(fn=fn)
        return p

    def fsv_args(p):
        p.add_argument("name")
        p.add_argument("version", type=int)

    leaf(sub, "init", cmd_init)

    entity = sub.add_parser("entity").add_subparsers(dest="sub", required=True)
    leaf(entity, "register", cmd_entity_register).add_argument("file")

    fset = sub.add_parser("featureset").add_subparsers(dest="sub", required=True)
    leaf(fset, "register", cmd_featureset_register).add_argument("file")
    p = leaf(fset, "update", cmd_featureset_update)
    fsv_args(p)
    p.add_argument("patch_file")

    lst = sub.add_parser("list").add_subparsers(dest="sub", required=True)
    leaf(lst, "featuresets", cmd_list_featuresets).add_argument("--prefix")

    mat = sub.add_parser("materialize").add_subparsers(dest="sub", required=True)
    p = leaf(mat, "backfill", cmd_backfill)
    fsv_args(p)
    p.add_argument("--start", type=int, required=True)
    p.add_argument("--end", type=int, required=True)
    p.add_argument("--now", type=int, help="also run a scheduler tick at this time")

    leaf(sub, "tick", cmd_tick).add_argument("--now", type=int, required=True)

    job = sub.add_parser("job").add_subparsers(dest="sub", required=True)
    leaf(job, "status", cmd_job_status).add_argument("job_id")
    p = leaf(job, "retry", cmd_job_retry)
    p.add_argument("job_id")
    p.add_argument("--now", type=int)

    fsv_args(leaf(sub, "datastate", cmd_datastate))

    get = sub.add_parser("get").add_subparsers(dest="sub", required=True)
    p = leaf(get, "offline", cmd_get_offline)
    p.add_argument("--spine", required=True)
    p.add_argument("--features", action="append", required=True)
    p.add_argument("--as-of", type=int, dest="as_of")
    p.add_argument("--unmaterialized", action="store_true")
    p.add_argument("--now", type=int, help="creation time for on-the-fly records")
    p.add_argument("--out", required=True)
    p = leaf(get, "online", cmd_get_online)
    p.add_argument("--features", action="append", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--now", type=int, required=True)

    p = leaf(sub, "bootstrap", cmd_bootstrap)
    fsv_args(p)
    p.add_argument("--direction", choices=["offline-to-online", "online-to-offline"], required=True)
    p.add_argument("--now", type=int, required=True)

    check = sub.add_parser("check").add_subparsers(dest="sub", required=True)
    p = leaf(check, "consistency", cmd_check_consistency)
    fsv_args(p)
    p.add_argument("--now", type=int, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except FeatureStoreError as e:
        sys.stderr.write(dumps({"error": e.kind, "message": str(e)}) + "\n")
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
