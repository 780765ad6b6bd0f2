"""Feature calculation for one feature window.

The source read window is the feature window extended backwards by the
source lookback (clamped at epoch). The transformation runs on that source
slice and its output is cut back to the feature window, so the lookback only
ever feeds aggregations and never leaks rows outside the requested window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import dsl
from .dsl import Frame, check_value
from .errors import (
    InvalidRecord,
    SourceSchemaMismatch,
    SourceUnavailable,
    TransformOutputSchemaError,
    UnknownTransform,
)
from .intervals import FeatureWindow
from .records import FeatureRecord
from .registry import FeatureSetSpec, SourceDef


@dataclass(frozen=True)
class TransformContext:
    feature_set: tuple[str, int]
    feature_window: FeatureWindow
    source_window: FeatureWindow
    job_id: Optional[str] = None


TransformHook = Callable[[Frame, TransformContext], Frame]
_TRANSFORMS: dict[str, TransformHook] = {}


def register_transform(opaque_id: str, fn: Optional[TransformHook] = None):
    """Register an in-process transform hook. Usable as a decorator."""
    if fn is None:
        return lambda f: register_transform(opaque_id, f)
    _TRANSFORMS[opaque_id] = fn
    return fn


def unregister_transform(opaque_id: str) -> None:
    _TRANSFORMS.pop(opaque_id, None)


def derive_source_window(w: FeatureWindow, source_lookback: int) -> FeatureWindow:
    return FeatureWindow(max(0, w.start_ts - source_lookback), w.end_ts)


def _infer_type(values: set[type], column: str) -> str:
    if not values:
        return "float64"
    if values == {str}:
        return "string"
    if values == {int}:
        return "int64"
    if values <= {int, float}:
        return "float64"
    raise SourceSchemaMismatch(f"column {column!r} mixes types {sorted(t.__name__ for t in values)}")


def resolve_path(path: str, base_dir: Optional[Path]) -> Path:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def read_source(src: SourceDef, window: FeatureWindow, base_dir: Optional[Path] = None) -> Frame:
    """Read every source row with ``window.start <= ts < window.end``.

    ``src.path`` is a directory of ``*.jsonl`` files (read in name order) or a
    single file. Column types come from ``src.schema`` when declared, otherwise
    they are inferred over the whole source so the result does not depend on
    which window is read.
    """
    path = resolve_path(src.path, base_dir)
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
    elif path.is_file():
        files = [path]
    else:
        raise SourceUnavailable(f"source path {path} does not exist")

    raw: list[dict] = []
    try:
        for f in files:
            with open(f, encoding="utf-8") as fh:
                for n, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise SourceSchemaMismatch(f"{f}:{n} is not a JSON object")
                    raw.append(obj)
    except (OSError, json.JSONDecodeError) as e:
        raise SourceUnavailable(f"cannot read source {path}: {e}") from e

    ts_col = src.timestamp_column
    if src.schema is not None:
        schema = [tuple(c) for c in src.schema]
    else:
        seen: dict[str, set] = {}
        for obj in raw:
            for k, v in obj.items():
                kinds = seen.setdefault(k, set())
                if v is not None:
                    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                        raise SourceSchemaMismatch(f"column {k!r} holds unsupported value {v!r}")
                    kinds.add(type(v))
        schema = [(k, _infer_type(kinds, k)) for k, kinds in seen.items()]
        if not raw:
            schema = [(ts_col, "int64")]
    types = dict(schema)
    if ts_col not in types:
        raise SourceSchemaMismatch(f"timestamp column {ts_col!r} missing from source")
    if types[ts_col] != "int64":
        raise SourceSchemaMismatch(f"timestamp column {ts_col!r} must hold integers")

    cols = [c for c, _ in schema]
    rows = []
    for obj in raw:
        ts = obj.get(ts_col)
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise SourceSchemaMismatch(f"row without integer timestamp: {obj!r}")
        if not (window.start_ts <= ts < window.end_ts):
            continue
        try:
            rows.append(tuple(check_value(obj.get(c), types[c]) for c in cols))
        except TypeError as e:
            raise SourceSchemaMismatch(str(e)) from e
    return Frame([tuple(c) for c in schema], rows)


def run_transform(
    fs: FeatureSetSpec,
    source: Frame,
    ctx: TransformContext,
    index_columns: list[tuple[str, str]],
) -> Frame:
    tf = fs.transformation
    if tf.kind == "dsl":
        if not source.rows:
            return Frame([])
        program = dsl.parse(tf.dsl_program)
        bp = dsl.bind(
            program,
            source.schema,
            [c for c, _ in index_columns],
            fs.source.timestamp_column,
            fs.materialization.schedule_interval,
            output_timestamp_column=fs.timestamp_column,
        )
        return dsl.execute(bp, source, ctx.feature_window)
    hook = _TRANSFORMS.get(tf.opaque_id)
    if hook is None:
        raise UnknownTransform(f"no transform hook registered as {tf.opaque_id!r}")
    out = hook(source, ctx)
    if not isinstance(out, Frame):
        raise TransformOutputSchemaError(f"hook {tf.opaque_id!r} returned {type(out).__name__}")
    return out


def to_records(
    fs: FeatureSetSpec,
    frame: Frame,
    window: FeatureWindow,
    now: int,
    index_columns: list[tuple[str, str]],
) -> list[FeatureRecord]:
    """Validate the transform output contract and wrap in-window rows as records."""
    if not frame.rows:
        return []
    out_types = frame.types()
    required = list(index_columns) + [(fs.timestamp_column, "int64")] + list(fs.features)
    missing = [c for c, _ in required if c not in out_types]
    if missing:
        raise TransformOutputSchemaError(f"transform output lacks columns {missing}")
    for c, t in required:
        if out_types[c] != t and not (t == "float64" and out_types[c] == "int64"):
            raise TransformOutputSchemaError(f"column {c!r} is {out_types[c]}, expected {t}")

    cols = frame.columns
    id_pos = [(c, cols.index(c), t) for c, t in index_columns]
    ts_pos = cols.index(fs.timestamp_column)
    feat_pos = [(c, cols.index(c), t) for c, t in fs.features]
    records = []
    seen = set()
    for row in frame.rows:
        ts = row[ts_pos]
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise TransformOutputSchemaError(f"non-integer timestamp {ts!r}")
        if not window.contains(ts):
            continue
        try:
            ids = {c: check_value(row[i], t) for c, i, t in id_pos}
            feats = {c: check_value(row[i], t) for c, i, t in feat_pos}
        except TypeError as e:
            raise TransformOutputSchemaError(str(e)) from e
        if any(v is None for v in ids.values()):
            raise TransformOutputSchemaError(f"null index value in {ids}")
        dedup = (tuple(ids.values()), ts)
        if dedup in seen:
            raise TransformOutputSchemaError(f"duplicate output row for ids={ids} ts={ts}")
        seen.add(dedup)
        if not now > ts:
            raise InvalidRecord(f"creation_ts {now} must be after event_ts {ts}")
        records.append(FeatureRecord(ids, ts, now, feats))
    records.sort(key=FeatureRecord.sort_key)
    return records


def calculate(
    fs: FeatureSetSpec,
    window: FeatureWindow,
    now: int,
    index_columns: list[tuple[str, str]],
    base_dir: Optional[Path] = None,
    job_id: Optional[str] = None,
) -> list[FeatureRecord]:
    """Compute the feature records of ``fs`` for ``window``, all stamped ``creation_ts=now``."""
    source_window = derive_source_window(window, fs.source.source_lookback)
    source = read_source(fs.source, source_window, base_dir)
    ctx = TransformContext(fs.ref, window, source_window, job_id)
    frame = run_transform(fs, source, ctx, index_columns)
    return to_records(fs, frame, window, now, index_columns)
