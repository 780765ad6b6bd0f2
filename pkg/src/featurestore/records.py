"""Materialized feature records and their canonical on-disk encoding.

A record is uniquely identified inside one feature set version by
``(ids, event_ts, creation_ts)``. Both stores key rows by the canonical id
encoding produced by :func:`encode_ids`: index values in entity column order,
rendered with ``str`` and joined by the ASCII unit separator (``0x1f``).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

ID_SEPARATOR = "\x1f"

FeatureSetRef = tuple[str, int]


def encode_ids(values: Iterable[Any]) -> str:
    return ID_SEPARATOR.join(str(v) for v in values)


@dataclass(frozen=True)
class FeatureRecord:
    ids: dict[str, Any]
    event_ts: int
    creation_ts: int
    features: dict[str, Any]

    @property
    def key(self) -> str:
        return encode_ids(self.ids.values())

    @property
    def full_key(self) -> tuple[str, int, int]:
        return (self.key, self.event_ts, self.creation_ts)

    @property
    def recency(self) -> tuple[int, int]:
        """Total order used for "latest": lexicographic (event_ts, creation_ts)."""
        return (self.event_ts, self.creation_ts)

    def sort_key(self) -> tuple:
        return (tuple(self.ids.values()), self.event_ts, self.creation_ts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ids": dict(self.ids),
            "event_ts": self.event_ts,
            "creation_ts": self.creation_ts,
            "features": dict(self.features),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureRecord:
        return cls(dict(d["ids"]), int(d["event_ts"]), int(d["creation_ts"]), dict(d["features"]))


def dumps(obj: Any) -> str:
    """Canonical JSON: compact, insertion-ordered, UTF-8, no NaN/Infinity."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(path: Path, records: Iterable[FeatureRecord]) -> None:
    atomic_write(path, "".join(dumps(r.to_dict()) + "\n" for r in records))


def read_records(path: Path) -> list[FeatureRecord]:
    with open(path, encoding="utf-8") as f:
        return [FeatureRecord.from_dict(json.loads(line)) for line in f if line.strip()]


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_json(path: Path, obj: Any) -> None:
    atomic_write(path, dumps(obj) + "\n")
