"""Versioned asset registry: entities and feature sets.

Assets are stored one JSON document per version under
``<root>/registry/{entities,feature_sets}/<name>/<version>.json``. A version is
immutable once written except for its description and materialization policy.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from . import dsl
from .errors import (
    DuplicateVersion,
    ImmutableFieldChange,
    InvalidSpec,
    NotFound,
    SchemaConflict,
    UnknownEntity,
)
from .records import read_json, write_json

_NAME_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.-]*$")
INDEX_TYPES = ("string", "int64")
FEATURE_TYPES = ("int64", "float64", "string")


@dataclass(frozen=True)
class EntityDef:
    name: str
    version: int
    index_columns: tuple[tuple[str, str], ...]
    description: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "index_columns": [list(c) for c in self.index_columns],
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EntityDef:
        return cls(
            d["name"],
            int(d["version"]),
            tuple((c, t) for c, t in d["index_columns"]),
            d.get("description", ""),
        )


@dataclass(frozen=True)
class SourceDef:
    path: str
    timestamp_column: str
    source_lookback: int = 0
    source_delay: int = 0
    # optional declared column types; inferred from the data when absent
    schema: Optional[tuple[tuple[str, str], ...]] = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "path": self.path,
            "timestamp_column": self.timestamp_column,
            "source_lookback": self.source_lookback,
            "source_delay": self.source_delay,
        }
        if self.schema is not None:
            d["schema"] = [list(c) for c in self.schema]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SourceDef:
        schema = d.get("schema")
        return cls(
            d["path"],
            d["timestamp_column"],
            d.get("source_lookback", 0),
            d.get("source_delay", 0),
            tuple((c, t) for c, t in schema) if schema is not None else None,
        )


@dataclass(frozen=True)
class TransformDef:
    kind: str
    dsl_program: Optional[str] = None
    opaque_id: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "dsl_program": self.dsl_program, "opaque_id": self.opaque_id}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TransformDef:
        return cls(d["kind"], d.get("dsl_program"), d.get("opaque_id"))


@dataclass(frozen=True)
class MaterializationPolicy:
    offline_enabled: bool = False
    online_enabled: bool = False
    schedule_interval: int = 86_400_000
    ttl: Optional[int] = None
    materialization_delay: int = 0
    schedule_origin: int = 0

    @property
    def sinks(self) -> list[str]:
        return [s for s, on in (("offline", self.offline_enabled), ("online", self.online_enabled)) if on]

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MaterializationPolicy:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidSpec(f"unknown materialization fields {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FeatureSetSpec:
    name: str
    version: int
    entities: tuple[tuple[str, int], ...]
    source: SourceDef
    transformation: TransformDef
    features: tuple[tuple[str, str], ...]
    timestamp_column: str
    materialization: MaterializationPolicy = field(default_factory=MaterializationPolicy)
    description: str = ""

    @property
    def ref(self) -> tuple[str, int]:
        return (self.name, self.version)

    @property
    def feature_names(self) -> list[str]:
        return [n for n, _ in self.features]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "entities": [{"name": n, "version": v} for n, v in self.entities],
            "source": self.source.to_dict(),
            "transformation": self.transformation.to_dict(),
            "features": [list(f) for f in self.features],
            "timestamp_column": self.timestamp_column,
            "materialization": self.materialization.to_dict(),
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureSetSpec:
        try:
            return cls(
                d["name"],
                int(d["version"]),
                tuple((e["name"], int(e["version"])) for e in d["entities"]),
                SourceDef.from_dict(d["source"]),
                TransformDef.from_dict(d["transformation"]),
                tuple((n, t) for n, t in d["features"]),
                d["timestamp_column"],
                MaterializationPolicy.from_dict(d.get("materialization", {})),
                d.get("description", ""),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidSpec(f"malformed feature set document: {e}") from e


MUTABLE_FIELDS = frozenset({"description", "materialization"})


def _check_name(name: str, what: str):
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise InvalidSpec(f"invalid {what} name {name!r}")


def _check_version(version):
    if not isinstance(version, int) or isinstance(version, bool) or version < 1:
        raise InvalidSpec(f"version must be a positive integer, got {version!r}")


def validate_policy(p: MaterializationPolicy):
    if not isinstance(p.schedule_interval, int) or p.schedule_interval <= 0:
        raise InvalidSpec("schedule_interval must be a positive integer")
    if p.ttl is not None and (not isinstance(p.ttl, int) or p.ttl <= 0):
        raise InvalidSpec("ttl must be a positive integer when set")
    if not isinstance(p.materialization_delay, int) or p.materialization_delay < 0:
        raise InvalidSpec("materialization_delay must be >= 0")
    if not isinstance(p.schedule_origin, int) or p.schedule_origin < 0:
        raise InvalidSpec("schedule_origin must be >= 0")


def _check_lookback(spec: FeatureSetSpec, program: dsl.DslProgram):
    need = dsl.required_lookback(program, spec.materialization.schedule_interval)
    if spec.source.source_lookback < need:
        raise InvalidSpec(
            f"source_lookback {spec.source.source_lookback} is shorter than the "
            f"transformation horizon {need}"
        )


class Registry:
    def __init__(self, root: Path):
        self.root = Path(root) / "registry"
        self._gate = threading.Lock()

    def _path(self, kind: str, name: str, version: int) -> Path:
        return self.root / kind / name / f"{version}.json"

    # entities -----------------------------------------------------------

    def register_entity(self, entity: EntityDef) -> EntityDef:
        _check_name(entity.name, "entity")
        _check_version(entity.version)
        cols = [c for c, _ in entity.index_columns]
        if not cols:
            raise InvalidSpec("entity needs at least one index column")
        if len(set(cols)) != len(cols):
            raise InvalidSpec(f"duplicate index columns {cols}")
        for c, t in entity.index_columns:
            if t not in INDEX_TYPES:
                raise InvalidSpec(f"index column {c!r} has unsupported type {t!r}")
        with self._gate:
            path = self._path("entities", entity.name, entity.version)
            if path.exists():
                raise DuplicateVersion(f"entity {entity.name} v{entity.version} exists")
            write_json(path, entity.to_dict())
        return entity

    def get_entity(self, name: str, version: int) -> EntityDef:
        path = self._path("entities", name, version)
        if not path.exists():
            raise NotFound(f"entity {name} v{version}")
        return EntityDef.from_dict(read_json(path))

    def list_entities(self, prefix: str = "") -> list[EntityDef]:
        return [EntityDef.from_dict(read_json(p)) for p in self._scan("entities", prefix)]

    # feature sets -------------------------------------------------------

    def index_columns(self, spec: FeatureSetSpec) -> list[tuple[str, str]]:
        cols: list[tuple[str, str]] = []
        for name, version in spec.entities:
            try:
                entity = self.get_entity(name, version)
            except NotFound:
                raise UnknownEntity(f"entity {name} v{version} is not registered") from None
            cols.extend(entity.index_columns)
        names = [c for c, _ in cols]
        if len(set(names)) != len(names):
            raise SchemaConflict(f"entities share index columns: {names}")
        return cols

    def validate_feature_set(self, spec: FeatureSetSpec) -> None:
        _check_name(spec.name, "feature set")
        _check_version(spec.version)
        if not spec.entities:
            raise InvalidSpec("feature set needs at least one entity")
        index = [c for c, _ in self.index_columns(spec)]

        names = spec.feature_names
        if not names:
            raise InvalidSpec("feature set declares no features")
        if len(set(names)) != len(names):
            raise SchemaConflict(f"duplicate feature names {names}")
        for n, t in spec.features:
            if t not in FEATURE_TYPES:
                raise InvalidSpec(f"feature {n!r} has unsupported type {t!r}")
        clash = set(names) & (set(index) | {spec.timestamp_column})
        if spec.timestamp_column in index:
            clash.add(spec.timestamp_column)
        if clash:
            raise SchemaConflict(f"names used by both features and index/timestamp: {sorted(clash)}")

        src = spec.source
        for what, v in (("source_lookback", src.source_lookback), ("source_delay", src.source_delay)):
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise InvalidSpec(f"{what} must be a non-negative integer")
        validate_policy(spec.materialization)

        tf = spec.transformation
        if tf.kind == "dsl":
            if tf.dsl_program is None or tf.opaque_id is not None:
                raise InvalidSpec("dsl transformation needs dsl_program and no opaque_id")
            program = dsl.parse(tf.dsl_program)
            missing = set(names) - set(program.outputs)
            if missing:
                raise SchemaConflict(f"features not produced by the program: {sorted(missing)}")
            _check_lookback(spec, program)
        elif tf.kind == "opaque":
            if tf.opaque_id is None or tf.dsl_program is not None:
                raise InvalidSpec("opaque transformation needs opaque_id and no dsl_program")
        else:
            raise InvalidSpec(f"unknown transformation kind {tf.kind!r}")

    def register_feature_set(self, spec: FeatureSetSpec) -> FeatureSetSpec:
        self.validate_feature_set(spec)
        with self._gate:
            path = self._path("feature_sets", spec.name, spec.version)
            if path.exists():
                raise DuplicateVersion(f"feature set {spec.name} v{spec.version} exists")
            write_json(path, spec.to_dict())
        return spec

    def get_feature_set(self, name: str, version: int) -> FeatureSetSpec:
        path = self._path("feature_sets", name, version)
        if not path.exists():
            raise NotFound(f"feature set {name} v{version}")
        return FeatureSetSpec.from_dict(read_json(path))

    def list_feature_sets(self, prefix: str = "") -> list[FeatureSetSpec]:
        return [FeatureSetSpec.from_dict(read_json(p)) for p in self._scan("feature_sets", prefix)]

    def update_feature_set(self, name: str, version: int, patch: dict[str, Any]) -> FeatureSetSpec:
        known = {f.name for f in fields(FeatureSetSpec)}
        for key in patch:
            if key in known and key not in MUTABLE_FIELDS:
                raise ImmutableFieldChange(f"{key!r} is immutable; register a new version instead")
            if key not in known:
                raise InvalidSpec(f"unknown field {key!r}")
        with self._gate:
            current = self.get_feature_set(name, version)
            updated = current
            if "description" in patch:
                if not isinstance(patch["description"], str):
                    raise InvalidSpec("description must be text")
                updated = replace(updated, description=patch["description"])
            if "materialization" in patch:
                merged = {**current.materialization.to_dict(), **patch["materialization"]}
                policy = MaterializationPolicy.from_dict(merged)
                validate_policy(policy)
                updated = replace(updated, materialization=policy)
                if updated.transformation.kind == "dsl":
                    _check_lookback(updated, dsl.parse(updated.transformation.dsl_program))
            write_json(self._path("feature_sets", name, version), updated.to_dict())
        return updated

    def _scan(self, kind: str, prefix: str) -> list[Path]:
        base = self.root / kind
        if not base.exists():
            return []
        out = []
        for d in sorted(base.iterdir()):
            if d.is_dir() and d.name.startswith(prefix):
                out.extend(sorted(d.glob("*.json"), key=lambda p: int(p.stem)))
        return out
