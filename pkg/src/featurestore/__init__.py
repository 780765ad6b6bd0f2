"""Single-node feature store: registry, DSL feature calculation, offline/online
materialization with deterministic merges, scheduling and point-in-time retrieval."""

from .dsl import Frame
from .intervals import FeatureWindow, IntervalSet
from .records import FeatureRecord
from .registry import EntityDef, FeatureSetSpec, MaterializationPolicy, SourceDef, TransformDef
from .store import FeatureStore

__all__ = [
    "EntityDef",
    "FeatureRecord",
    "FeatureSetSpec",
    "FeatureStore",
    "FeatureWindow",
    "Frame",
    "IntervalSet",
    "MaterializationPolicy",
    "SourceDef",
    "TransformDef",
]
