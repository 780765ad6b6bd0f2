"""Exception hierarchy. Every error carries a ``kind`` used by the CLI."""

from __future__ import annotations


class FeatureStoreError(Exception):
    @property
    def kind(self) -> str:
        return type(self).__name__


# registry
class InvalidSpec(FeatureStoreError):
    pass


class DuplicateVersion(FeatureStoreError):
    pass


class UnknownEntity(FeatureStoreError):
    pass


class SchemaConflict(FeatureStoreError):
    pass


class ImmutableFieldChange(FeatureStoreError):
    pass


class NotFound(FeatureStoreError):
    pass


# dsl
class DslParseError(FeatureStoreError):
    def __init__(self, message: str, line: int, column: int, expected=()):
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        detail = f"{message} at line {line}, column {column}"
        if self.expected:
            detail += f" (expected one of: {', '.join(sorted(self.expected))})"
        super().__init__(detail)


class UnknownColumn(FeatureStoreError):
    pass


class TypeMismatch(FeatureStoreError):
    pass


# compute
class SourceUnavailable(FeatureStoreError):
    pass


class SourceSchemaMismatch(FeatureStoreError):
    pass


class TransformOutputSchemaError(FeatureStoreError):
    pass


class UnknownTransform(FeatureStoreError):
    pass


class InvalidRecord(FeatureStoreError):
    pass


# stores
class StoreIoError(FeatureStoreError):
    pass


# scheduler
class NoSinkEnabled(FeatureStoreError):
    pass


class OverlapWithRunningBackfill(FeatureStoreError):
    pass


class InvalidState(FeatureStoreError):
    pass


class JobConflict(FeatureStoreError):
    pass


# retrieval
class UnknownFeature(FeatureStoreError):
    pass


class EntityMismatch(FeatureStoreError):
    pass
