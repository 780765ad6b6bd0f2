"""Half-open integer intervals ``[start, end)`` and coalesced interval sets."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Iterator


@dataclass(frozen=True, order=True)
class FeatureWindow:
    """Half-open interval on the event-time axis, in epoch milliseconds."""

    start_ts: int
    end_ts: int

    def __post_init__(self):
        if not (0 <= self.start_ts < self.end_ts):
            raise ValueError(f"invalid window [{self.start_ts}, {self.end_ts})")

    def overlaps(self, other: FeatureWindow) -> bool:
        return self.start_ts < other.end_ts and other.start_ts < self.end_ts

    def contains(self, ts: int) -> bool:
        return self.start_ts <= ts < self.end_ts

    def to_list(self) -> list[int]:
        return [self.start_ts, self.end_ts]


class IntervalSet:
    """Disjoint, coalesced set of half-open intervals."""

    def __init__(self, intervals: Iterable[tuple[int, int]] = ()):
        self._spans: list[tuple[int, int]] = []
        for s, e in intervals:
            self.add(s, e)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self._spans)

    def __len__(self) -> int:
        return len(self._spans)

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalSet) and self._spans == other._spans

    def __repr__(self) -> str:
        return f"IntervalSet({self._spans!r})"

    def spans(self) -> list[tuple[int, int]]:
        return list(self._spans)

    def add(self, start: int, end: int) -> None:
        if start >= end:
            return
        kept = []
        for s, e in self._spans:
            if e < start or s > end:
                kept.append((s, e))
            else:
                # touching spans coalesce too
                start, end = min(s, start), max(e, end)
        kept.append((start, end))
        kept.sort()
        self._spans = kept

    def contains(self, ts: int) -> bool:
        i = bisect_right(self._spans, (ts, float("inf"))) - 1
        return i >= 0 and self._spans[i][0] <= ts < self._spans[i][1]

    def covers(self, start: int, end: int) -> bool:
        return any(s <= start and end <= e for s, e in self._spans)

    def gaps(self, start: int, end: int) -> list[tuple[int, int]]:
        """Sub-intervals of ``[start, end)`` not covered by this set."""
        out = []
        cur = start
        for s, e in self._spans:
            if e <= cur:
                continue
            if s >= end:
                break
            if s > cur:
                out.append((cur, s))
            cur = max(cur, e)
        if cur < end:
            out.append((cur, end))
        return out
