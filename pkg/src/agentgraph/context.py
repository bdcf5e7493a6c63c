"""Context adapters: one query/ingest interface over heterogeneous sources.

A context source yields :class:`ContextUnit` records (one retrievable passage
each). The in-memory reference adapter scores by token overlap and is a pure
function of (store contents, request), with a stable id tie-break, so results
are reproducible. Real memory/retrieval/tool backends plug in behind the same
interface.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol

SOURCE_KINDS = ("memory", "retrieval", "tool_protocol")

_TOKEN = re.compile(r"[a-z0-9]+")


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class ContextUnit:
    id: str
    source_kind: str
    content: str
    metadata: dict[str, str] = field(default_factory=dict)
    score: float = 0.0

    def __post_init__(self) -> None:
        if not self.content:
            raise ContextError("context unit content must be non-empty")
        if self.source_kind not in SOURCE_KINDS:
            raise ContextError(f"unknown source kind '{self.source_kind}'")
        if not 0.0 <= self.score <= 1.0:
            raise ContextError("score must lie in [0, 1]")


@dataclass(frozen=True)
class ContextRequest:
    query: str
    top_k: int = 3
    source_filter: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ContextError("top_k must be >= 1")


class ContextAdapter(Protocol):
    def query(self, request: ContextRequest) -> list[ContextUnit]: ...

    def ingest(self, unit: ContextUnit) -> str: ...


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


def overlap_score(query: str, content: str) -> float:
    """Share of query terms present in the content (0 when the query is empty)."""
    query_terms = _tokens(query)
    if not query_terms:
        return 0.0
    return len(query_terms & _tokens(content)) / len(query_terms)


class InMemoryContextAdapter:
    """Reference store: dict-backed, deterministic, serialized ingests."""

    def __init__(self, units: Iterable[ContextUnit] = ()):
        self._units: dict[str, ContextUnit] = {}
        self._lock = threading.Lock()
        self.notes: list[str] = []
        for unit in units:
            self.ingest(unit)

    def __len__(self) -> int:
        return len(self._units)

    def ingest(self, unit: ContextUnit) -> str:
        with self._lock:
            if unit.id in self._units:
                self.notes.append(f"replaced context unit '{unit.id}'")
            self._units[unit.id] = unit
        return unit.id

    def query(self, request: ContextRequest) -> list[ContextUnit]:
        with self._lock:
            units = list(self._units.values())
        if request.source_filter is not None:
            units = [u for u in units if u.source_kind in request.source_filter]
        scored = [replace(u, score=overlap_score(request.query, u.content)) for u in units]
        scored.sort(key=lambda u: (-u.score, u.id))
        return scored[: request.top_k]
