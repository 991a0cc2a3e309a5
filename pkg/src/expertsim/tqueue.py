"""Keyed priority queue of expert fetch requests."""

from __future__ import annotations

import heapq
import itertools
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

from .core import ExpertId

# Computed priorities live in (0, 1]; the sentinel strictly dominates them.
MAX_PRIORITY = 2.0


class PrefetchCandidate(NamedTuple):
    expert: ExpertId
    priority: float
    order: int = 0  # secondary key; on-demand fetches use it for token-count ordering

    def sort_key(self) -> Tuple[float, int, ExpertId]:
        return (-self.priority, self.order, self.expert)


class TransferQueue:
    """At most one entry per expert; pops highest priority first.

    Ties fall back to ``order`` and then to ExpertId ordering. Resubmitting an
    expert overwrites its previous entry. Uses the lazy-deletion heap recipe
    from the ``heapq`` docs.
    """

    _REMOVED = object()

    def __init__(self):
        self._heap: List[list] = []
        self._entries: Dict[ExpertId, list] = {}
        self._counter = itertools.count()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, expert: ExpertId) -> bool:
        return expert in self._entries

    def submit(self, expert: ExpertId, priority: float, order: int = 0) -> None:
        if expert in self._entries:
            self._entries.pop(expert)[-1] = self._REMOVED
        cand = PrefetchCandidate(expert, float(priority), order)
        entry = [cand.sort_key(), next(self._counter), cand]
        self._entries[expert] = entry
        heapq.heappush(self._heap, entry)

    def get(self, expert: ExpertId) -> Optional[PrefetchCandidate]:
        entry = self._entries.get(expert)
        return None if entry is None else entry[-1]

    def cancel(self, expert: ExpertId) -> bool:
        entry = self._entries.pop(expert, None)
        if entry is None:
            return False
        entry[-1] = self._REMOVED
        return True

    def cancel_all(self) -> int:
        n = len(self._entries)
        self._heap.clear()
        self._entries.clear()
        return n

    def _prune(self) -> None:
        while self._heap and self._heap[0][-1] is self._REMOVED:
            heapq.heappop(self._heap)

    def peek(self) -> Optional[PrefetchCandidate]:
        self._prune()
        return self._heap[0][-1] if self._heap else None

    def pop(self) -> Optional[PrefetchCandidate]:
        self._prune()
        if not self._heap:
            return None
        cand = heapq.heappop(self._heap)[-1]
        del self._entries[cand.expert]
        return cand

    def items(self) -> List[PrefetchCandidate]:
        """Live entries in dequeue order."""
        return sorted((e[-1] for e in self._entries.values()), key=PrefetchCandidate.sort_key)

    def __iter__(self) -> Iterator[PrefetchCandidate]:
        return iter(self.items())
