"""Fixed-slab expert cache with safety-guarded eviction.

Every slab holds at most one expert. Resident entries carry a residency
class: Required (inside the current lookahead window), Speculative (recently
fell out of the window, retained for a grace period), or Expired (executed,
or out of grace). Only Expired entries are ever evicted; when space is
needed the victim is the Expired entry with the lowest predictor priority.
The cache holds no timing knowledge: the pipeline issues transfers and
reports readiness back via set_ready/complete_load.
"""
from __future__ import annotations

import heapq

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .errors import ContractError
from .trace import ExpertRef


class ResidencyClass(Enum):
    REQUIRED = "required"
    SPECULATIVE = "speculative"
    EXPIRED = "expired"


_CLASS_RANK = {
    ResidencyClass.EXPIRED: 0,
    ResidencyClass.SPECULATIVE: 1,
    ResidencyClass.REQUIRED: 2,
}


class SlabState(Enum):
    FREE = "free"
    LOADING = "loading"
    RESIDENT = "resident"


class LookupStatus(Enum):
    HIT = "hit"
    IN_FLIGHT = "in_flight"
    MISS = "miss"


class LookupResult(NamedTuple):
    status: LookupStatus
    ready_time: float | None


class RequestStatus(Enum):
    ALREADY_RESIDENT = "already_resident"
    ENQUEUED = "enqueued"
    REJECTED = "rejected"


class RequestResult(NamedTuple):
    status: RequestStatus
    slab: int | None
    evicted: ExpertRef | None


@dataclass
class SlabEntry:
    slab: int
    key: ExpertRef | None = None
    state: SlabState = SlabState.FREE
    cls: ResidencyClass = ResidencyClass.EXPIRED
    priority: float = 0.0
    ready_time: float | None = None
    last_window_step: int = -1
    executed: bool = False
    seq: int = -1  # insertion order, for the FIFO eviction variant


class ExpertCache:
    """Single-owner mutable cache; all mutation goes through the event loop.

    Victim candidates sit in a lazy-deletion heap: entries are pushed when
    they become Expired and validated against live state on pop, so class
    churn never requires a rebuild.
    """

    def __init__(self, num_slabs: int, victim_policy: str = "priority"):
        if num_slabs < 1:
            raise ContractError("num_slabs must be >= 1")
        if victim_policy not in ("priority", "fifo"):
            raise ContractError("victim_policy must be 'priority' or 'fifo'")
        self.num_slabs = num_slabs
        self.victim_policy = victim_policy
        self.slabs = [SlabEntry(slab=i) for i in range(num_slabs)]
        self.index: dict[ExpertRef, int] = {}
        self.step = 0
        self.evictions = 0
        self._seq = 0
        self._free = list(range(num_slabs - 1, -1, -1))  # pop() yields slab 0 first
        self._victims: list[tuple] = []  # heap of (order_key, slab, key)

    # -- queries ------------------------------------------------------------

    def lookup(self, key: ExpertRef) -> LookupResult:
        slab = self.index.get(key)
        if slab is None:
            return LookupResult(LookupStatus.MISS, None)
        entry = self.slabs[slab]
        if entry.state is SlabState.RESIDENT:
            return LookupResult(LookupStatus.HIT, entry.ready_time)
        return LookupResult(LookupStatus.IN_FLIGHT, entry.ready_time)

    def entry(self, key: ExpertRef) -> SlabEntry | None:
        slab = self.index.get(key)
        return self.slabs[slab] if slab is not None else None

    def occupancy(self) -> int:
        return len(self.index)

    def resident_keys(self) -> list[ExpertRef]:
        return sorted(e.key for e in self.slabs if e.state is SlabState.RESIDENT)

    # -- mutation -----------------------------------------------------------

    def _order_key(self, entry: SlabEntry) -> tuple:
        if self.victim_policy == "fifo":
            return (entry.seq,)
        return (entry.priority, entry.key.layer, entry.key.expert)

    def _note_evictable(self, entry: SlabEntry) -> None:
        heapq.heappush(self._victims, (self._order_key(entry), entry.slab, entry.key))

    def _clean_victims(self) -> None:
        while self._victims:
            order, slab, key = self._victims[0]
            entry = self.slabs[slab]
            if (
                entry.state is SlabState.RESIDENT
                and entry.cls is ResidencyClass.EXPIRED
                and entry.key == key
                and self._order_key(entry) == order
            ):
                return
            heapq.heappop(self._victims)

    def select_victim(self) -> int | None:
        """Slab id of the evictable entry, or None.

        Priority policy: lowest priority among resident Expired entries,
        ties by smaller layer then smaller expert. FIFO policy: oldest
        insertion among resident Expired entries.
        """
        self._clean_victims()
        return self._victims[0][1] if self._victims else None

    def request_load(
        self, key: ExpertRef, priority: float, cls: ResidencyClass
    ) -> RequestResult:
        """Reserve a slab for ``key`` or report it already present.

        On AlreadyResident the class is upgraded monotonically (Required
        beats Speculative) and the priority refreshed. A fresh request takes
        a free slab, else evicts the selected victim; with no victim the
        request is Rejected and the caller decides the fallback.
        """
        if cls is ResidencyClass.EXPIRED:
            raise ContractError("cannot request a load with class Expired")
        existing = self.index.get(key)
        if existing is not None:
            entry = self.slabs[existing]
            if _CLASS_RANK[cls] > _CLASS_RANK[entry.cls]:
                entry.cls = cls
            entry.priority = priority
            entry.last_window_step = self.step
            entry.executed = False
            return RequestResult(RequestStatus.ALREADY_RESIDENT, existing, None)

        slab = self._free.pop() if self._free else None
        evicted = None
        if slab is None:
            slab = self.select_victim()
            if slab is None:
                return RequestResult(RequestStatus.REJECTED, None, None)
            evicted = self.slabs[slab].key
            self._evict(slab)
            self._free.pop()

        entry = self.slabs[slab]
        entry.key = key
        entry.state = SlabState.LOADING
        entry.cls = cls
        entry.priority = priority
        entry.ready_time = None
        entry.last_window_step = self.step
        entry.executed = False
        entry.seq = self._seq
        self._seq += 1
        self.index[key] = slab
        return RequestResult(RequestStatus.ENQUEUED, slab, evicted)

    def _evict(self, slab: int) -> None:
        entry = self.slabs[slab]
        if entry.cls is not ResidencyClass.EXPIRED:
            raise ContractError("eviction safety: victim must be Expired")
        self.evictions += 1
        del self.index[entry.key]
        entry.key = None
        entry.state = SlabState.FREE
        entry.ready_time = None
        entry.executed = False
        self._free.append(slab)

    def set_ready(self, key: ExpertRef, ready_time: float) -> None:
        """Record when an issued transfer will land (entry stays in flight)."""
        entry = self.entry(key)
        if entry is None or entry.state is not SlabState.LOADING:
            raise ContractError("set_ready requires a loading entry")
        entry.ready_time = ready_time

    def complete_load(self, key: ExpertRef, time: float) -> None:
        entry = self.entry(key)
        if entry is None or entry.state is not SlabState.LOADING:
            raise ContractError("complete_load requires a loading entry")
        entry.state = SlabState.RESIDENT
        entry.ready_time = time

    def cancel_load(self, key: ExpertRef) -> None:
        """Drop a reserved-but-unissued load; frees the slab."""
        entry = self.entry(key)
        if entry is None or entry.state is not SlabState.LOADING:
            raise ContractError("cancel_load requires a loading entry")
        del self.index[key]
        entry.key = None
        entry.state = SlabState.FREE
        entry.ready_time = None
        self._free.append(entry.slab)

    def mark_executed(self, key: ExpertRef) -> None:
        """Executed entries become Expired and thus evictable. Idempotent."""
        entry = self.entry(key)
        if entry is None or entry.state is not SlabState.RESIDENT:
            raise ContractError("mark_executed requires a resident key")
        entry.cls = ResidencyClass.EXPIRED
        entry.executed = True
        self._note_evictable(entry)

    def reclassify(
        self,
        window_keys,
        speculative_grace: int,
        priorities=None,
    ) -> None:
        """Refresh every resident entry's class against the current window.

        In-window entries become Required; out-of-window entries that have
        not executed and were in a window within the last
        ``speculative_grace`` steps stay Speculative; everything else is
        Expired. ``priorities`` may map keys to fresh predictor scores.
        """
        self.step += 1
        window = set(window_keys)
        for entry in self.slabs:
            if entry.state is not SlabState.RESIDENT:
                continue
            if priorities is not None and entry.key in priorities:
                entry.priority = priorities[entry.key]
            if entry.key in window:
                entry.cls = ResidencyClass.REQUIRED
                entry.last_window_step = self.step
                entry.executed = False
            elif (
                not entry.executed
                and entry.last_window_step >= 0
                and self.step - entry.last_window_step <= speculative_grace
            ):
                entry.cls = ResidencyClass.SPECULATIVE
            else:
                entry.cls = ResidencyClass.EXPIRED
                self._note_evictable(entry)
