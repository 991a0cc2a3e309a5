"""
Discrete-event model of the expert memory hierarchy.

Each GPU owns a fixed number of expert slots and one DRAM->GPU link. An
optional SSD->DRAM link feeds host memory. Links move one transfer at a time
in whole chunks; time is integer nanoseconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from .core import ExpertId, ModelShape
from .tqueue import MAX_PRIORITY, PrefetchCandidate, TransferQueue

NS_PER_S = 1_000_000_000
DRAM = -1  # destination id for SSD->DRAM transfers


class PolicyContractError(RuntimeError):
    """A policy asked the hierarchy to do something illegal; aborts the run."""


class ProtectedSlot(PolicyContractError):
    pass


class ExecutingExpert(PolicyContractError):
    pass


class Deadlock(PolicyContractError):
    pass


@dataclass(frozen=True)
class HardwareSpec:
    expert_size_bytes: int = 32_000_000
    link_bandwidth_bytes_per_s: int = 32_000_000_000
    chunk_size_bytes: int = 2_000_000
    gpu_buffer_slots: int = 64
    n_gpus: int = 1
    expert_compute_latency_s: float = 0.001
    dense_layer_latency_s: float = 0.0002
    ssd_bandwidth_bytes_per_s: Optional[int] = None  # None disables the SSD tier

    def __post_init__(self):
        for name in ("expert_size_bytes", "link_bandwidth_bytes_per_s", "chunk_size_bytes",
                     "gpu_buffer_slots", "n_gpus"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.expert_compute_latency_s < 0 or self.dense_layer_latency_s < 0:
            raise ValueError("latencies must be non-negative")
        if self.ssd_bandwidth_bytes_per_s is not None and self.ssd_bandwidth_bytes_per_s <= 0:
            raise ValueError("ssd_bandwidth_bytes_per_s must be positive when set")

    @property
    def expert_compute_ns(self) -> int:
        return round(self.expert_compute_latency_s * NS_PER_S)

    @property
    def dense_layer_ns(self) -> int:
        return round(self.dense_layer_latency_s * NS_PER_S)

    @property
    def fetch_ns(self) -> int:
        """DRAM->GPU time for one whole expert."""
        return transfer_ns(self.expert_size_bytes, self.link_bandwidth_bytes_per_s)

    def to_dict(self) -> dict:
        return {
            "expert_size_bytes": self.expert_size_bytes,
            "link_bandwidth_bytes_per_s": self.link_bandwidth_bytes_per_s,
            "chunk_size_bytes": self.chunk_size_bytes,
            "gpu_buffer_slots": self.gpu_buffer_slots,
            "n_gpus": self.n_gpus,
            "expert_compute_latency_s": self.expert_compute_latency_s,
            "dense_layer_latency_s": self.dense_layer_latency_s,
            "ssd_bandwidth_bytes_per_s": self.ssd_bandwidth_bytes_per_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown hardware keys: {sorted(unknown)}")
        return cls(**d)


def transfer_ns(nbytes: int, bandwidth: int) -> int:
    return -(-nbytes * NS_PER_S // bandwidth)


class Residency(str, enum.Enum):
    EMPTY = "empty"
    TRANSFERRING = "transferring"
    RESIDENT = "resident"


@dataclass
class SlotState:
    occupant: Optional[ExpertId] = None
    residency: Residency = Residency.EMPTY
    bytes_done: int = 0
    cache_priority: float = 0.0
    protected: bool = False  # not-yet-consumed prefetch
    prefetch_priority: float = 0.0
    loaded_ns: int = 0
    last_used_ns: int = -1
    uses: int = 0


@dataclass
class Transfer:
    expert: ExpertId
    source: str  # "ssd" or "dram"
    dest: int  # GPU index, or DRAM
    size: int
    priority: float
    order: int
    start_ns: int
    end_ns: int
    slot: Optional[int] = None
    cancelled: bool = False
    charged: int = 0

    @property
    def on_demand(self) -> bool:
        return self.priority >= MAX_PRIORITY


@dataclass
class Lookup:
    status: Residency
    fraction: float = 0.0

    @property
    def hit(self) -> bool:
        return self.status == Residency.RESIDENT


class Link:
    """One serialized transfer channel with a keyed priority queue in front of it.

    ``starter(candidate, t)`` turns the queue head into a Transfer. It may
    return ``Link.SKIP`` (head consumed without a transfer) or ``None`` (head
    blocked, retry on the next kick).
    """

    SKIP = object()

    def __init__(self, name: str, bandwidth: int, chunk: int, expert_size: int,
                 starter: Optional[Callable] = None, on_done: Optional[Callable] = None):
        self.name = name
        self.bandwidth = bandwidth
        self.chunk = chunk
        self.expert_size = expert_size
        self.queue = TransferQueue()
        # standing prefetch plan, consumed lazily in priority order alongside the queue;
        # replacing it is equivalent to cancelling every queued plan entry and resubmitting
        self.plan: List[PrefetchCandidate] = []
        self.plan_pos = 0
        self.inflight: Optional[Transfer] = None
        self.bytes_charged = 0
        self.busy_ns = 0
        self.completed: List[Transfer] = []
        self.starter = starter or self._plain_start
        self.on_done = on_done

    def _plain_start(self, cand: PrefetchCandidate, t: int) -> Transfer:
        return Transfer(cand.expert, "dram", 0, self.expert_size, cand.priority, cand.order,
                        t, t + transfer_ns(self.expert_size, self.bandwidth))

    def submit(self, expert: ExpertId, priority: float, order: int = 0) -> None:
        self.queue.submit(expert, priority, order)

    def next_event(self) -> Optional[int]:
        return None if self.inflight is None else self.inflight.end_ns

    def bytes_at(self, t: int) -> int:
        """Exact bytes of the in-flight transfer moved by time ``t``."""
        tr = self.inflight
        if tr is None:
            return 0
        moved = max(t - tr.start_ns, 0) * self.bandwidth // NS_PER_S
        return min(moved, tr.size)

    def chunk_bytes_at(self, t: int) -> int:
        tr = self.inflight
        if tr is None:
            return 0
        moved = self.bytes_at(t)
        if tr.cancelled:
            moved = min(moved, tr.charged)
        return tr.size if moved >= tr.size else moved // self.chunk * self.chunk

    def pending_plan(self) -> List[PrefetchCandidate]:
        return self.plan[self.plan_pos:]

    def set_plan(self, cands: List[PrefetchCandidate]) -> None:
        """Replace the standing plan; ``cands`` must already be in dequeue order."""
        self.plan = list(cands)
        self.plan_pos = 0

    def drop_from_plan(self, expert: ExpertId) -> bool:
        rest = self.plan[self.plan_pos:]
        kept = [c for c in rest if c.expert != expert]
        if len(kept) == len(rest):
            return False
        self.plan, self.plan_pos = kept, 0
        return True

    def head(self) -> Tuple[Optional[PrefetchCandidate], bool]:
        """Next candidate to start and whether it comes from the plan."""
        q = self.queue.peek()
        while self.plan_pos < len(self.plan) and self.plan[self.plan_pos].expert in self.queue:
            self.plan_pos += 1  # an explicit submission overrides the plan entry
        p = self.plan[self.plan_pos] if self.plan_pos < len(self.plan) else None
        if p is None:
            return q, False
        if q is None or p.sort_key() < q.sort_key():
            return p, True
        return q, False

    def __len__(self) -> int:
        return len(self.queue) + len(self.plan) - self.plan_pos

    def __contains__(self, expert: ExpertId) -> bool:
        return expert in self.queue or any(c.expert == expert for c in self.plan[self.plan_pos:])

    def kick(self, t: int) -> None:
        while self.inflight is None:
            cand, from_plan = self.head()
            if cand is None:
                return
            tr = self.starter(cand, t)
            if tr is None:
                return
            if from_plan:
                self.plan_pos += 1
            else:
                self.queue.pop()
            if tr is Link.SKIP:
                continue
            self.inflight = tr

    def step(self) -> Transfer:
        """Finish the in-flight transfer (completion or cut) and start the next one."""
        tr = self.inflight
        assert tr is not None
        self.inflight = None
        if not tr.cancelled:
            tr.charged = tr.size
        self.bytes_charged += tr.charged
        self.busy_ns += tr.end_ns - tr.start_ns
        self.completed.append(tr)
        if self.on_done is not None:
            self.on_done(self, tr)
        self.kick(tr.end_ns)
        return tr

    def advance(self, until: int) -> List[Transfer]:
        done = []
        while self.inflight is not None and self.inflight.end_ns <= until:
            done.append(self.step())
        self.kick(until)
        return done

    def cut(self, t: int) -> int:
        """Stop the in-flight transfer at the next chunk boundary after ``t``; returns bytes charged."""
        tr = self.inflight
        assert tr is not None
        if tr.cancelled:
            return tr.charged
        moved = self.bytes_at(t)
        charged = min(tr.size, -(-moved // self.chunk) * self.chunk)
        tr.cancelled = True
        tr.charged = charged
        tr.end_ns = tr.start_ns + transfer_ns(charged, self.bandwidth)
        return charged

    def uncut(self) -> None:
        """Resume a cut transfer whose chunk boundary has not been reached yet."""
        tr = self.inflight
        assert tr is not None and tr.cancelled
        tr.cancelled = False
        tr.charged = 0
        tr.end_ns = tr.start_ns + transfer_ns(tr.size, self.bandwidth)

    def cancel(self, expert: ExpertId, t: int) -> str:
        if self.queue.cancel(expert) | self.drop_from_plan(expert):
            return "dequeued"
        if self.inflight is not None and self.inflight.expert == expert:
            self.cut(t)
            return "cut-at-chunk"
        return "not-found"


def link_advance(link: Link, until: int) -> Tuple[List[Transfer], int]:
    """Run ``link`` up to ``until``; returns finished transfers and the bytes they moved."""
    before = link.bytes_charged
    done = link.advance(until)
    return done, link.bytes_charged - before


def cancel_transfer(link: Link, expert: ExpertId, t: int) -> str:
    return link.cancel(expert, t)


class GpuBuffer:
    def __init__(self, n_slots: int, expert_size: int):
        self.slots = [SlotState() for _ in range(n_slots)]
        self.where: Dict[ExpertId, int] = {}
        self.expert_size = expert_size
        self.version = 0  # bumped on every occupy/release
        self.protected: Dict[ExpertId, int] = {}  # protected occupant -> slot

    def __len__(self) -> int:
        return len(self.slots)

    def slot_of(self, expert: ExpertId) -> Optional[SlotState]:
        i = self.where.get(expert)
        return None if i is None else self.slots[i]

    def free_slot(self) -> Optional[int]:
        if len(self.where) >= len(self.slots):
            return None
        for i, s in enumerate(self.slots):
            if s.residency == Residency.EMPTY:
                return i
        return None

    def occupy(self, i: int, expert: ExpertId, t: int) -> None:
        s = self.slots[i]
        if s.residency != Residency.EMPTY:
            raise PolicyContractError(f"slot {i} is not empty")
        self.slots[i] = SlotState(occupant=expert, residency=Residency.TRANSFERRING, loaded_ns=t)
        self.where[expert] = i
        self.version += 1

    def release(self, i: int) -> None:
        s = self.slots[i]
        if s.occupant is not None:
            self.where.pop(s.occupant, None)
            self.protected.pop(s.occupant, None)
        self.slots[i] = SlotState()
        self.version += 1

    def protect(self, i: int, priority: float) -> None:
        s = self.slots[i]
        s.protected = True
        s.prefetch_priority = priority
        self.protected[s.occupant] = i

    def unprotect(self, i: int) -> None:
        s = self.slots[i]
        s.protected = False
        self.protected.pop(s.occupant, None)

    def occupied(self) -> int:
        return sum(1 for s in self.slots if s.residency != Residency.EMPTY)

    def residents(self) -> List[Tuple[int, SlotState]]:
        return [(i, s) for i, s in enumerate(self.slots) if s.residency == Residency.RESIDENT]


VictimFn = Callable[["MemoryHierarchy", int, PrefetchCandidate], Optional[int]]


class MemoryHierarchy:
    """GPU buffers plus links, advanced on one logical timeline.

    ``choose_victim(hier, gpu, candidate)`` is supplied by the engine; it
    returns a slot index to free for the candidate, or None to hold it back.
    """

    def __init__(self, shape: ModelShape, hw: HardwareSpec, choose_victim: VictimFn,
                 event_log: Optional[list] = None):
        self.shape = shape
        self.hw = hw
        self.choose_victim = choose_victim
        self.log = event_log
        self.now = 0
        self.buffers = [GpuBuffer(hw.gpu_buffer_slots, hw.expert_size_bytes) for _ in range(hw.n_gpus)]
        self.links = [
            Link(f"dram->gpu{g}", hw.link_bandwidth_bytes_per_s, hw.chunk_size_bytes,
                 hw.expert_size_bytes, starter=self._gpu_starter(g), on_done=self._gpu_done(g))
            for g in range(hw.n_gpus)
        ]
        self.ssd: Optional[Link] = None
        self.dram: Optional[Set[ExpertId]] = None
        self._awaiting_dram: Dict[ExpertId, PrefetchCandidate] = {}
        if hw.ssd_bandwidth_bytes_per_s is not None:
            self.ssd = Link("ssd->dram", hw.ssd_bandwidth_bytes_per_s, hw.chunk_size_bytes,
                            hw.expert_size_bytes, starter=self._ssd_starter, on_done=self._ssd_done)
            self.dram = set()
        # experts the compute timeline needs now; never chosen as victims
        self.executing: Optional[ExpertId] = None
        self.needed: Dict[ExpertId, int] = {}
        self.evictions = 0
        self.cancellations = 0
        self.preemptions = 0
        # a blocked queue head is not retried until buffer or policy state changes
        self.version = 0
        self._blocked: List[Optional[tuple]] = [None] * hw.n_gpus

    # -- helpers -----------------------------------------------------------

    def gpu_of(self, expert: ExpertId) -> int:
        return expert.expert_idx % self.hw.n_gpus

    def all_links(self) -> List[Link]:
        return self.links + ([self.ssd] if self.ssd is not None else [])

    def emit(self, t: int, event: str, **kw) -> None:
        if self.log is not None:
            rec = {"t_ns": t, "event": event}
            for k, v in kw.items():
                rec[k] = str(v) if isinstance(v, ExpertId) else v
            self.log.append(rec)

    def touch(self) -> None:
        """Signal a change that may unblock a held-back fetch (protection, priorities, routing)."""
        self.version += 1

    def in_dram(self, expert: ExpertId) -> bool:
        return self.dram is None or expert in self.dram

    # -- link callbacks ------------------------------------------------------

    def _gpu_starter(self, g: int):
        def start(cand: PrefetchCandidate, t: int):
            buf = self.buffers[g]
            if cand.expert in buf.where:
                return Link.SKIP  # already resident or on its way
            if not self.in_dram(cand.expert):
                self._stage_from_ssd(cand, t)
                return Link.SKIP
            slot = buf.free_slot()
            if slot is None:
                b = self._blocked[g]
                if b is not None and b[0] is cand and b[1] == self.version and b[2] == buf.version:
                    return None
                slot = self.choose_victim(self, g, cand)
                if slot is None:
                    self._blocked[g] = (cand, self.version, buf.version)
                    return None
                self.evict(g, slot, t, reason="replace")
            buf.occupy(slot, cand.expert, t)
            tr = Transfer(cand.expert, "dram", g, self.hw.expert_size_bytes, cand.priority,
                          cand.order, t, t + self.hw.fetch_ns, slot=slot)
            self.emit(t, "transfer_start", link=self.links[g].name, expert=cand.expert,
                      priority=cand.priority, slot=slot)
            return tr
        return start

    def _gpu_done(self, g: int):
        def done(link: Link, tr: Transfer):
            buf = self.buffers[g]
            slot = buf.slots[tr.slot]
            if tr.cancelled:
                buf.release(tr.slot)
                self.emit(tr.end_ns, "transfer_cut", link=link.name, expert=tr.expert, bytes=tr.charged)
                return
            slot.residency = Residency.RESIDENT
            slot.bytes_done = tr.size
            self.version += 1
            if not tr.on_demand:
                buf.protect(tr.slot, tr.priority)
            self.emit(tr.end_ns, "transfer_done", link=link.name, expert=tr.expert, slot=tr.slot)
        return done

    def _stage_from_ssd(self, cand: PrefetchCandidate, t: int) -> None:
        self._awaiting_dram[cand.expert] = cand
        assert self.ssd is not None
        inflight = self.ssd.inflight
        if inflight is not None and inflight.expert == cand.expert:
            if inflight.cancelled:
                self.ssd.uncut()
        else:
            self.ssd.submit(cand.expert, cand.priority, cand.order)
            if cand.priority >= MAX_PRIORITY:
                self._preempt(self.ssd, cand.expert, t)
            self.ssd.kick(t)

    def _ssd_starter(self, cand: PrefetchCandidate, t: int):
        if self.in_dram(cand.expert):
            return Link.SKIP
        assert self.ssd is not None
        self.emit(t, "transfer_start", link=self.ssd.name, expert=cand.expert, priority=cand.priority)
        return Transfer(cand.expert, "ssd", DRAM, self.hw.expert_size_bytes, cand.priority, cand.order,
                        t, t + transfer_ns(self.hw.expert_size_bytes, self.ssd.bandwidth))

    def _ssd_done(self, link: Link, tr: Transfer) -> None:
        if tr.cancelled:
            self.emit(tr.end_ns, "transfer_cut", link=link.name, expert=tr.expert, bytes=tr.charged)
            return
        assert self.dram is not None
        self.dram.add(tr.expert)
        self.emit(tr.end_ns, "transfer_done", link=link.name, expert=tr.expert)
        cand = self._awaiting_dram.pop(tr.expert, None)
        if cand is not None:
            g = self.gpu_of(tr.expert)
            self.links[g].submit(cand.expert, cand.priority, cand.order)
            if cand.priority >= MAX_PRIORITY:
                self._preempt(self.links[g], cand.expert, tr.end_ns)
            self.links[g].kick(tr.end_ns)

    # -- timeline ------------------------------------------------------------

    def _next_link(self) -> Optional[Link]:
        best, best_t = None, None
        for link in self.all_links():
            t = link.next_event()
            if t is not None and (best_t is None or t < best_t):
                best, best_t = link, t
        return best

    def advance(self, until: int) -> None:
        if until < self.now:
            raise ValueError(f"time went backwards: {until} < {self.now}")
        while True:
            link = self._next_link()
            if link is None or link.next_event() > until:
                break
            self.now = link.next_event()
            link.step()
        self.now = until
        self.kick()

    def kick(self) -> None:
        for link in self.all_links():
            link.kick(self.now)

    def step_one(self) -> bool:
        """Process the earliest pending link event; False if nothing is pending."""
        link = self._next_link()
        if link is None:
            return False
        self.now = link.next_event()
        link.step()
        self.kick()
        return True

    # -- operations ----------------------------------------------------------

    def lookup(self, expert: ExpertId) -> Lookup:
        buf = self.buffers[self.gpu_of(expert)]
        slot = buf.slot_of(expert)
        if slot is None:
            return Lookup(Residency.EMPTY)
        if slot.residency == Residency.RESIDENT:
            return Lookup(Residency.RESIDENT, 1.0)
        link = self.links[self.gpu_of(expert)]
        done = link.chunk_bytes_at(self.now) if link.inflight and link.inflight.expert == expert else 0
        slot.bytes_done = done
        return Lookup(Residency.TRANSFERRING, done / buf.expert_size)

    def _preempt(self, link: Link, expert: ExpertId, t: int) -> None:
        """On-demand fetches cut an unrelated in-flight prefetch at its next chunk boundary."""
        tr = link.inflight
        if tr is None or tr.expert == expert or tr.on_demand or tr.cancelled:
            return
        if tr.expert in self.needed or tr.expert == self.executing:
            return
        link.cut(t)
        self.preemptions += 1
        # still a valid candidate; it restarts from zero later
        link.queue.submit(tr.expert, tr.priority, tr.order)
        self.emit(t, "preempt", link=link.name, expert=tr.expert, by=expert)

    def submit(self, expert: ExpertId, priority: float, order: int = 0) -> None:
        g = self.gpu_of(expert)
        link = self.links[g]
        slot = self.buffers[g].slot_of(expert)
        if slot is not None:
            tr = link.inflight
            if tr is not None and tr.expert == expert:
                if tr.cancelled:
                    link.uncut()
                tr.priority = max(tr.priority, priority)
            return  # already resident or in flight to this GPU
        if expert in self._awaiting_dram:
            self._awaiting_dram[expert] = PrefetchCandidate(expert, priority, order)
            if self.ssd is not None and expert in self.ssd.queue:
                self.ssd.submit(expert, priority, order)
            if priority >= MAX_PRIORITY and self.ssd is not None:
                self._preempt(self.ssd, expert, self.now)
                self.ssd.kick(self.now)
            return
        link.submit(expert, priority, order)
        if priority >= MAX_PRIORITY:
            self._preempt(link, expert, self.now)
        link.kick(self.now)

    def cancel(self, expert: ExpertId) -> str:
        """Drop a queued fetch, or cut an in-flight one at the next chunk boundary."""
        outcome = "not-found"
        self._awaiting_dram.pop(expert, None)
        links = [self.links[self.gpu_of(expert)]] + ([self.ssd] if self.ssd is not None else [])
        for link in links:
            o = link.cancel(expert, self.now)
            if o != "not-found":
                outcome = o
                self.emit(self.now, "cancel", link=link.name, expert=expert, outcome=o)
        if outcome != "not-found":
            self.cancellations += 1
        return outcome

    def queued(self, gpu: int) -> List[PrefetchCandidate]:
        link = self.links[gpu]
        merged = link.queue.items() + [c for c in link.pending_plan() if c.expert not in link.queue]
        return sorted(merged, key=PrefetchCandidate.sort_key)

    def evict(self, gpu: int, slot: int, t: Optional[int] = None, reason: str = "evict") -> None:
        buf = self.buffers[gpu]
        s = buf.slots[slot]
        if s.residency == Residency.EMPTY:
            return
        if s.occupant == self.executing:
            raise ExecutingExpert(f"slot {slot} hosts executing expert {s.occupant}")
        if s.protected:
            raise ProtectedSlot(f"slot {slot} holds protected prefetch {s.occupant}")
        if s.residency != Residency.RESIDENT:
            raise PolicyContractError(f"slot {slot} is mid-transfer")
        self.emit(self.now if t is None else t, "evict", gpu=gpu, slot=slot, expert=s.occupant,
                  cache_priority=s.cache_priority, reason=reason)
        buf.release(slot)
        self.evictions += 1

    def wait_for(self, expert: ExpertId, t: int) -> int:
        """Advance until ``expert`` is resident; returns the time it became usable (>= t)."""
        self.advance(t)
        while not self.lookup(expert).hit:
            g = self.gpu_of(expert)
            if (self.buffers[g].slot_of(expert) is None and expert not in self.links[g]
                    and expert not in self._awaiting_dram):
                raise Deadlock(f"{expert} is neither resident nor queued")
            if not self.step_one():
                raise Deadlock(f"{expert} cannot be fetched: no free or evictable slot")
        return max(t, self.now)

    def bytes_by_link(self) -> Dict[str, int]:
        return {link.name: link.bytes_charged for link in self.all_links()}
