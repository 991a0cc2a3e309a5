"""
Prefetch and cache policies.

The activation-aware policy ranks prefetch candidates from EAMs matched in
the collection and ranks cached experts by the running request-level EAM.
Baselines (dependency, model-tracing, on-demand, LRU, LFU, Belady) share the
same interface so the engine can replay any of them.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import ExpertId, ModelShape, RequestTrace
from .eam import EAM, EAMC, Phase
from .memsim import Residency, SlotState
from .tqueue import MAX_PRIORITY, PrefetchCandidate, TransferQueue

__all__ = [
    "EPSILON",
    "MATCH_SLACK",
    "MAX_PRIORITY",
    "PolicyKind",
    "PrefetchCandidate",
    "TransferQueue",
    "aggregate_priorities",
    "baseline_plan",
    "cache_priority",
    "layer_proximity",
    "make_policy",
    "prefetch_priorities",
    "priority_reset_on_event",
    "select_eviction_victim",
]

EPSILON = 1e-4
# matched EAMs within this distance of the best one are aggregated
MATCH_SLACK = 0.01


class PolicyKind(str, enum.Enum):
    ACTIVATION_AWARE = "activation_aware"
    DEPENDENCY = "dependency"
    MODEL_TRACING = "model_tracing"
    ON_DEMAND = "on_demand"
    LRU = "lru"
    LFU = "lfu"
    IDEAL = "ideal"


class ResetEvent(str, enum.Enum):
    EXECUTED = "executed"
    DETERMINED_UNUSED = "determined_unused"
    DISPLACED_FROM_TOPK = "displaced_from_topk"


# -- priority math -------------------------------------------------------------


def layer_proximity(future_layer: int, current_layer: int, n_layers: int) -> float:
    return 1.0 - (future_layer - current_layer) / n_layers


def _ranked(counts: np.ndarray, current_layer: int, epsilon: float,
            positive_only: bool = False, limit: Optional[int] = None) -> List[Tuple[PrefetchCandidate, float]]:
    L, E = counts.shape
    rows = np.asarray(counts[current_layer + 1:], dtype=np.float64)
    if rows.shape[0] == 0:
        return []
    totals = rows.sum(axis=1, keepdims=True)
    ratios = np.divide(rows, totals, out=np.zeros_like(rows), where=totals > 0)
    layers = np.arange(current_layer + 1, L)
    prox = 1.0 - (layers - current_layer) / L
    prio = (ratios + epsilon) * prox[:, None]
    li, ej = np.nonzero(ratios > 0) if positive_only else np.indices(ratios.shape).reshape(2, -1)
    vals = prio[li, ej]
    order = np.lexsort((ej, li, -vals))
    if limit is not None:
        order = order[:limit]
    ls, es = (li[order] + current_layer + 1).tolist(), ej[order].tolist()
    return [
        (PrefetchCandidate(ExpertId(l, e), v), r)
        for l, e, v, r in zip(ls, es, vals[order].tolist(), ratios[li[order], ej[order]].tolist())
    ]


def aggregate_priorities(counts: np.ndarray, current_layer: int,
                         epsilon: float = EPSILON) -> List[PrefetchCandidate]:
    """Priorities for every expert in layers after ``current_layer`` from summed match counts."""
    return [c for c, _ in _ranked(np.asarray(counts), current_layer, epsilon)]


def matched_counts(cur_eam: EAM, eamc: EAMC, slack: float = MATCH_SLACK) -> Optional[np.ndarray]:
    matches = eamc.match_within(cur_eam, slack)
    if not matches:
        return None
    return np.sum([m.entry.counts for m in matches], axis=0)


def prefetch_priorities(cur_eam: EAM, eamc: EAMC, current_layer: int,
                        epsilon: float = EPSILON, slack: float = MATCH_SLACK) -> List[PrefetchCandidate]:
    """Ranked prefetch candidates for all layers after ``current_layer``; empty if nothing is traced."""
    counts = matched_counts(cur_eam, eamc, slack)
    if counts is None:
        return []
    return aggregate_priorities(counts, current_layer, epsilon)


def cache_priority(request_eam: EAM, expert: ExpertId, epsilon: float = EPSILON) -> float:
    row = request_eam.counts[expert.layer_idx]
    total = int(row.sum())
    p = row[expert.expert_idx] / total if total else 0.0
    return (float(p) + epsilon) * (1.0 - expert.layer_idx / request_eam.shape.n_layers)


def select_eviction_victim(slots: Sequence[SlotState], request_eam: EAM,
                           executing: Iterable[ExpertId] = (),
                           epsilon: float = EPSILON) -> Optional[int]:
    """Index of the unprotected resident slot with the lowest cache priority, or None."""
    busy = set(executing)
    best, best_key = None, None
    for i, s in enumerate(slots):
        if s.residency != Residency.RESIDENT or s.protected or s.occupant in busy:
            continue
        key = (cache_priority(request_eam, s.occupant, epsilon), s.occupant)
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def priority_reset_on_event(slots: Sequence[SlotState], expert: ExpertId, event: ResetEvent,
                            request_eam: EAM, epsilon: float = EPSILON) -> SlotState:
    ResetEvent(event)
    for s in slots:
        if s.occupant == expert and s.residency != Residency.EMPTY:
            s.protected = False
            s.cache_priority = cache_priority(request_eam, expert, epsilon)
            return s
    raise KeyError(f"{expert} is not in the buffer")


# -- runtime context and policies -----------------------------------------------------


@dataclass
class Context:
    """What the engine exposes to policies at a decision point."""

    shape: ModelShape
    phase: Phase = Phase.PREFILL
    iter_eam: Optional[EAM] = None
    cache_eam: Optional[EAM] = None  # request-level counts so far, both phases
    step: int = 0  # global layer-step index, used by the offline oracle
    now_ns: int = 0


class Policy:
    kind: PolicyKind
    prefetches = False

    def __init__(self, shape: ModelShape):
        self.shape = shape

    def observe(self, ctx: Context, layer: int, assignments) -> None:
        pass

    def plan(self, ctx: Context, layer: int, limit: Optional[int] = None) -> List[PrefetchCandidate]:
        """Candidates in dequeue order; ``limit`` caps how many the caller will keep."""
        return []

    def victim_key(self, ctx: Context, slot: SlotState):
        raise NotImplementedError

    def admits(self, ctx: Context, cand: PrefetchCandidate, victim: SlotState) -> bool:
        return True

    def key_table(self, ctx: Context) -> Optional[List[List[float]]]:
        """Per-(layer, expert) victim keys when they depend only on the expert; None otherwise."""
        return None

    def reset_priority(self, ctx: Context, slot: SlotState) -> float:
        return 0.0

    def end_request(self, prefill_eam: EAM, decode_eam: EAM) -> None:
        pass


class ActivationAware(Policy):
    kind = PolicyKind.ACTIVATION_AWARE
    prefetches = True

    def __init__(self, shape: ModelShape, capacity: int, eamcs: Optional[Dict[Phase, EAMC]] = None,
                 epsilon: float = EPSILON, slack: float = MATCH_SLACK):
        super().__init__(shape)
        self.epsilon = epsilon
        self.slack = slack
        self.eamcs = eamcs or {ph: EAMC(shape, capacity, ph) for ph in Phase}
        self._src, self._key, self._tab = None, None, None
        self._scan = None

    def _match(self, probe: EAM, eamc: EAMC) -> List:
        """``eamc.match_within(probe, slack)``, rescanning only the probe rows that changed."""
        cache = self._scan
        if cache is None or cache[0] is not eamc or cache[1] != eamc.version or cache[2] is not probe:
            rows = range(self.shape.n_layers)
            sims = eamc.row_similarities(probe.counts, rows)
        else:
            sims = cache[4]
            rows = np.flatnonzero((probe.counts != cache[3]).any(axis=1)).tolist()
            if rows:
                sims = sims.copy()
                sims[:, rows] = eamc.row_similarities(probe.counts, rows)
        self._scan = (eamc, eamc.version, probe, probe.counts.copy(), sims)
        approx = 1.0 - sims.mean(axis=1, dtype=np.float64)
        return eamc.near_from_approx(approx, probe, self.slack)

    def plan(self, ctx: Context, layer: int, limit: Optional[int] = None) -> List[PrefetchCandidate]:
        eamc = self.eamcs[ctx.phase]
        if not len(eamc):
            return []
        matches = self._match(ctx.iter_eam, eamc)
        counts = matches[0].entry.counts if len(matches) == 1 else np.sum([m.entry.counts for m in matches], axis=0)
        # floor-only candidates were never seen in a matched trace; the engine does not fetch them
        return [c for c, _ in _ranked(counts, layer, self.epsilon, positive_only=True, limit=limit)]

    def _table(self, ctx: Context) -> List[List[float]]:
        # cache priorities only change when the request EAM does, i.e. once per routing step
        key = (ctx.step, ctx.phase)
        if self._src is not ctx.cache_eam or self._key != key:
            counts = ctx.cache_eam.counts
            totals = counts.sum(axis=1, keepdims=True)
            ratios = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
            L = self.shape.n_layers
            weight = 1.0 - np.arange(L) / L
            self._tab = ((ratios + self.epsilon) * weight[:, None]).tolist()
            self._src, self._key = ctx.cache_eam, key
        return self._tab

    def victim_key(self, ctx: Context, slot: SlotState):
        x = slot.occupant
        return self._table(ctx)[x.layer_idx][x.expert_idx]

    def key_table(self, ctx: Context) -> Optional[List[List[float]]]:
        return self._table(ctx)

    def admits(self, ctx, cand, victim) -> bool:
        return self.victim_key(ctx, victim) < cand.priority

    def reset_priority(self, ctx: Context, slot: SlotState) -> float:
        return cache_priority(ctx.cache_eam, slot.occupant, self.epsilon)

    def end_request(self, prefill_eam: EAM, decode_eam: EAM) -> None:
        for eam in (prefill_eam, decode_eam):
            if eam.counts.any():
                self.eamcs[eam.phase].insert(eam)


class _Recency(Policy):
    """Plain LRU: a load counts as a touch, so a fresh prefetch enters at the MRU end."""

    def victim_key(self, ctx, slot):
        return (max(slot.last_used_ns, slot.loaded_ns), slot.loaded_ns)


class Dependency(_Recency):
    """All experts of the next layer, uniform priority; LRU cache."""

    kind = PolicyKind.DEPENDENCY
    prefetches = True

    def __init__(self, shape: ModelShape):
        super().__init__(shape)
        self._plans = [baseline_plan(self.kind, {"shape": shape, "layer": l}) for l in range(shape.n_layers)]

    def plan(self, ctx, layer, limit=None):
        return self._plans[layer][:limit]


class ModelTracing(Policy):
    """Lifetime (cross-request) expert counts order prefetches and gate their admission; eviction is LRU by use."""

    kind = PolicyKind.MODEL_TRACING
    prefetches = True

    def __init__(self, shape: ModelShape, epsilon: float = EPSILON):
        super().__init__(shape)
        self.epsilon = epsilon
        self.counts = np.zeros((shape.n_layers, shape.n_experts_per_layer), dtype=np.int64)
        self.totals = [0] * shape.n_layers

    def observe(self, ctx, layer, assignments):
        for e, t in assignments:
            self.counts[layer, e] += t
            self.totals[layer] += t

    def plan(self, ctx, layer, limit=None):
        return baseline_plan(self.kind, {"shape": self.shape, "layer": layer, "lifetime_counts": self.counts,
                                         "epsilon": self.epsilon, "limit": limit})

    def _ratio(self, expert: ExpertId) -> float:
        total = self.totals[expert.layer_idx]
        return (int(self.counts[expert]) / total if total else 0.0) + self.epsilon

    def victim_key(self, ctx, slot):
        # recency of actual use: a prefetch that was never consumed is the first to go
        return (slot.last_used_ns, slot.loaded_ns)

    def admits(self, ctx, cand, victim):
        # a prefetch may not displace an expert the lifetime trace ranks higher
        return self._ratio(victim.occupant) < cand.priority


class OnDemand(Policy):
    """Fetch only after dispatch; slots are reused in load order (plain staging buffer)."""

    kind = PolicyKind.ON_DEMAND

    def victim_key(self, ctx, slot):
        return slot.loaded_ns


class LRU(_Recency):
    kind = PolicyKind.LRU


class LFU(Policy):
    kind = PolicyKind.LFU

    def victim_key(self, ctx, slot):
        return (slot.uses, slot.last_used_ns)


class Ideal(Policy):
    """Belady eviction with full knowledge of future layer-steps; fetches on demand."""

    kind = PolicyKind.IDEAL

    def __init__(self, shape: ModelShape, traces: Sequence[RequestTrace]):
        super().__init__(shape)
        self.future: Dict[ExpertId, List[int]] = {}
        for step, layer, experts in iter_layer_steps(traces):
            for e in experts:
                self.future.setdefault(ExpertId(layer, e), []).append(step)

    def next_use(self, expert: ExpertId, step: int) -> float:
        uses = self.future.get(expert, ())
        i = bisect.bisect_left(uses, step)
        return uses[i] if i < len(uses) else float("inf")

    def victim_key(self, ctx, slot):
        return -self.next_use(slot.occupant, ctx.step)


def iter_layer_steps(traces: Sequence[RequestTrace]):
    """Yield (global step, layer, routed expert indices) in replay order."""
    step = 0
    for trace in traces:
        for iteration in trace.iterations:
            for event in iteration:
                yield step, event.layer_idx, [e for e, _ in event.assignments]
                step += 1


def baseline_plan(kind: PolicyKind, context: dict) -> List[PrefetchCandidate]:
    """Prefetch candidates a baseline emits after routing at ``context['layer']``."""
    kind = PolicyKind(kind)
    shape: ModelShape = context["shape"]
    layer = context["layer"]
    nxt = layer + 1
    if kind == PolicyKind.DEPENDENCY:
        if nxt >= shape.n_layers:
            return []
        return [PrefetchCandidate(ExpertId(nxt, j), 1.0) for j in range(shape.n_experts_per_layer)]
    if kind == PolicyKind.MODEL_TRACING:
        if nxt >= shape.n_layers:
            return []
        eps = context.get("epsilon", EPSILON)
        row = np.asarray(context["lifetime_counts"])[nxt]
        total = int(row.sum())
        prio = (row / total if total else np.zeros(len(row))) + eps
        order = np.argsort(-prio, kind="stable")[:context.get("limit")]  # stable keeps index tie-break
        return [PrefetchCandidate(ExpertId(nxt, int(j)), float(prio[j])) for j in order]
    if kind == PolicyKind.ACTIVATION_AWARE:
        return prefetch_priorities(context["cur_eam"], context["eamc"], layer)[:context.get("limit")]
    # on_demand, lru, lfu, ideal: nothing ahead of dispatch
    return []


def on_demand_order(assignments) -> List[Tuple[int, int]]:
    """Missing experts are fetched by token count, largest first, then by index."""
    return sorted(assignments, key=lambda et: (-et[1], et[0]))


def make_policy(kind, shape: ModelShape, traces: Sequence[RequestTrace] = (), eamc_capacity: int = 64,
                eamcs: Optional[Dict[Phase, EAMC]] = None) -> Policy:
    kind = PolicyKind(kind)
    if kind == PolicyKind.ACTIVATION_AWARE:
        return ActivationAware(shape, eamc_capacity, eamcs)
    if kind == PolicyKind.DEPENDENCY:
        return Dependency(shape)
    if kind == PolicyKind.MODEL_TRACING:
        return ModelTracing(shape)
    if kind == PolicyKind.ON_DEMAND:
        return OnDemand(shape)
    if kind == PolicyKind.LRU:
        return LRU(shape)
    if kind == PolicyKind.LFU:
        return LFU(shape)
    return Ideal(shape, traces)


# -- offline demand-paging helpers (used by the Belady oracle tests) ------------------------


def belady_misses(sequence: Sequence, n_slots: int) -> int:
    """Misses of farthest-next-use eviction on a demand-fetched cache."""
    positions: Dict[object, List[int]] = {}
    for i, x in enumerate(sequence):
        positions.setdefault(x, []).append(i)
    cache: List = []
    misses = 0
    for i, x in enumerate(sequence):
        if x in cache:
            continue
        misses += 1
        if len(cache) >= n_slots:
            def next_use(y):
                ps = positions[y]
                k = bisect.bisect_right(ps, i)
                return ps[k] if k < len(ps) else float("inf")
            victim = min(cache, key=lambda y: (-next_use(y), y))
            cache.remove(victim)
        cache.append(x)
    return misses
