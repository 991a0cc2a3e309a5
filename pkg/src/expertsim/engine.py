"""
Replays routing traces layer by layer against the memory model under one policy.

Per layer: dense compute, routing (EAM update, hit sampling), prefetch
recomputation, on-demand fetches for misses, then sequential expert execution.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import ExpertId, ModelShape, RequestTrace, validate_trace
from .eam import EAM, EAMC, EAMKind, Phase
from .memsim import (
    NS_PER_S,
    HardwareSpec,
    MemoryHierarchy,
    PolicyContractError,
    Residency,
)
from .policy import (
    MAX_PRIORITY,
    Context,
    Policy,
    PolicyKind,
    PrefetchCandidate,
    make_policy,
    on_demand_order,
)

CSV_COLUMNS = [
    "policy",
    "seed",
    "eamc_capacity",
    "buffer_slots",
    "bandwidth_bytes_per_s",
    "requests",
    "activations",
    "hits",
    "misses",
    "buffer_hit_rate",
    "prefill_hit_rate",
    "decode_hit_rate",
    "gpu_blocking_time_s",
    "prefill_blocking_time_s",
    "decode_blocking_time_s",
    "normalized_blocking_time",
    "bytes_dram_gpu",
    "bytes_ssd_dram",
    "normalized_bandwidth",
    "prefetch_candidates_issued",
    "prefetch_cancellations",
    "evictions",
    "total_time_s",
    "compute_time_s",
    "idle_time_s",
    "mean_tpot_s",
    "p50_tpot_s",
    "p99_tpot_s",
    "error",
]


@dataclass
class PhaseStats:
    activations: int = 0
    hits: int = 0
    blocking_ns: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.activations if self.activations else 0.0


@dataclass
class SimReport:
    policy: str
    activations: int = 0
    hits: int = 0
    blocking_ns: int = 0
    compute_ns: int = 0
    total_ns: int = 0
    idle_ns: int = 0
    bytes_transferred: Dict[str, int] = field(default_factory=dict)
    prefill: PhaseStats = field(default_factory=PhaseStats)
    decode: PhaseStats = field(default_factory=PhaseStats)
    per_request_decode_latency_s: List[float] = field(default_factory=list)
    tpot_s: List[float] = field(default_factory=list)
    # hits/activations keyed by iteration index within a request (0 = prefill)
    hits_by_iteration: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    prefetch_candidates_issued: int = 0
    prefetch_cancellations: int = 0
    evictions: int = 0
    preemptions: int = 0
    n_requests: int = 0
    # sweep bookkeeping
    seed: Optional[int] = None
    eamc_capacity: Optional[int] = None
    buffer_slots: Optional[int] = None
    bandwidth: Optional[int] = None
    normalized_blocking_time: Optional[float] = None
    normalized_bandwidth: Optional[float] = None
    error: str = ""

    @property
    def misses(self) -> int:
        return self.activations - self.hits

    @property
    def buffer_hit_rate(self) -> float:
        return self.hits / self.activations if self.activations else 0.0

    @property
    def gpu_blocking_time_s(self) -> float:
        return self.blocking_ns / NS_PER_S

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_transferred.values())

    def hit_rate_from_iteration(self, start: int) -> float:
        h = a = 0
        for it, (hi, ac) in self.hits_by_iteration.items():
            if it >= start:
                h += hi
                a += ac
        return h / a if a else 1.0

    def row(self) -> dict:
        tp = sorted(self.tpot_s)

        def pct(q):
            if not tp:
                return 0.0
            return tp[min(len(tp) - 1, int(q * len(tp)))]

        dram = sum(v for k, v in self.bytes_transferred.items() if k.startswith("dram->"))
        return {
            "policy": self.policy,
            "seed": "" if self.seed is None else self.seed,
            "eamc_capacity": "" if self.eamc_capacity is None else self.eamc_capacity,
            "buffer_slots": "" if self.buffer_slots is None else self.buffer_slots,
            "bandwidth_bytes_per_s": "" if self.bandwidth is None else self.bandwidth,
            "requests": self.n_requests,
            "activations": self.activations,
            "hits": self.hits,
            "misses": self.misses,
            "buffer_hit_rate": _fmt(self.buffer_hit_rate),
            "prefill_hit_rate": _fmt(self.prefill.hit_rate),
            "decode_hit_rate": _fmt(self.decode.hit_rate),
            "gpu_blocking_time_s": _fmt(self.blocking_ns / NS_PER_S),
            "prefill_blocking_time_s": _fmt(self.prefill.blocking_ns / NS_PER_S),
            "decode_blocking_time_s": _fmt(self.decode.blocking_ns / NS_PER_S),
            "normalized_blocking_time": "" if self.normalized_blocking_time is None else _fmt(self.normalized_blocking_time),
            "bytes_dram_gpu": dram,
            "bytes_ssd_dram": self.bytes_transferred.get("ssd->dram", 0),
            "normalized_bandwidth": "" if self.normalized_bandwidth is None else _fmt(self.normalized_bandwidth),
            "prefetch_candidates_issued": self.prefetch_candidates_issued,
            "prefetch_cancellations": self.prefetch_cancellations,
            "evictions": self.evictions,
            "total_time_s": _fmt(self.total_ns / NS_PER_S),
            "compute_time_s": _fmt(self.compute_ns / NS_PER_S),
            "idle_time_s": _fmt(self.idle_ns / NS_PER_S),
            "mean_tpot_s": _fmt(statistics.fmean(tp) if tp else 0.0),
            "p50_tpot_s": _fmt(pct(0.5)),
            "p99_tpot_s": _fmt(pct(0.99)),
            "error": self.error,
        }


def _fmt(x: float) -> str:
    return f"{x:.9g}"


class Engine:
    def __init__(self, shape: ModelShape, hw: HardwareSpec, policy: Policy,
                 event_log: Optional[list] = None):
        self.shape = shape
        self.hw = hw
        self.policy = policy
        self.log = event_log
        self.mem = MemoryHierarchy(shape, hw, self._choose_victim, event_log)
        self.ctx = Context(shape)
        self.report = SimReport(policy.kind.value)
        self.now = 0

    # -- victim selection (called from link starts) -------------------------------

    def _choose_victim(self, mem: MemoryHierarchy, gpu: int, cand: PrefetchCandidate) -> Optional[int]:
        ctx, policy = self.ctx, self.policy
        ctx.now_ns = mem.now
        buf = mem.buffers[gpu]
        best_key, best_i = None, None
        executing, needed = mem.executing, mem.needed
        tab = policy.key_table(ctx)
        resident = Residency.RESIDENT
        for i, s in enumerate(buf.slots):
            x = s.occupant
            if s.residency is not resident or s.protected or x == executing or x in needed:
                continue
            key = (tab[x[0]][x[1]] if tab is not None else policy.victim_key(ctx, s), x)
            if best_key is None or key < best_key:
                best_key, best_i = key, i
        on_demand = cand.priority >= MAX_PRIORITY
        if best_i is not None:
            if on_demand or policy.admits(ctx, cand, buf.slots[best_i]):
                return best_i
            return None
        if not on_demand:
            return None
        # an on-demand fetch displaces the weakest outstanding prefetch
        prot = [(buf.slots[i].prefetch_priority, x, i) for x, i in buf.protected.items()
                if buf.slots[i].residency is Residency.RESIDENT and x != mem.executing and x not in mem.needed]
        if prot:
            _, _, i = min(prot)
            self._reset(gpu, i)
            return i
        # last resort: a routed expert of this layer that runs last
        pending = [(mem.needed[s.occupant], i) for i, s in enumerate(buf.slots)
                   if s.residency is Residency.RESIDENT and s.occupant in mem.needed and s.occupant != mem.executing]
        if pending:
            _, i = max(pending)
            buf.unprotect(i)
            return i
        return None

    def _reset(self, gpu: int, i: int) -> None:
        buf = self.mem.buffers[gpu]
        buf.unprotect(i)
        s = buf.slots[i]
        s.cache_priority = self.policy.reset_priority(self.ctx, s)
        self.mem.touch()

    # -- per-layer steps -----------------------------------------------------------------

    def _replan(self, layer: int, routed: Dict[ExpertId, int]) -> None:
        mem, hw = self.mem, self.hw
        k = hw.gpu_buffer_slots
        limit = k if hw.n_gpus == 1 else None
        cands = self.policy.plan(self.ctx, layer, limit) if self.policy.prefetches else []
        per_gpu: List[List[PrefetchCandidate]] = [[] for _ in range(hw.n_gpus)]
        for c in cands:
            g = c.expert.expert_idx % hw.n_gpus
            if len(per_gpu[g]) < k:
                per_gpu[g].append(c)
        for g in range(hw.n_gpus):
            plan = per_gpu[g]
            wanted = {c.expert for c in plan}
            buf = mem.buffers[g]
            # scenario (iii): prefetched experts that dropped out of the top-K
            for x, i in list(buf.protected.items()):
                if x not in wanted and x not in routed and buf.slots[i].residency is Residency.RESIDENT:
                    self._reset(g, i)
            link = mem.links[g]
            stale = {c.expert for c in link.pending_plan()} - wanted
            for c in link.queue.items():
                if c.priority < MAX_PRIORITY and c.expert not in wanted:
                    link.queue.cancel(c.expert)
                    stale.add(c.expert)
            tr = link.inflight
            if (tr is not None and not tr.cancelled and not tr.on_demand
                    and tr.expert not in wanted and tr.expert not in routed):
                mem.cancel(tr.expert)
            if mem.ssd is not None:
                for c in mem.ssd.queue.items():
                    if c.priority < MAX_PRIORITY and mem.gpu_of(c.expert) == g and c.expert not in wanted:
                        mem.cancel(c.expert)
                tr = mem.ssd.inflight
                if (tr is not None and not tr.cancelled and not tr.on_demand and mem.gpu_of(tr.expert) == g
                        and tr.expert not in wanted and tr.expert not in routed):
                    mem.cancel(tr.expert)
            if stale:
                mem.cancellations += len(stale)
                mem.emit(mem.now, "cancel", link=link.name, n=len(stale), outcome="dequeued")
            link.set_plan(plan)
            self.report.prefetch_candidates_issued += len(plan)
        mem.touch()
        mem.kick()

    def _run_layer(self, event, phase: Phase, it_idx: int, iter_eam: EAM) -> None:
        hw, mem, rep, ctx = self.hw, self.mem, self.report, self.ctx
        layer = event.layer_idx
        self.now += hw.dense_layer_ns
        rep.compute_ns += hw.dense_layer_ns
        mem.advance(self.now)

        iter_eam.record(event)
        ctx.cache_eam.record(event)
        self.policy.observe(ctx, layer, event.assignments)
        ctx.step += 1
        ctx.now_ns = self.now

        # dispatch: a hit means fully resident right now
        ordered = on_demand_order(event.assignments)
        routed = {ExpertId(layer, e): rank for rank, (e, _) in enumerate(ordered)}
        status = {x: mem.lookup(x).status for x in routed}
        stats = rep.prefill if phase == Phase.PREFILL else rep.decode
        n_hit = sum(1 for st in status.values() if st == Residency.RESIDENT)
        stats.activations += len(routed)
        stats.hits += n_hit
        h, a = rep.hits_by_iteration.get(it_idx, (0, 0))
        rep.hits_by_iteration[it_idx] = (h + n_hit, a + len(routed))
        if self.log is not None:
            for x, st in status.items():
                mem.emit(self.now, "dispatch", expert=x, phase=phase.value, iteration=it_idx,
                         hit=st == Residency.RESIDENT)
        mem.needed = dict(routed)
        mem.touch()

        # scenario (ii): prefetched experts of this (or an earlier) layer that routing skipped
        for g, buf in enumerate(mem.buffers):
            for x, i in list(buf.protected.items()):
                if x.layer_idx <= layer and x not in routed and buf.slots[i].residency is Residency.RESIDENT:
                    self._reset(g, i)

        self._replan(layer, routed)

        for rank, x in enumerate(routed):
            if status[x] != Residency.RESIDENT:
                mem.submit(x, MAX_PRIORITY, rank)

        exec_order = sorted(routed, key=lambda x: (status[x] != Residency.RESIDENT,
                                                   status[x] != Residency.TRANSFERRING, routed[x]))
        for x in exec_order:
            mem.executing = x
            mem.touch()
            if mem.lookup(x).status == Residency.EMPTY and not self._pending(x):
                mem.submit(x, MAX_PRIORITY, routed[x])
            ready = mem.wait_for(x, self.now)
            waited = ready - self.now
            stats.blocking_ns += waited
            rep.blocking_ns += waited
            self.now = ready
            g = mem.gpu_of(x)
            i = mem.buffers[g].where[x]
            s = mem.buffers[g].slots[i]
            self.now += hw.expert_compute_ns
            rep.compute_ns += hw.expert_compute_ns
            mem.advance(self.now)
            s.last_used_ns = self.now
            s.uses += 1
            self._reset(g, i)
            del mem.needed[x]
            mem.executing = None
            mem.touch()
        mem.kick()

    def _pending(self, x: ExpertId) -> bool:
        mem = self.mem
        g = mem.gpu_of(x)
        return x in mem.links[g].queue or x in mem._awaiting_dram or (
            mem.ssd is not None and (x in mem.ssd.queue or (mem.ssd.inflight is not None and mem.ssd.inflight.expert == x)))

    def run_request(self, trace: RequestTrace) -> None:
        shape, rep, ctx = self.shape, self.report, self.ctx
        req = {ph: EAM.new(shape, EAMKind.REQUEST, ph) for ph in Phase}
        ctx.cache_eam = EAM.new(shape, EAMKind.REQUEST, Phase.DECODE)
        tpots = []
        for it_idx, iteration in enumerate(trace.iterations):
            phase = Phase.PREFILL if it_idx == 0 else Phase.DECODE
            ctx.phase = phase
            iter_eam = EAM.new(shape, EAMKind.ITERATION, phase)
            ctx.iter_eam = iter_eam
            start = self.now
            for event in iteration:
                self._run_layer(event, phase, it_idx, iter_eam)
            req[phase].accumulate(iter_eam)
            if phase == Phase.DECODE:
                tpots.append((self.now - start) / NS_PER_S)
        rep.tpot_s.extend(tpots)
        rep.per_request_decode_latency_s.append(sum(tpots) / len(tpots) if tpots else 0.0)
        self.policy.end_request(req[Phase.PREFILL], req[Phase.DECODE])
        rep.n_requests += 1

    def finish(self) -> SimReport:
        rep, mem = self.report, self.mem
        # let outstanding prefetch traffic drain so byte counts are final
        while mem.step_one():
            pass
        rep.activations = rep.prefill.activations + rep.decode.activations
        rep.hits = rep.prefill.hits + rep.decode.hits
        rep.total_ns = self.now
        rep.idle_ns = rep.total_ns - rep.compute_ns - rep.blocking_ns
        rep.bytes_transferred = mem.bytes_by_link()
        rep.prefetch_cancellations = mem.cancellations
        rep.evictions = mem.evictions
        rep.preemptions = mem.preemptions
        return rep


def run(traces: Sequence[RequestTrace], shape: ModelShape, hw: HardwareSpec, policy,
        eamc_capacity: int = 64, eamcs: Optional[Dict[Phase, EAMC]] = None,
        event_log: Optional[list] = None, validate: bool = True) -> SimReport:
    """Replay ``traces`` sequentially under ``policy`` and return the run's metrics."""
    if validate:
        for t in traces:
            validate_trace(t, shape)
    kind = PolicyKind(policy)
    pol = make_policy(kind, shape, traces, eamc_capacity, eamcs)
    engine = Engine(shape, hw, pol, event_log)
    for t in traces:
        engine.run_request(t)
    rep = engine.finish()
    rep.eamc_capacity = eamc_capacity if kind == PolicyKind.ACTIVATION_AWARE else None
    rep.buffer_slots = hw.gpu_buffer_slots
    rep.bandwidth = hw.link_bandwidth_bytes_per_s
    return rep


@dataclass(frozen=True)
class Cell:
    policy: str
    seed: int
    eamc_capacity: int
    buffer_slots: int
    bandwidth: int


def _run_cell(cell: Cell, traces: Sequence[RequestTrace], shape: ModelShape, hw: HardwareSpec) -> SimReport:
    cell_hw = replace(hw, gpu_buffer_slots=cell.buffer_slots, link_bandwidth_bytes_per_s=cell.bandwidth)
    try:
        rep = run(traces, shape, cell_hw, cell.policy, cell.eamc_capacity)
    except (PolicyContractError, ValueError) as exc:
        rep = SimReport(cell.policy, error=f"{type(exc).__name__}: {exc}")
        rep.buffer_slots, rep.bandwidth = cell.buffer_slots, cell.bandwidth
    rep.seed = cell.seed
    # capacity only means something to the policy that owns a collection
    rep.eamc_capacity = cell.eamc_capacity if cell.policy == PolicyKind.ACTIVATION_AWARE.value else None
    return rep


def run_matrix(trace_fn: Callable[[int], Sequence[RequestTrace]], shape: ModelShape, hw: HardwareSpec,
               policies: Iterable, seeds: Iterable[int], capacities: Iterable[int] = (64,),
               buffer_slots: Optional[Iterable[int]] = None, bandwidths: Optional[Iterable[int]] = None,
               workers: int = 1) -> List[SimReport]:
    """Cartesian product of runs; ``trace_fn(seed)`` supplies the traces for each seed.

    A failing cell yields a report with ``error`` set instead of aborting the sweep.
    Results come back in product order regardless of ``workers``.
    """
    slots_axis = list(buffer_slots) if buffer_slots is not None else [hw.gpu_buffer_slots]
    bw_axis = list(bandwidths) if bandwidths is not None else [hw.link_bandwidth_bytes_per_s]
    cells = [
        Cell(PolicyKind(p).value, s, c, k, b)
        for p, s, c, k, b in itertools.product(policies, seeds, capacities, slots_axis, bw_axis)
    ]
    traces = {s: trace_fn(s) for s in dict.fromkeys(c.seed for c in cells)}
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_run_cell, c, traces[c.seed], shape, hw) for c in cells]
            reports = [f.result() for f in futures]
    else:
        reports = [_run_cell(c, traces[c.seed], shape, hw) for c in cells]
    normalize(reports)
    return reports


def normalize(reports: List[SimReport]) -> None:
    """Blocking time and bandwidth relative to the on-demand run of the same cell (corpus totals)."""
    base = {}
    for r in reports:
        if r.policy == PolicyKind.ON_DEMAND.value and not r.error:
            base[(r.seed, r.buffer_slots, r.bandwidth)] = r
    for r in reports:
        b = base.get((r.seed, r.buffer_slots, r.bandwidth))
        if b is None or r.error:
            continue
        r.normalized_blocking_time = r.blocking_ns / b.blocking_ns if b.blocking_ns else None
        r.normalized_bandwidth = r.total_bytes / b.total_bytes if b.total_bytes else None


def reports_to_csv(reports: Iterable[SimReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def write_event_log(events: Iterable[dict], path) -> None:
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True))
            f.write("\n")
