import pytest
from hypothesis import given, strategies as st

from expertsim.core import ExpertId, ModelShape
from expertsim.memsim import (
    HardwareSpec,
    Link,
    MemoryHierarchy,
    ProtectedSlot,
    Residency,
    cancel_transfer,
    link_advance,
    transfer_ns,
)
from expertsim.tqueue import MAX_PRIORITY

MB = 1_000_000
A, B, C = ExpertId(0, 0), ExpertId(0, 1), ExpertId(1, 0)


def big_link():
    return Link("dram->gpu0", 32_000_000_000, 16 * MB, 340 * MB)


def first_unprotected(mem, gpu, cand):
    for i, s in enumerate(mem.buffers[gpu].slots):
        if s.residency == Residency.RESIDENT and not s.protected and s.occupant != mem.executing:
            return i
    return None


def hierarchy(slots=2, ssd=None, log=None, **kw):
    hw = HardwareSpec(gpu_buffer_slots=slots, ssd_bandwidth_bytes_per_s=ssd, **kw)
    return MemoryHierarchy(ModelShape(2, 4), hw, first_unprotected, log)


def test_hardware_validation():
    with pytest.raises(ValueError):
        HardwareSpec(link_bandwidth_bytes_per_s=0)
    with pytest.raises(ValueError):
        HardwareSpec(expert_compute_latency_s=-1)
    assert HardwareSpec.from_dict(HardwareSpec().to_dict()) == HardwareSpec()


def test_expert_fetch_time_arithmetic():
    link = big_link()
    link.submit(A, 1.0)
    link.kick(0)
    assert link.next_event() == 10_625_000  # 340e6 / 32e9 s
    assert transfer_ns(340 * MB, 32_000_000_000) == 10_625_000


def test_zero_elapsed_moves_nothing():
    link = big_link()
    link.submit(A, 1.0)
    done, moved = link_advance(link, 0)
    assert done == [] and moved == 0 and link.bytes_at(0) == 0


def test_transfers_are_serialized():
    link = big_link()
    link.submit(A, 1.0)
    link.submit(B, 1.0)
    link.kick(0)
    done, moved = link_advance(link, 10**9)
    assert [t.end_ns for t in done] == [10_625_000, 21_250_000]
    assert moved == 680 * MB


def test_cancel_queued_charges_nothing():
    link = big_link()
    link.submit(A, 1.0)
    link.submit(B, 0.5)
    link.kick(0)
    assert cancel_transfer(link, B, 0) == "dequeued"
    link_advance(link, 10**9)
    assert link.bytes_charged == 340 * MB


def test_cancel_inflight_cuts_at_chunk_boundary():
    link = big_link()
    link.submit(A, 1.0)
    link.kick(0)
    t40 = transfer_ns(40 * MB, 32_000_000_000)
    assert cancel_transfer(link, A, t40) == "cut-at-chunk"
    done, moved = link_advance(link, 10**9)
    assert moved == 48 * MB
    assert done[0].cancelled and done[0].end_ns == transfer_ns(48 * MB, 32_000_000_000)


def test_cancel_unknown_is_noop():
    link = big_link()
    link.submit(A, 1.0)
    assert cancel_transfer(link, C, 0) == "not-found"
    assert len(link) == 1


def test_lookup_states():
    mem = hierarchy(chunk_size_bytes=8 * MB)
    assert all(mem.lookup(x).status == Residency.EMPTY for x in (A, B, C))
    mem.submit(A, MAX_PRIORITY)
    mem.advance(500_000)  # half of a 1 ms fetch
    lk = mem.lookup(A)
    assert lk.status == Residency.TRANSFERRING and lk.fraction == pytest.approx(16 / 32)
    mem.advance(1_000_000)
    assert mem.lookup(A).hit


def test_evict_unprotected_and_protected():
    mem = hierarchy()
    mem.submit(A, MAX_PRIORITY)  # on-demand: not protected
    mem.submit(B, 0.5)  # prefetch: protected until consumed
    mem.advance(10**8)
    ia, ib = mem.buffers[0].where[A], mem.buffers[0].where[B]
    mem.evict(0, ia)
    assert mem.lookup(A).status == Residency.EMPTY
    with pytest.raises(ProtectedSlot):
        mem.evict(0, ib)


def test_dram_copy_survives_gpu_eviction():
    mem = hierarchy(slots=1, ssd=16_000_000_000)
    for x in (A, B, A):
        mem.submit(x, MAX_PRIORITY)
        mem.wait_for(x, mem.now)
    by = mem.bytes_by_link()
    assert by["ssd->dram"] == 2 * 32 * MB  # A is not re-read from SSD
    assert by["dram->gpu0"] == 3 * 32 * MB


def test_ssd_and_gpu_links_overlap():
    mem = hierarchy(slots=2, ssd=32_000_000_000)
    mem.submit(A, MAX_PRIORITY)
    mem.submit(B, MAX_PRIORITY)
    mem.wait_for(B, 0)
    # B's SSD read overlaps A's DRAM->GPU copy: 3 fetch times, not 4
    assert mem.now == 3_000_000


def test_on_demand_preempts_prefetch():
    mem = hierarchy(slots=4, chunk_size_bytes=8 * MB)
    mem.submit(B, 0.5)
    mem.advance(100_000)
    mem.submit(A, MAX_PRIORITY)
    t = mem.wait_for(A, mem.now)
    assert t == 250_000 + 1_000_000  # prefetch cut at its first chunk, then A
    assert mem.preemptions == 1
    mem.wait_for(B, t)
    assert mem.lookup(B).hit


ops = st.lists(st.tuples(st.sampled_from(["submit", "prefetch", "cancel", "evict", "advance"]),
                         st.sampled_from([A, B, C, ExpertId(1, 3)]), st.integers(0, 3_000_000)),
               max_size=25)


@given(ops)
def test_slot_lifecycle_never_skips_a_state(seq):
    log = []
    mem = hierarchy(slots=2, log=log, chunk_size_bytes=8 * MB)
    for op, x, dt in seq:
        if op == "submit":
            mem.submit(x, MAX_PRIORITY)
        elif op == "prefetch":
            mem.submit(x, 0.5)
        elif op == "cancel":
            mem.cancel(x)
        elif op == "evict":
            i = mem.buffers[0].where.get(x)
            if i is not None and mem.buffers[0].slots[i].residency == Residency.RESIDENT:
                mem.buffers[0].unprotect(i)
                mem.evict(0, i)
        else:
            mem.advance(mem.now + dt)
    # per expert on the GPU link: start -> (done -> evict | cut) -> start ...
    state = {}
    for ev in log:
        if ev.get("link", "dram->gpu0") != "dram->gpu0" or "expert" not in ev:
            continue
        x, kind = ev["expert"], ev["event"]
        cur = state.get(x, "empty")
        if kind == "transfer_start":
            assert cur == "empty"
            state[x] = "transferring"
        elif kind == "transfer_done":
            assert cur == "transferring"
            state[x] = "resident"
        elif kind == "transfer_cut":
            assert cur == "transferring"
            state[x] = "empty"
        elif kind == "evict":
            assert cur == "resident"
            state[x] = "empty"
    for buf in mem.buffers:
        assert len(buf.where) == buf.occupied() <= len(buf)
