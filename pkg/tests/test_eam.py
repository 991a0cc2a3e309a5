import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from expertsim.core import ModelShape, RoutingEvent
from expertsim.eam import (
    EAM,
    EAMC,
    EAMKind,
    Phase,
    ShapeMismatch,
    SnapshotError,
    eam_distance,
    eamc_capacity_bound,
    load_collections,
    save_collections,
)
from expertsim.workload import WorkloadSpec, generate_trace

from conftest import request_eam


def scalar_distance(a, b):
    """Plain-python reference: 1 - mean row cosine of row-normalised counts."""
    sims = []
    for ra, rb in zip(a, b):
        sa, sb = sum(ra), sum(rb)
        if sa == 0 and sb == 0:
            sims.append(1.0)
            continue
        if sa == 0 or sb == 0:
            sims.append(0.0)
            continue
        pa = [x / sa for x in ra]
        pb = [x / sb for x in rb]
        dot = sum(x * y for x, y in zip(pa, pb))
        na = math.sqrt(sum(x * x for x in pa))
        nb = math.sqrt(sum(x * x for x in pb))
        sims.append(dot / (na * nb))
    return 1.0 - sum(sims) / len(sims)


def eam(counts, kind=EAMKind.REQUEST, phase=Phase.DECODE):
    c = np.asarray(counts)
    return EAM(ModelShape(*c.shape), c, kind, phase)


counts_2x3 = arrays(np.int64, (2, 3), elements=st.integers(0, 20))


# -- construction and recording --------------------------------------------------------------


def test_new_is_zero_and_stores_kind_phase():
    e = EAM.new(ModelShape(2, 2), EAMKind.REQUEST, Phase.PREFILL)
    assert e.counts.tolist() == [[0, 0], [0, 0]]
    assert e.kind == EAMKind.REQUEST and e.phase == Phase.PREFILL
    assert EAM.new(ModelShape(1, 4)).counts.tolist() == [[0, 0, 0, 0]]


def test_record_single_and_double():
    e = EAM.new(ModelShape(1, 2))
    ev = RoutingEvent(0, ((1, 3),))
    e.record(ev)
    assert e.counts.tolist() == [[0, 3]]
    e.record(ev)
    assert e.counts.tolist() == [[0, 6]]


def test_record_out_of_range_leaves_eam_unchanged():
    e = EAM.new(ModelShape(1, 2))
    with pytest.raises(IndexError):
        e.record(RoutingEvent(0, ((0, 1), (2, 1))))
    assert e.counts.sum() == 0
    with pytest.raises(IndexError):
        e.record(RoutingEvent(1, ((0, 1),)))


def test_iteration_row_sums_match_generator_token_tally():
    shape = ModelShape(3, 16, 2)
    trace = generate_trace(WorkloadSpec(shape, batch_size=3, seed=5), 0)
    for it_idx, iteration in enumerate(trace.iterations):
        e = EAM.new(shape)
        for ev in iteration:
            e.record(ev)
        n_tokens = trace.prompt_tokens if it_idx == 0 else 3
        assert e.counts.sum(axis=1).tolist() == [n_tokens * shape.top_k] * shape.n_layers


def test_accumulate_examples():
    a = eam([[1, 0]], EAMKind.ITERATION)
    a.accumulate(eam([[0, 2]], EAMKind.ITERATION))
    assert a.counts.tolist() == [[1, 2]]
    x = eam([[1, 3], [0, 2]], EAMKind.ITERATION)
    acc = EAM.new(x.shape)
    for _ in range(5):
        acc.accumulate(x)
    assert np.array_equal(acc.counts, 5 * x.counts)


def test_accumulated_iterations_equal_direct_rebuild():
    shape = ModelShape(4, 8, 1)
    trace = generate_trace(WorkloadSpec(shape, seed=9), 3)
    acc = EAM.new(shape, EAMKind.REQUEST)
    for iteration in trace.iterations:
        it = EAM.new(shape)
        for ev in iteration:
            it.record(ev)
        acc.accumulate(it)
    direct = np.zeros((4, 8), np.int64)
    for iteration in trace.iterations:
        for ev in iteration:
            for e, t in ev.assignments:
                direct[ev.layer_idx, e] += t
    assert np.array_equal(acc.counts, direct)


def test_accumulate_rejects_other_shape():
    with pytest.raises(ShapeMismatch):
        eam([[1, 0]]).accumulate(eam([[1, 0, 0]]))


# -- distance --------------------------------------------------------------------------------


def test_distance_examples():
    assert eam_distance(eam([[1, 0], [0, 1]]), eam([[1, 0], [1, 0]])) == pytest.approx(0.5, abs=1e-12)
    assert eam_distance(eam([[1, 0]]), eam([[2, 0]])) == 0.0
    a = eam([[3, 1, 0], [0, 2, 2]])
    assert eam_distance(a, a) == 0.0


def test_zero_row_conventions():
    assert eam_distance(eam([[0, 0]]), eam([[0, 0]])) == 0.0
    assert eam_distance(eam([[0, 0]]), eam([[1, 0]])) == 1.0


@given(counts_2x3, counts_2x3)
def test_distance_matches_scalar_reference(a, b):
    assert eam_distance(eam(a), eam(b)) == pytest.approx(scalar_distance(a.tolist(), b.tolist()), abs=1e-12)


@given(counts_2x3, counts_2x3)
def test_distance_symmetric_and_bounded(a, b):
    d = eam_distance(eam(a), eam(b))
    assert 0.0 <= d <= 1.0
    assert d == eam_distance(eam(b), eam(a))


@given(counts_2x3, st.integers(1, 50), st.integers(1, 50))
def test_distance_row_scale_invariant(a, k0, k1):
    scaled = a * np.array([[k0], [k1]])
    assert eam_distance(eam(a), eam(scaled)) == pytest.approx(0.0, abs=1e-12)


# -- collection ------------------------------------------------------------------------------


def test_match_empty_and_self():
    shape = ModelShape(2, 3)
    c = EAMC(shape, 4)
    probe = request_eam(shape, [[1, 0, 2], [0, 1, 0]])
    assert c.match(probe) is None
    c.insert(request_eam(shape, [[0, 5, 0], [1, 0, 0]]))
    c.insert(probe)
    m = c.match(probe)
    assert m.distance == 0.0 and m.entry == probe


def test_match_equals_linear_scan():
    rng = np.random.default_rng(0)
    shape = ModelShape(3, 6)
    entries = [request_eam(shape, rng.integers(0, 4, (3, 6))) for _ in range(100)]
    c = EAMC(shape, 100, entries=entries)
    for _ in range(30):
        probe = request_eam(shape, rng.integers(0, 4, (3, 6)))
        ref = [scalar_distance(e.counts.tolist(), probe.counts.tolist()) for e in entries]
        best = min(range(100), key=lambda i: (ref[i], i))
        got = c.match(probe)
        assert got.position == best
        assert got.distance == pytest.approx(ref[best], abs=1e-12)


def test_replacement_evicts_nearest_entry():
    shape = ModelShape(2, 3)
    e1 = request_eam(shape, [[5, 0, 0], [5, 0, 0]])
    e2 = request_eam(shape, [[0, 5, 0], [0, 5, 0]])
    e3 = request_eam(shape, [[0, 0, 5], [0, 0, 5]])
    e4 = request_eam(shape, [[0, 1, 4], [0, 0, 3]])
    c = EAMC(shape, 3)
    for e in (e1, e2, e3):
        assert c.insert(e) is None
    assert c.insert(e4) == e3
    assert c.entries == [e1, e2, e4]


def test_insert_below_capacity_grows():
    shape = ModelShape(1, 2)
    c = EAMC(shape, 2)
    c.insert(request_eam(shape, [[1, 0]]))
    assert c.insert(request_eam(shape, [[0, 1]])) is None
    assert len(c) == 2 and c.evicted == 0


def test_insert_matches_bruteforce_argmin_oracle():
    rng = np.random.default_rng(1)
    shape = ModelShape(2, 4)
    c = EAMC(shape, 10)
    model = []  # (seq, counts)
    for seq in range(60):
        new = rng.integers(0, 3, (2, 4))
        if len(model) < 10:
            expect = None
            model.append((seq, new))
        else:
            d = [scalar_distance(m.tolist(), new.tolist()) for _, m in model]
            pos = min(range(10), key=lambda i: (round(d[i], 12), model[i][0]))
            expect = model[pos][1]
            model[pos] = (seq, new)
        out = c.insert(request_eam(shape, new))
        assert len(c) <= 10
        if expect is None:
            assert out is None
        else:
            assert np.array_equal(out.counts, expect)


def test_only_request_level_same_phase_entries_accepted():
    shape = ModelShape(1, 2)
    c = EAMC(shape, 2, Phase.DECODE)
    with pytest.raises(ShapeMismatch):
        c.insert(EAM(shape, [[1, 0]], EAMKind.ITERATION))
    with pytest.raises(ShapeMismatch):
        c.insert(EAM(shape, [[1, 0]], EAMKind.REQUEST, Phase.PREFILL))
    with pytest.raises(ShapeMismatch):
        c.insert(request_eam(ModelShape(1, 3), [[1, 0, 0]]))


def test_capacity_bound_examples():
    assert eamc_capacity_bound(ModelShape(12, 128), 0.75) == 3072
    assert eamc_capacity_bound(ModelShape(12, 128), 0.98) == math.ceil(768 * math.log(1536)) == 5635
    assert eamc_capacity_bound(ModelShape(1, 1), 0.75) == 2


# -- persistence -----------------------------------------------------------------------------


def test_snapshot_roundtrip_empty(tmp_path):
    c = EAMC(ModelShape(2, 2), 5)
    c.save(tmp_path / "c.json")
    back = EAMC.load(tmp_path / "c.json")
    assert len(back) == 0 and back.capacity == 5


def test_snapshot_roundtrip_preserves_counts_and_order(tmp_path):
    rng = np.random.default_rng(2)
    shape = ModelShape(3, 4)
    c = EAMC(shape, 100)
    for _ in range(130):
        c.insert(request_eam(shape, rng.integers(0, 9, (3, 4))))
    c.save(tmp_path / "c.json")
    back = EAMC.load(tmp_path / "c.json", shape)
    assert [e.counts.tolist() for e in back.entries] == [e.counts.tolist() for e in c.entries]
    assert back.seqs == c.seqs and back.next_seq == c.next_seq
    probe = request_eam(shape, rng.integers(0, 9, (3, 4)))
    assert back.insert(probe.copy()) == c.insert(probe.copy())


def test_snapshot_shape_mismatch_and_corruption(tmp_path):
    c = EAMC(ModelShape(2, 2), 3)
    c.save(tmp_path / "c.json")
    with pytest.raises(SnapshotError):
        EAMC.load(tmp_path / "c.json", ModelShape(2, 3))
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(SnapshotError):
        EAMC.load(tmp_path / "bad.json")
    d = c.to_dict()
    d["version"] = 99
    with pytest.raises(SnapshotError):
        EAMC.from_dict(d)


def test_collection_bundle_roundtrip(tmp_path):
    shape = ModelShape(1, 2)
    eamcs = {ph: EAMC(shape, 2, ph) for ph in Phase}
    eamcs[Phase.PREFILL].insert(request_eam(shape, [[1, 2]], Phase.PREFILL))
    save_collections(eamcs, tmp_path / "b.json")
    back = load_collections(tmp_path / "b.json", shape)
    assert set(back) == set(Phase)
    assert back[Phase.PREFILL].entries[0].counts.tolist() == [[1, 2]]
