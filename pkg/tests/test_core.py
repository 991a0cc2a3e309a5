import json

import pytest

from expertsim.core import (
    EmptyIterationList,
    ExpertId,
    ExpertIndexOutOfRange,
    LayerCountMismatch,
    ModelShape,
    RequestTrace,
    TraceValidationError,
    dumps_traces,
    is_valid_trace,
    validate_trace,
)

from conftest import make_trace


def test_shape_rejects_bad_values():
    with pytest.raises(ValueError):
        ModelShape(0, 4)
    with pytest.raises(ValueError):
        ModelShape(2, 0)
    with pytest.raises(ValueError):
        ModelShape(2, 4, top_k=5)
    assert ModelShape(2, 4, 2).n_total_experts == 8


def test_shape_roundtrip():
    s = ModelShape(3, 5, 2)
    assert ModelShape.from_dict(s.to_dict()) == s
    assert len(list(s.experts())) == 15


def test_expert_id_orders_lexicographically():
    ids = [ExpertId(1, 0), ExpertId(0, 3), ExpertId(0, 1)]
    assert sorted(ids) == [ExpertId(0, 1), ExpertId(0, 3), ExpertId(1, 0)]
    assert str(ExpertId(2, 7)) == "E[2,7]"


def test_well_formed_trace_accepted():
    shape = ModelShape(2, 4)
    validate_trace(make_trace([[[(0, 1)], [(3, 2)]]]), shape)


def test_expert_index_equal_to_e_rejected():
    shape = ModelShape(2, 4)
    with pytest.raises(ExpertIndexOutOfRange):
        validate_trace(make_trace([[[(0, 1)], [(4, 1)]]]), shape)


def test_missing_layer_rejected():
    shape = ModelShape(2, 4)
    with pytest.raises(LayerCountMismatch):
        validate_trace(make_trace([[[(0, 1)]]]), shape)


def test_empty_iterations_rejected():
    with pytest.raises(EmptyIterationList):
        validate_trace(RequestTrace("x", 1, ()), ModelShape(1, 2))


def test_zero_token_assignment_rejected():
    assert not is_valid_trace(make_trace([[[(0, 0)]]]), ModelShape(1, 2))
    with pytest.raises(TraceValidationError):
        validate_trace(make_trace([[[(0, 0)]]]), ModelShape(1, 2))


def test_json_roundtrip():
    t = make_trace([[[(0, 2), (1, 1)], [(3, 3)]], [[(1, 1)], [(2, 1)]]], rid="abc", prompt_tokens=3)
    line = dumps_traces([t]).strip()
    assert RequestTrace.from_obj(json.loads(line)) == t
