import numpy as np
import pytest
from hypothesis import settings

from expertsim.core import ModelShape, RequestTrace, RoutingEvent
from expertsim.eam import EAM, EAMKind, Phase

settings.register_profile("ci", deadline=None, max_examples=100)
settings.load_profile("ci")


def make_trace(routes, rid="r", prompt_tokens=1):
    """Build a trace from ``routes[iteration][layer] = [(expert, tokens), ...]``."""
    its = [tuple(RoutingEvent(l, tuple(a)) for l, a in enumerate(it)) for it in routes]
    return RequestTrace(rid, prompt_tokens, tuple(its))


def single_path(path, n_iter=1, rid="r"):
    """One token per layer following ``path[layer]`` for every iteration."""
    return make_trace([[[(e, 1)] for e in path]] * n_iter, rid)


def request_eam(shape, counts, phase=Phase.DECODE):
    return EAM(shape, np.asarray(counts), EAMKind.REQUEST, phase)


@pytest.fixture
def small_shape():
    return ModelShape(4, 8, 1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
