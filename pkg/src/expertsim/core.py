"""
Shared domain types: model shape, expert identity, routing events and traces.

Traces are stored as JSON Lines, one request per line::

    {"request_id": "r0", "prompt_tokens": 8,
     "iterations": [[[0, [[3, 8]]], [1, [[5, 6], [2, 2]]]], ...]}

Each iteration is a list of ``[layer, [[expert, tokens], ...]]`` pairs, one
per MoE layer in layer order. Iteration 0 is prefill; the rest are decode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, List, NamedTuple, Sequence, Tuple


class TraceValidationError(ValueError):
    """Base class for trace/shape mismatches."""

    def __init__(self, message: str, iteration: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.layer = layer


class LayerCountMismatch(TraceValidationError):
    pass


class ExpertIndexOutOfRange(TraceValidationError):
    pass


class EmptyIterationList(TraceValidationError):
    pass


@dataclass(frozen=True)
class ModelShape:
    n_layers: int
    n_experts_per_layer: int
    top_k: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_experts_per_layer < 1:
            raise ValueError(f"n_experts_per_layer must be >= 1, got {self.n_experts_per_layer}")
        if not 1 <= self.top_k <= self.n_experts_per_layer:
            raise ValueError(
                f"top_k must be in [1, {self.n_experts_per_layer}], got {self.top_k}"
            )

    @property
    def n_total_experts(self) -> int:
        return self.n_layers * self.n_experts_per_layer

    def experts(self) -> Iterator["ExpertId"]:
        for layer in range(self.n_layers):
            for idx in range(self.n_experts_per_layer):
                yield ExpertId(layer, idx)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_experts_per_layer": self.n_experts_per_layer,
            "top_k": self.top_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(int(d["n_layers"]), int(d["n_experts_per_layer"]), int(d.get("top_k", 1)))


class ExpertId(NamedTuple):
    """(layer, expert) key; ordering is lexicographic."""

    layer_idx: int
    expert_idx: int

    def __str__(self) -> str:
        return f"E[{self.layer_idx},{self.expert_idx}]"


@dataclass(frozen=True)
class RoutingEvent:
    layer_idx: int
    assignments: Tuple[Tuple[int, int], ...]  # (expert_idx, token_count)

    def __post_init__(self):
        # accept lists from callers, store tuples
        object.__setattr__(
            self, "assignments", tuple((int(e), int(t)) for e, t in self.assignments)
        )

    @property
    def n_tokens(self) -> int:
        return sum(t for _, t in self.assignments)

    def experts(self) -> List[ExpertId]:
        return [ExpertId(self.layer_idx, e) for e, _ in self.assignments]


IterationTrace = Tuple[RoutingEvent, ...]


@dataclass(frozen=True)
class RequestTrace:
    request_id: str
    prompt_tokens: int
    iterations: Tuple[IterationTrace, ...]

    def __post_init__(self):
        object.__setattr__(self, "iterations", tuple(tuple(it) for it in self.iterations))

    @property
    def n_decode_iterations(self) -> int:
        return max(len(self.iterations) - 1, 0)

    def to_json(self) -> str:
        iters = [
            [[ev.layer_idx, [[e, t] for e, t in ev.assignments]] for ev in it]
            for it in self.iterations
        ]
        return json.dumps(
            {"request_id": self.request_id, "prompt_tokens": self.prompt_tokens, "iterations": iters},
            separators=(",", ":"),
        )

    @classmethod
    def from_obj(cls, obj: dict) -> "RequestTrace":
        try:
            iterations = tuple(
                tuple(
                    RoutingEvent(int(layer), tuple((int(e), int(t)) for e, t in assigns))
                    for layer, assigns in it
                )
                for it in obj["iterations"]
            )
            return cls(str(obj["request_id"]), int(obj["prompt_tokens"]), iterations)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed trace object: {exc}") from exc


def validate_trace(trace: RequestTrace, shape: ModelShape) -> None:
    """Raise the first violation found, or return None if the trace is well formed."""
    if not trace.iterations:
        raise EmptyIterationList(f"request {trace.request_id!r} has no iterations")
    for it_idx, iteration in enumerate(trace.iterations):
        if len(iteration) != shape.n_layers:
            raise LayerCountMismatch(
                f"request {trace.request_id!r} iteration {it_idx}: "
                f"{len(iteration)} routing events, expected {shape.n_layers}",
                iteration=it_idx,
            )
        for layer, event in enumerate(iteration):
            if event.layer_idx != layer:
                raise LayerCountMismatch(
                    f"request {trace.request_id!r} iteration {it_idx}: "
                    f"event {layer} has layer_idx {event.layer_idx}",
                    iteration=it_idx,
                    layer=layer,
                )
            for expert, tokens in event.assignments:
                if not 0 <= expert < shape.n_experts_per_layer:
                    raise ExpertIndexOutOfRange(
                        f"request {trace.request_id!r} iteration {it_idx} layer {layer}: "
                        f"expert_idx {expert} not in [0, {shape.n_experts_per_layer})",
                        iteration=it_idx,
                        layer=layer,
                    )
                if tokens < 1:
                    raise TraceValidationError(
                        f"request {trace.request_id!r} iteration {it_idx} layer {layer}: "
                        f"token_count {tokens} < 1",
                        iteration=it_idx,
                        layer=layer,
                    )


def is_valid_trace(trace: RequestTrace, shape: ModelShape) -> bool:
    try:
        validate_trace(trace, shape)
    except TraceValidationError:
        return False
    return True


def write_traces(traces: Iterable[RequestTrace], path) -> int:
    n = 0
    with open(path, "w") as f:
        for trace in traces:
            f.write(trace.to_json())
            f.write("\n")
            n += 1
    return n


def dumps_traces(traces: Sequence[RequestTrace]) -> str:
    return "".join(t.to_json() + "\n" for t in traces)
