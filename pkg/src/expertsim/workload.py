"""Synthetic routing traces with group activation and skewed per-request reuse, plus JSONL ingest."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ModelShape,
    RequestTrace,
    RoutingEvent,
    TraceValidationError,
    validate_trace,
)


class TraceIngestError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class DiscreteDist:
    """Finite-support distribution; uniform over ``values`` unless ``weights`` is given."""

    values: Tuple[int, ...]
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if not self.values:
            raise ValueError("distribution needs at least one value")
        if min(self.values) < 1:
            raise ValueError("distribution support must be >= 1")
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != len(self.values) or any(x < 0 for x in w) or sum(w) <= 0:
                raise ValueError("weights must be non-negative, non-zero and match values")
            object.__setattr__(self, "weights", w)

    def sample(self, rng: np.random.Generator) -> int:
        if self.weights is None:
            return self.values[int(rng.integers(len(self.values)))]
        p = np.asarray(self.weights) / sum(self.weights)
        return self.values[int(rng.choice(len(self.values), p=p))]

    @classmethod
    def constant(cls, v: int) -> "DiscreteDist":
        return cls((v,))

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "DiscreteDist":
        return cls(tuple(range(lo, hi + 1)))

    def to_dict(self) -> dict:
        d = {"values": list(self.values)}
        if self.weights is not None:
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_obj(cls, obj) -> "DiscreteDist":
        if isinstance(obj, int):
            return cls.constant(obj)
        if isinstance(obj, list):
            return cls(tuple(obj))
        return cls(tuple(obj["values"]), tuple(obj["weights"]) if obj.get("weights") else None)


@dataclass(frozen=True)
class WorkloadSpec:
    shape: ModelShape
    n_groups: int = 8
    group_fidelity: float = 0.9
    reuse_skew: float = 1.2
    prompt_len: DiscreteDist = field(default_factory=lambda: DiscreteDist.uniform(4, 16))
    decode_len: DiscreteDist = field(default_factory=lambda: DiscreteDist.uniform(8, 32))
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if not 0.0 <= self.group_fidelity <= 1.0:
            raise ValueError("group_fidelity must be in [0, 1]")
        if self.reuse_skew < 0:
            raise ValueError("reuse_skew must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.to_dict(),
            "n_groups": self.n_groups,
            "group_fidelity": self.group_fidelity,
            "reuse_skew": self.reuse_skew,
            "prompt_len": self.prompt_len.to_dict(),
            "decode_len": self.decode_len.to_dict(),
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, shape: Optional[ModelShape] = None) -> "WorkloadSpec":
        kw = {k: d[k] for k in ("n_groups", "group_fidelity", "reuse_skew", "batch_size", "seed") if k in d}
        for k in ("prompt_len", "decode_len"):
            if k in d:
                kw[k] = DiscreteDist.from_obj(d[k])
        if "shape" in d:
            shape = ModelShape.from_dict(d["shape"])
        if shape is None:
            raise KeyError("shape")
        return cls(shape=shape, **kw)


def _group_table(spec: WorkloadSpec) -> np.ndarray:
    """Designated experts per (group, layer): array of shape (n_groups, L, top_k)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    L, E, k = spec.shape.n_layers, spec.shape.n_experts_per_layer, spec.shape.top_k
    table = np.empty((spec.n_groups, L, k), dtype=np.int64)
    for g in range(spec.n_groups):
        for layer in range(L):
            table[g, layer] = rng.choice(E, size=k, replace=False)
    return table


def _zipf_weights(rng: np.random.Generator, n: int, skew: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -skew
    w /= w.sum()
    out = np.empty(n)
    out[rng.permutation(n)] = w
    return out


class TraceGenerator:
    """Caches the group table so a corpus does not rebuild it per request."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.groups = _group_table(spec)

    def _route(self, rng, group_of_token: np.ndarray, reuse: np.ndarray, layer: int) -> RoutingEvent:
        spec = self.spec
        E, k = spec.shape.n_experts_per_layer, spec.shape.top_k
        counts = np.zeros(E, dtype=np.int64)
        follow = rng.random(len(group_of_token)) < spec.group_fidelity
        for g in group_of_token[follow]:
            counts[self.groups[g, layer]] += 1
        n_free = int((~follow).sum())
        if n_free:
            if k == 1:
                picks = rng.choice(E, size=n_free, p=reuse[layer])
                np.add.at(counts, picks, 1)
            else:
                for _ in range(n_free):
                    counts[rng.choice(E, size=k, replace=False, p=reuse[layer])] += 1
        nz = np.flatnonzero(counts)
        return RoutingEvent(layer, tuple((int(e), int(counts[e])) for e in nz))

    def generate(self, request_index: int) -> RequestTrace:
        spec = self.spec
        L, E = spec.shape.n_layers, spec.shape.n_experts_per_layer
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, request_index)))
        seq_groups = rng.integers(spec.n_groups, size=spec.batch_size)
        prompt_lens = [spec.prompt_len.sample(rng) for _ in range(spec.batch_size)]
        n_decode = spec.decode_len.sample(rng)
        reuse = np.stack([_zipf_weights(rng, E, spec.reuse_skew) for _ in range(L)])

        prefill_tokens = np.repeat(seq_groups, prompt_lens)
        iterations = [tuple(self._route(rng, prefill_tokens, reuse, layer) for layer in range(L))]
        for _ in range(n_decode):
            iterations.append(tuple(self._route(rng, seq_groups, reuse, layer) for layer in range(L)))
        return RequestTrace(f"req-{spec.seed}-{request_index}", int(sum(prompt_lens)), tuple(iterations))

    def corpus(self, n: int, start: int = 0) -> List[RequestTrace]:
        return [self.generate(i) for i in range(start, start + n)]


def generate_trace(spec: WorkloadSpec, request_index: int) -> RequestTrace:
    return TraceGenerator(spec).generate(request_index)


def generate_corpus(spec: WorkloadSpec, n: int) -> List[RequestTrace]:
    return TraceGenerator(spec).corpus(n)


def activation_ratio(trace: RequestTrace, shape: ModelShape) -> float:
    """Fraction of all L*E experts activated anywhere in the trace."""
    seen = set()
    for iteration in trace.iterations:
        for event in iteration:
            for expert, _ in event.assignments:
                seen.add((event.layer_idx, expert))
    return len(seen) / shape.n_total_experts


def parse_traces(lines: Sequence[str], shape: ModelShape) -> List[RequestTrace]:
    traces = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            trace = RequestTrace.from_obj(obj)
        except ValueError as exc:  # includes JSONDecodeError
            raise TraceIngestError(f"parse error: {exc}", lineno) from exc
        try:
            validate_trace(trace, shape)
        except TraceValidationError as exc:
            raise TraceIngestError(f"validation error: {exc}", lineno) from exc
        traces.append(trace)
    return traces


def ingest_traces(path, shape: ModelShape) -> List[RequestTrace]:
    with open(path) as f:
        return parse_traces(f.readlines(), shape)
