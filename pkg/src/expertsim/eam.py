"""Expert activation matrices (EAM) and the bounded EAM collection (EAMC)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ModelShape, RoutingEvent

SNAPSHOT_FORMAT = "expertsim.eamc"
SNAPSHOT_VERSION = 1
_APPROX_MARGIN = 1e-4


class EAMKind(str, Enum):
    ITERATION = "iteration"
    REQUEST = "request"


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class ShapeMismatch(ValueError):
    pass


class SnapshotError(ValueError):
    """Snapshot is corrupt, of an unknown version, or for a different model."""


@dataclass
class EAM:
    shape: ModelShape
    counts: np.ndarray
    kind: EAMKind = EAMKind.ITERATION
    phase: Phase = Phase.DECODE

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        expected = (self.shape.n_layers, self.shape.n_experts_per_layer)
        if self.counts.shape != expected:
            raise ShapeMismatch(f"counts shape {self.counts.shape} != {expected}")
        if (self.counts < 0).any():
            raise ValueError("EAM counts must be non-negative")
        self.kind = EAMKind(self.kind)
        self.phase = Phase(self.phase)

    @classmethod
    def new(cls, shape: ModelShape, kind=EAMKind.ITERATION, phase=Phase.DECODE) -> "EAM":
        return cls(shape, np.zeros((shape.n_layers, shape.n_experts_per_layer), np.int64), kind, phase)

    def copy(self) -> "EAM":
        return EAM(self.shape, self.counts.copy(), self.kind, self.phase)

    def record(self, event: RoutingEvent) -> "EAM":
        """Add an event's token counts in place. Out-of-range events leave the EAM untouched."""
        L, E = self.counts.shape
        if not 0 <= event.layer_idx < L:
            raise IndexError(f"layer_idx {event.layer_idx} out of range [0, {L})")
        for expert, _ in event.assignments:
            if not 0 <= expert < E:
                raise IndexError(f"expert_idx {expert} out of range [0, {E})")
        for expert, tokens in event.assignments:
            self.counts[event.layer_idx, expert] += tokens
        return self

    def accumulate(self, other: "EAM") -> "EAM":
        if other.shape != self.shape:
            raise ShapeMismatch(f"{other.shape} != {self.shape}")
        if other.phase != self.phase:
            raise ShapeMismatch(f"phase {other.phase.value} != {self.phase.value}")
        self.counts += other.counts
        return self

    def row_ratios(self, layer: int) -> np.ndarray:
        row = self.counts[layer]
        total = row.sum()
        if total == 0:
            return np.zeros(row.shape, dtype=np.float64)
        return row / total

    def __eq__(self, other) -> bool:
        if not isinstance(other, EAM):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.kind == other.kind
            and self.phase == other.phase
            and np.array_equal(self.counts, other.counts)
        )


def _unit_rows(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """L2-normalised rows plus a mask of all-zero rows.

    Cosine similarity ignores positive scaling, so normalising each row by its
    sum first (as the distance is defined) gives the same unit vector.
    """
    c = np.asarray(counts, dtype=np.float64)
    norms = np.sqrt((c * c).sum(axis=-1))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    return c / safe[..., None], zero


def _distances(stack: np.ndarray, probe: np.ndarray) -> np.ndarray:
    """Distances from each matrix in ``stack`` (k, L, E) to ``probe`` (L, E), float64."""
    a = np.asarray(stack, dtype=np.float64)
    b = np.asarray(probe, dtype=np.float64)
    # integer-valued dot products and squared norms are exact in float64, so
    # proportional rows give sqrt(x*x) == x and a similarity of exactly 1
    dot = (a * b).sum(axis=-1)
    norm2 = (a * a).sum(axis=-1) * (b * b).sum(axis=-1)
    za, zb = (a == 0).all(axis=-1), (b == 0).all(axis=-1)
    sims = np.divide(dot, np.sqrt(norm2), out=np.zeros_like(dot), where=norm2 > 0)
    sims = np.where(za & zb, 1.0, np.minimum(sims, 1.0))
    return np.clip(1.0 - sims.mean(axis=-1), 0.0, 1.0)


def eam_distance(a: EAM, b: EAM) -> float:
    """One minus the mean per-layer cosine similarity of row-normalised counts.

    Two all-zero rows count as identical (similarity 1); exactly one zero row
    counts as similarity 0.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    return float(_distances(a.counts[None], b.counts)[0])


@dataclass
class MatchResult:
    entry: EAM
    distance: float
    position: int


@dataclass
class EAMC:
    """Fixed-capacity collection of request-level EAMs, all sharing one shape and phase.

    Entries live in slots; a replacement reuses the evicted entry's slot. Each
    entry carries an insertion sequence number used to break distance ties in
    favour of the oldest entry.
    """

    shape: ModelShape
    capacity: int
    phase: Phase = Phase.DECODE
    entries: List[EAM] = field(default_factory=list)
    seqs: List[int] = field(default_factory=list)
    next_seq: int = 0
    inserted: int = 0
    evicted: int = 0
    version: int = field(default=0, compare=False)  # bumped on every mutation

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        self.phase = Phase(self.phase)
        L, E = self.shape.n_layers, self.shape.n_experts_per_layer
        # float32 keeps the scan memory-bound footprint small; near-ties are re-ranked exactly
        self._unit = np.zeros((self.capacity, L, E), dtype=np.float32)
        self._zero = np.ones((self.capacity, L), dtype=bool)
        entries, seqs = list(self.entries), list(self.seqs)
        self.entries, self.seqs = [], []
        if seqs and len(seqs) != len(entries):
            raise ValueError("seqs must match entries")
        for i, entry in enumerate(entries):
            self._check(entry)
            self._set_slot(len(self.entries), entry)
            self.entries.append(entry)
            self.seqs.append(seqs[i] if seqs else i)
        if self.entries:
            self.next_seq = max(self.next_seq, max(self.seqs) + 1)

    def __len__(self) -> int:
        return len(self.entries)

    def _check(self, eam: EAM, request_only: bool = True) -> None:
        if eam.shape != self.shape:
            raise ShapeMismatch(f"EAM shape {eam.shape} != collection shape {self.shape}")
        if request_only and eam.kind != EAMKind.REQUEST:
            raise ShapeMismatch("only request-level EAMs can be stored")
        if eam.phase != self.phase:
            raise ShapeMismatch(f"EAM phase {eam.phase.value} != collection phase {self.phase.value}")

    def _set_slot(self, pos: int, eam: EAM) -> None:
        unit, zero = _unit_rows(eam.counts)
        self._unit[pos] = unit
        self._zero[pos] = zero
        self.version += 1

    def row_similarities(self, probe_counts: np.ndarray, rows: Sequence[int]) -> np.ndarray:
        """Approximate per-row similarities (n_entries, len(rows)) of the probe against every entry."""
        n = len(self.entries)
        rows = list(rows)
        u, z = _unit_rows(np.asarray(probe_counts)[rows])
        sims = np.einsum("nre,re->nr", self._unit[:n, rows], u.astype(np.float32))
        return np.where(self._zero[:n][:, rows] & z, 1.0, sims)

    def near_from_approx(self, approx: np.ndarray, probe: EAM, slack: float) -> List[MatchResult]:
        """Refine approximate distances (slot order) to the exact near set, oldest first."""
        rough = np.flatnonzero(approx <= approx.min() + slack + _APPROX_MARGIN)
        if len(rough) == 1:
            i = int(rough[0])
            return [MatchResult(self.entries[i], float(_distances(self.entries[i].counts[None], probe.counts)[0]), i)]
        d_exact = _distances(np.stack([self.entries[i].counts for i in rough]), probe.counts)
        best = d_exact.min()
        near = [(int(i), float(x)) for i, x in zip(rough, d_exact) if x <= best + slack]
        near.sort(key=lambda ix: self.seqs[ix[0]])
        return [MatchResult(self.entries[i], x, i) for i, x in near]

    def distances(self, probe: EAM) -> np.ndarray:
        """Approximate (float32) distance from every stored entry to ``probe``, in slot order."""
        if probe.shape != self.shape:
            raise ShapeMismatch(f"probe shape {probe.shape} != collection shape {self.shape}")
        n = len(self.entries)
        if n == 0:
            return np.empty(0)
        u, z = _unit_rows(probe.counts)
        sims = np.einsum("nle,le->nl", self._unit[:n], u.astype(np.float32))
        sims = np.where(self._zero[:n] & z, 1.0, sims)
        return 1.0 - sims.mean(axis=1, dtype=np.float64)

    def _near(self, probe: EAM, slack: float) -> List[Tuple[int, float]]:
        """Entries within ``slack`` of the best match, with exact distances."""
        d = self.distances(probe)
        rough = np.flatnonzero(d <= d.min() + slack + _APPROX_MARGIN)
        d_exact = _distances(np.stack([self.entries[i].counts for i in rough]), probe.counts)
        exact = [(int(i), float(x)) for i, x in zip(rough, d_exact)]
        best = min(x for _, x in exact)
        return [(i, x) for i, x in exact if x <= best + slack]

    def _argmin_oldest(self, probe: EAM) -> Tuple[int, float]:
        near = self._near(probe, 0.0)
        return min(near, key=lambda ix: (ix[1], self.seqs[ix[0]]))

    def match(self, probe: EAM) -> Optional[MatchResult]:
        if probe.shape != self.shape:
            raise ShapeMismatch(f"probe shape {probe.shape} != collection shape {self.shape}")
        if not self.entries:
            return None
        pos, dist = self._argmin_oldest(probe)
        return MatchResult(self.entries[pos], dist, pos)

    def match_within(self, probe: EAM, slack: float) -> List[MatchResult]:
        """Every entry whose distance is within ``slack`` of the best match, oldest first."""
        if probe.shape != self.shape:
            raise ShapeMismatch(f"probe shape {probe.shape} != collection shape {self.shape}")
        if not self.entries:
            return []
        near = sorted(self._near(probe, slack), key=lambda ix: self.seqs[ix[0]])
        return [MatchResult(self.entries[i], x, i) for i, x in near]

    def insert(self, eam: EAM) -> Optional[EAM]:
        """Store ``eam``; at capacity, replace the entry nearest to it and return the evictee."""
        self._check(eam)
        eam = eam.copy()
        evictee = None
        if len(self.entries) < self.capacity:
            pos = len(self.entries)
            self.entries.append(eam)
            self.seqs.append(self.next_seq)
        else:
            pos, _ = self._argmin_oldest(eam)
            evictee = self.entries[pos]
            self.entries[pos] = eam
            self.seqs[pos] = self.next_seq
            self.evicted += 1
        self._set_slot(pos, eam)
        self.next_seq += 1
        self.inserted += 1
        return evictee

    def clear(self) -> None:
        self.version += 1
        self.entries.clear()
        self.seqs.clear()
        self._zero[:] = True

    # persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "shape": self.shape.to_dict(),
            "capacity": self.capacity,
            "phase": self.phase.value,
            "next_seq": self.next_seq,
            "inserted": self.inserted,
            "evicted": self.evicted,
            "entries": [
                {"seq": s, "counts": e.counts.reshape(-1).tolist()}
                for e, s in zip(self.entries, self.seqs)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, expected_shape: Optional[ModelShape] = None) -> "EAMC":
        if not isinstance(d, dict) or d.get("format") != SNAPSHOT_FORMAT:
            raise SnapshotError("not an EAMC snapshot")
        if d.get("version") != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {d.get('version')!r}")
        try:
            shape = ModelShape.from_dict(d["shape"])
            if expected_shape is not None and shape != expected_shape:
                raise SnapshotError(f"snapshot shape {shape} != expected {expected_shape}")
            phase = Phase(d["phase"])
            L, E = shape.n_layers, shape.n_experts_per_layer
            entries, seqs = [], []
            for item in d["entries"]:
                counts = np.asarray(item["counts"], dtype=np.int64)
                if counts.size != L * E:
                    raise SnapshotError(f"entry has {counts.size} counts, expected {L * E}")
                entries.append(EAM(shape, counts.reshape(L, E), EAMKind.REQUEST, phase))
                seqs.append(int(item["seq"]))
            eamc = cls(shape, int(d["capacity"]), phase, entries, seqs)
            if len(eamc) > eamc.capacity:
                raise SnapshotError("snapshot holds more entries than its capacity")
            eamc.next_seq = int(d["next_seq"])
            eamc.inserted = int(d.get("inserted", len(entries)))
            eamc.evicted = int(d.get("evicted", 0))
        except SnapshotError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt EAMC snapshot: {exc}") from exc
        return eamc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path, expected_shape: Optional[ModelShape] = None) -> "EAMC":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"corrupt EAMC snapshot: {exc}") from exc
        return cls.from_dict(d, expected_shape)


def eamc_capacity_bound(shape: ModelShape, similarity: float) -> int:
    """Collection size that guarantees the given worst-case trace similarity (sphere covering)."""
    le = shape.n_layers * shape.n_experts_per_layer
    if similarity == 0.75:
        return 2 * le
    if similarity == 0.98:
        return math.ceil(0.5 * le * math.log(le))
    raise ValueError(f"unsupported similarity level {similarity}; use 0.75 or 0.98")


BUNDLE_FORMAT = "expertsim.eamc-set"


def save_collections(eamcs: Dict[Phase, EAMC], path) -> None:
    """Write per-phase collections to one versioned JSON snapshot."""
    doc = {
        "format": BUNDLE_FORMAT,
        "version": SNAPSHOT_VERSION,
        "collections": [eamcs[ph].to_dict() for ph in Phase if ph in eamcs],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_collections(path, expected_shape: Optional[ModelShape] = None) -> Dict[Phase, EAMC]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"corrupt EAMC snapshot: {exc}") from exc
    if isinstance(doc, dict) and doc.get("format") == SNAPSHOT_FORMAT:
        eamc = EAMC.from_dict(doc, expected_shape)
        return {eamc.phase: eamc}
    if not isinstance(doc, dict) or doc.get("format") != BUNDLE_FORMAT:
        raise SnapshotError("not an EAMC snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {doc.get('version')!r}")
    out = {}
    for item in doc.get("collections", []):
        eamc = EAMC.from_dict(item, expected_shape)
        if eamc.phase in out:
            raise SnapshotError(f"duplicate {eamc.phase.value} collection")
        out[eamc.phase] = eamc
    return out
