"""Trace-driven simulator for expert offloading in mixture-of-experts serving."""

from .core import ExpertId, ModelShape, RequestTrace, RoutingEvent, validate_trace
from .eam import EAM, EAMC, EAMKind, Phase, eam_distance, eamc_capacity_bound
from .engine import SimReport, run, run_matrix
from .memsim import HardwareSpec, MemoryHierarchy
from .policy import PolicyKind
from .workload import TraceGenerator, WorkloadSpec, generate_corpus, ingest_traces

__all__ = [
    "EAM", "EAMC", "EAMKind", "ExpertId", "HardwareSpec", "MemoryHierarchy", "ModelShape",
    "Phase", "PolicyKind", "RequestTrace", "RoutingEvent", "SimReport", "TraceGenerator",
    "WorkloadSpec", "eam_distance", "eamc_capacity_bound", "generate_corpus", "ingest_traces",
    "run", "run_matrix", "validate_trace",
]
