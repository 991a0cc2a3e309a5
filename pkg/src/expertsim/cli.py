"""
Command-line front end.

    expertsim generate    --config cfg.json --out traces.jsonl
    expertsim simulate    --config cfg.json [--policy NAME|all] [--out report.csv]
    expertsim sweep       --config cfg.json --axis eamc_capacity --values 1,2,4,8
    expertsim bench-match --entries 1000,10000
    expertsim eamc save   --config cfg.json --out eamc.json
    expertsim eamc load   eamc.json --config cfg.json

Exit codes: 0 success, 2 config error, 3 validation error, 4 policy-contract violation.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import ModelShape, RequestTrace, TraceValidationError, dumps_traces
from .eam import EAM, EAMC, EAMKind, Phase, SnapshotError, load_collections, save_collections
from .engine import reports_to_csv, run, run_matrix, write_event_log, normalize
from .memsim import HardwareSpec, PolicyContractError
from .policy import PolicyKind
from .workload import TraceGenerator, TraceIngestError, WorkloadSpec, ingest_traces

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_CONTRACT = 0, 2, 3, 4
SWEEP_AXES = ("eamc_capacity", "buffer_slots", "bandwidth")
DEFAULT_BUFFER_FRACTION = 0.08


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


_TOP_KEYS = {"shape", "hardware", "workload", "trace", "n_requests", "policy", "eamc_capacity", "seed",
             "seeds", "sweep", "out", "event_log", "eamc_snapshot", "workers"}
_WORKLOAD_KEYS = {"n_groups", "group_fidelity", "reuse_skew", "prompt_len", "decode_len", "batch_size"}
_HW_KEYS = set(HardwareSpec.__dataclass_fields__)


@dataclass
class RunConfig:
    shape: ModelShape
    hardware: HardwareSpec
    workload: Optional[WorkloadSpec] = None
    trace: Optional[str] = None
    n_requests: int = 200
    policies: List[str] = field(default_factory=lambda: [PolicyKind.ACTIVATION_AWARE.value])
    eamc_capacity: int = 64
    seed: int = 0
    seeds: Optional[List[int]] = None
    sweep_axis: Optional[str] = None
    sweep_values: Optional[List[int]] = None
    out: Optional[str] = None
    event_log: Optional[str] = None
    eamc_snapshot: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if (self.workload is None) == (self.trace is None):
            raise ConfigError("workload", "exactly one of 'workload' and 'trace' must be given")

    def with_seed(self, seed: int) -> "RunConfig":
        wl = replace(self.workload, seed=seed) if self.workload is not None else None
        return replace(self, seed=seed, workload=wl)

    def to_dict(self) -> dict:
        d = {"shape": self.shape.to_dict(), "hardware": self.hardware.to_dict()}
        if self.workload is not None:
            wl = self.workload.to_dict()
            wl.pop("shape")
            wl.pop("seed")
            d["workload"] = wl
        else:
            d["trace"] = self.trace
        d.update(n_requests=self.n_requests, policy=self.policies if len(self.policies) > 1 else self.policies[0],
                 eamc_capacity=self.eamc_capacity, seed=self.seed)
        if self.seeds is not None:
            d["seeds"] = self.seeds
        if self.sweep_axis is not None:
            d["sweep"] = {"axis": self.sweep_axis, "values": self.sweep_values}
        for k in ("out", "event_log", "eamc_snapshot"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.workers != 1:
            d["workers"] = self.workers
        return d


def _policies(value) -> List[str]:
    names = [value] if isinstance(value, str) else list(value)
    if names == ["all"]:
        return [k.value for k in PolicyKind]
    out = []
    for n in names:
        try:
            out.append(PolicyKind(n).value)
        except ValueError:
            raise ConfigError("policy", f"unknown policy {n!r}") from None
    return out


def _int(d: dict, key: str, lo: int = 0) -> int:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(key, f"expected an integer >= {lo}, got {v!r}")
    return v


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for k in doc:
        if k not in _TOP_KEYS:
            raise ConfigError(k, "unknown key")
    try:
        shape = ModelShape.from_dict(doc.get("shape", {"n_layers": 12, "n_experts_per_layer": 64, "top_k": 1}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("shape", str(exc)) from None

    hw_doc = dict(doc.get("hardware", {}))
    for k in hw_doc:
        if k not in _HW_KEYS:
            raise ConfigError(f"hardware.{k}", "unknown key")
    hw_doc.setdefault("gpu_buffer_slots", max(1, int(DEFAULT_BUFFER_FRACTION * shape.n_total_experts)))
    try:
        hw = HardwareSpec.from_dict(hw_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError("hardware", str(exc)) from None

    seed = _int(doc, "seed") if "seed" in doc else 0
    if seed >= 2**64:
        raise ConfigError("seed", "must fit in 64 bits")
    workload = None
    if "workload" in doc:
        wl = doc["workload"]
        if not isinstance(wl, dict):
            raise ConfigError("workload", "expected an object")
        for k in wl:
            if k not in _WORKLOAD_KEYS:
                raise ConfigError(f"workload.{k}", "unknown key")
        try:
            workload = WorkloadSpec.from_dict({**wl, "seed": seed}, shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("workload", str(exc)) from None
    trace = doc.get("trace")
    if trace is not None and not isinstance(trace, str):
        raise ConfigError("trace", "expected a path string")

    kw = {}
    if "n_requests" in doc:
        kw["n_requests"] = _int(doc, "n_requests")
    if "eamc_capacity" in doc:
        kw["eamc_capacity"] = _int(doc, "eamc_capacity", 1)
    if "workers" in doc:
        kw["workers"] = _int(doc, "workers", 1)
    if "seeds" in doc:
        seeds = doc["seeds"]
        if not isinstance(seeds, list) or not all(isinstance(s, int) and 0 <= s < 2**64 for s in seeds):
            raise ConfigError("seeds", "expected a list of unsigned 64-bit integers")
        kw["seeds"] = seeds
    if "sweep" in doc:
        sw = doc["sweep"]
        if not isinstance(sw, dict) or sw.get("axis") not in SWEEP_AXES:
            raise ConfigError("sweep.axis", f"expected one of {', '.join(SWEEP_AXES)}")
        vals = sw.get("values")
        if not isinstance(vals, list) or not vals or not all(isinstance(v, int) and v >= 1 for v in vals):
            raise ConfigError("sweep.values", "expected a non-empty list of positive integers")
        kw["sweep_axis"], kw["sweep_values"] = sw["axis"], vals
    for k in ("out", "event_log", "eamc_snapshot"):
        if k in doc:
            if not isinstance(doc[k], str):
                raise ConfigError(k, "expected a path string")
            kw[k] = doc[k]
    policies = _policies(doc.get("policy", PolicyKind.ACTIVATION_AWARE.value))
    if workload is None and trace is None:
        # neither given: fall back to the default synthetic workload
        workload = WorkloadSpec(shape, seed=seed)
    return RunConfig(shape, hw, workload, trace, policies=policies, seed=seed, **kw)


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None


def resolve(args) -> RunConfig:
    """Config file plus command-line overrides (flags win)."""
    doc = load_config(getattr(args, "config", None))
    if getattr(args, "trace", None):
        doc.pop("workload", None)
        doc["trace"] = args.trace
    if getattr(args, "policy", None):
        doc["policy"] = args.policy
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "out", None):
        doc["out"] = args.out
    if getattr(args, "event_log", None):
        doc["event_log"] = args.event_log
    if getattr(args, "n_requests", None) is not None:
        doc["n_requests"] = args.n_requests
    if getattr(args, "axis", None):
        sw = dict(doc.get("sweep", {}))
        sw["axis"] = args.axis
        if args.values:
            sw["values"] = args.values
        doc["sweep"] = sw
    return parse_config(doc)


def traces_for(cfg: RunConfig, seed: Optional[int] = None) -> List[RequestTrace]:
    if cfg.trace is not None:
        return ingest_traces(cfg.trace, cfg.shape)
    spec = cfg.workload if seed is None else replace(cfg.workload, seed=seed)
    return TraceGenerator(spec).corpus(cfg.n_requests)


def _emit(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- commands ------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve(args)
    if cfg.workload is None:
        raise ConfigError("workload", "generate needs a workload spec, not a trace path")
    _emit(dumps_traces(traces_for(cfg)), cfg.out)
    return EXIT_OK


def _initial_eamcs(cfg: RunConfig) -> Optional[Dict[Phase, EAMC]]:
    if cfg.eamc_snapshot is None:
        return None
    loaded = load_collections(cfg.eamc_snapshot, cfg.shape)
    return {ph: loaded.get(ph) or EAMC(cfg.shape, cfg.eamc_capacity, ph) for ph in Phase}


def cmd_simulate(args) -> int:
    cfg = resolve(args)
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    traces = traces_for(cfg)
    log = [] if cfg.event_log else None
    reports = []
    for p in cfg.policies:
        events = [] if log is not None else None
        rep = run(traces, cfg.shape, cfg.hardware, p, cfg.eamc_capacity, eamcs=_initial_eamcs(cfg),
                  event_log=events)
        rep.seed = cfg.seed
        reports.append(rep)
        if events is not None:
            log.extend({"policy": p, **e} for e in events)
    normalize(reports)
    _emit(reports_to_csv(reports), cfg.out)
    if cfg.event_log:
        write_event_log(log, cfg.event_log)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve(args)
    if cfg.sweep_axis is None:
        raise ConfigError("sweep.axis", f"missing; expected one of {', '.join(SWEEP_AXES)}")
    if args.dump_config:
        sys.stdout.write(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    axis, values = cfg.sweep_axis, cfg.sweep_values
    kw = {"capacities": [cfg.eamc_capacity]}
    if axis == "eamc_capacity":
        kw["capacities"] = values
    elif axis == "buffer_slots":
        kw["buffer_slots"] = values
    else:
        kw["bandwidths"] = values
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed]
    reports = run_matrix(lambda s: traces_for(cfg, s), cfg.shape, cfg.hardware, cfg.policies, seeds,
                         workers=cfg.workers, **kw)
    _emit(reports_to_csv(reports), cfg.out)
    return EXIT_OK


def bench_match(n_entries: int, shape: ModelShape, queries: int = 1000, seed: int = 0) -> dict:
    """Fill a collection with random request EAMs and time ``queries`` best-match lookups."""
    rng = np.random.default_rng(seed)
    L, E = shape.n_layers, shape.n_experts_per_layer
    entries = [EAM(shape, rng.poisson(0.5, size=(L, E)).astype(np.int64), EAMKind.REQUEST, Phase.DECODE)
               for _ in range(n_entries)]
    eamc = EAMC(shape, n_entries, Phase.DECODE, entries=entries)
    probes = [EAM(shape, rng.poisson(0.5, size=(L, E)).astype(np.int64), EAMKind.ITERATION, Phase.DECODE)
              for _ in range(min(queries, 64))]
    times = []
    for q in range(queries):
        t0 = time.perf_counter()
        eamc.match(probes[q % len(probes)])
        times.append(time.perf_counter() - t0)
    return {
        "entries": n_entries,
        "shape": f"{L}x{E}",
        "queries": queries,
        "mean_us": statistics.fmean(times) * 1e6,
        "median_us": statistics.median(times) * 1e6,
    }


def cmd_bench_match(args) -> int:
    shape = ModelShape(args.layers, args.experts, 1)
    results = [bench_match(n, shape, args.queries, args.seed or 0) for n in args.entries]
    for r in results:
        sys.stdout.write(f"entries={r['entries']} shape={r['shape']} queries={r['queries']} "
                         f"mean_us={r['mean_us']:.1f} median_us={r['median_us']:.1f}\n")
    if len(results) > 1:
        base = results[0]["mean_us"]
        for r in results[1:]:
            sys.stdout.write(f"ratio {r['entries']}/{results[0]['entries']} = {r['mean_us'] / base:.2f}\n")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n")
    return EXIT_OK


def cmd_eamc(args) -> int:
    if args.eamc_cmd == "save":
        cfg = resolve(args)
        if cfg.out is None:
            raise ConfigError("out", "eamc save needs --out")
        eamcs = _initial_eamcs(cfg) or {ph: EAMC(cfg.shape, cfg.eamc_capacity, ph) for ph in Phase}
        run(traces_for(cfg), cfg.shape, cfg.hardware, PolicyKind.ACTIVATION_AWARE, cfg.eamc_capacity, eamcs=eamcs)
        save_collections(eamcs, cfg.out)
        return EXIT_OK
    doc = load_config(args.config)
    shape = parse_config(doc).shape if doc else None
    for ph, eamc in sorted(load_collections(args.path, shape).items(), key=lambda kv: kv[0].value):
        sys.stdout.write(f"{ph.value}: {len(eamc)}/{eamc.capacity} entries, shape "
                         f"{eamc.shape.n_layers}x{eamc.shape.n_experts_per_layer}, "
                         f"inserted={eamc.inserted} evicted={eamc.evicted}\n")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertsim", description="MoE expert offloading simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output path (default: stdout)"):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("generate", help="write synthetic traces as JSONL")
    common(p)
    p.add_argument("--n-requests", type=int)
    p.set_defaults(func=cmd_generate)

    for name, func, hlp in (("simulate", cmd_simulate, "run policies, write one CSV row each"),
                            ("sweep", cmd_sweep, "run a policy x seed x axis matrix")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--trace", help="JSONL trace file (replaces the workload spec)")
        p.add_argument("--policy", help="policy name or 'all'")
        p.add_argument("--n-requests", type=int)
        p.add_argument("--event-log", help="JSONL event log path")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        if name == "sweep":
            p.add_argument("--axis", choices=SWEEP_AXES)
            p.add_argument("--values", type=_int_list)
        p.set_defaults(func=func)

    p = sub.add_parser("bench-match", help="time EAMC best-match queries")
    p.add_argument("--entries", type=_int_list, default=[1000, 10000])
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--experts", type=int, default=128)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_match)

    p = sub.add_parser("eamc", help="persist or inspect EAM collections")
    esub = p.add_subparsers(dest="eamc_cmd", required=True)
    s = esub.add_parser("save", help="simulate activation_aware and snapshot its collections")
    common(s)
    s.add_argument("--trace")
    s.add_argument("--n-requests", type=int)
    l = esub.add_parser("load", help="validate a snapshot and summarize it")
    l.add_argument("path")
    l.add_argument("--config", help="config whose shape the snapshot must match")
    p.set_defaults(func=cmd_eamc)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceIngestError, TraceValidationError, SnapshotError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PolicyContractError as exc:
        print(f"policy contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
