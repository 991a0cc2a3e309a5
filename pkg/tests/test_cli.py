import csv
import io
import json

import pytest

from expertsim.cli import build_parser, main, parse_config
from expertsim.core import ModelShape
from expertsim.engine import CSV_COLUMNS, reports_to_csv, run
from expertsim.memsim import HardwareSpec
from expertsim.policy import PolicyKind
from expertsim.workload import WorkloadSpec, generate_corpus

SMALL = {"shape": {"n_layers": 3, "n_experts_per_layer": 8, "top_k": 1}, "workload": {"batch_size": 1},
         "n_requests": 4, "hardware": {"gpu_buffer_slots": 3}}


@pytest.fixture
def cfg(tmp_path):
    def write(doc=SMALL, name="cfg.json"):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return str(p)
    return write


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_generate_zero_requests_is_empty(cfg, tmp_path):
    out = tmp_path / "t.jsonl"
    assert main(["generate", "--config", cfg({**SMALL, "n_requests": 0}), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_generate_is_deterministic(cfg, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["generate", "--config", cfg(), "--seed", "7", "--out", str(a)])
    main(["generate", "--config", cfg(), "--seed", "7", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes() and len(a.read_text().splitlines()) == 4


def test_generate_then_simulate_equals_in_memory(cfg, tmp_path):
    traces, out = tmp_path / "t.jsonl", tmp_path / "r.csv"
    main(["generate", "--config", cfg(), "--out", str(traces)])
    assert main(["simulate", "--config", cfg(), "--trace", str(traces), "--policy", "lru", "--out", str(out)]) == 0
    shape = ModelShape(3, 8, 1)
    rep = run(generate_corpus(WorkloadSpec(shape, batch_size=1), 4), shape, HardwareSpec(gpu_buffer_slots=3), "lru")
    rep.seed = 0
    mem = rows(reports_to_csv([rep]))[0]
    got = rows(out.read_text())[0]
    assert {k: got[k] for k in CSV_COLUMNS if "normalized" not in k} == {k: mem[k] for k in CSV_COLUMNS if "normalized" not in k}


def test_simulate_single_and_all(cfg, capsys):
    assert main(["simulate", "--config", cfg(), "--policy", "on_demand"]) == 0
    out = rows(capsys.readouterr().out)
    assert len(out) == 1 and list(out[0]) == CSV_COLUMNS
    assert main(["simulate", "--config", cfg(), "--policy", "all"]) == 0
    out = rows(capsys.readouterr().out)
    assert [r["policy"] for r in out] == [k.value for k in PolicyKind]


def test_simulate_rerun_is_byte_identical(cfg, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--config", cfg(), "--policy", "all", "--out", str(a)])
    main(["simulate", "--config", cfg(), "--policy", "all", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_simulate_writes_event_log(cfg, tmp_path):
    ev = tmp_path / "ev.jsonl"
    main(["simulate", "--config", cfg(), "--policy", "lru", "--event-log", str(ev), "--out", str(tmp_path / "o.csv")])
    assert all(json.loads(x)["policy"] == "lru" for x in ev.read_text().splitlines())


def test_dump_config_roundtrips(cfg, capsys):
    assert main(["simulate", "--config", cfg(), "--seed", "9", "--dump-config"]) == 0
    dumped = json.loads(capsys.readouterr().out)
    assert parse_config(dumped) == parse_config({**SMALL, "seed": 9})


def test_sweep_single_value_equals_simulate(cfg, capsys):
    main(["simulate", "--config", cfg(), "--policy", "on_demand"])
    sim = capsys.readouterr().out
    main(["sweep", "--config", cfg(), "--policy", "on_demand", "--axis", "buffer_slots", "--values", "3"])
    assert capsys.readouterr().out == sim


def test_sweep_capacity_axis_rows(cfg, capsys):
    assert main(["sweep", "--config", cfg(), "--policy", "activation_aware",
                 "--axis", "eamc_capacity", "--values", "1,120"]) == 0
    out = rows(capsys.readouterr().out)
    assert [r["eamc_capacity"] for r in out] == ["1", "120"]


def test_sweep_capacity_hit_rate_non_decreasing(cfg, capsys):
    doc = {"shape": {"n_layers": 6, "n_experts_per_layer": 32, "top_k": 1}, "workload": {"n_groups": 4},
           "n_requests": 60, "policy": "activation_aware", "sweep": {"axis": "eamc_capacity", "values": [1, 4, 16]}}
    assert main(["sweep", "--config", cfg(doc)]) == 0
    rates = [float(r["buffer_hit_rate"]) for r in rows(capsys.readouterr().out)]
    assert rates == sorted(rates)


def test_bench_match_reports_latency(capsys, tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench-match", "--entries", "1,50", "--layers", "2", "--experts", "4", "--queries", "20",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert [r["entries"] for r in res] == [1, 50] and all(r["mean_us"] > 0 for r in res)


def test_eamc_save_and_load(cfg, tmp_path, capsys):
    snap = tmp_path / "e.json"
    assert main(["eamc", "save", "--config", cfg(), "--out", str(snap)]) == 0
    assert main(["eamc", "load", str(snap), "--config", cfg()]) == 0
    assert "decode: 4/64 entries" in capsys.readouterr().out
    other = cfg({**SMALL, "shape": {"n_layers": 4, "n_experts_per_layer": 8}}, "other.json")
    assert main(["eamc", "load", str(snap), "--config", other]) == 3
    doc = {**SMALL, "eamc_snapshot": str(snap), "policy": "activation_aware"}
    assert main(["simulate", "--config", cfg(doc, "warm.json")]) == 0


@pytest.mark.parametrize("doc, key", [
    ({**SMALL, "bogus": 1}, "bogus"),
    ({**SMALL, "policy": "fifo"}, "policy"),
    ({**SMALL, "trace": "x.jsonl"}, "workload"),
    ({**SMALL, "hardware": {"slots": 3}}, "hardware.slots"),
    ({**SMALL, "workload": {"groups": 3}}, "workload.groups"),
    ({**SMALL, "n_requests": -1}, "n_requests"),
])
def test_config_errors_name_the_key(cfg, capsys, doc, key):
    assert main(["simulate", "--config", cfg(doc)]) == 2
    assert repr(key) in capsys.readouterr().err


def test_sweep_needs_axis(cfg):
    assert main(["sweep", "--config", cfg()]) == 2


def test_bad_trace_is_validation_error(cfg, tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"request_id": "x", "prompt_tokens": 1, "iterations": [[[0, [[99, 1]]]]]}\n')
    assert main(["simulate", "--config", cfg(), "--trace", str(bad)]) == 3


def test_contract_violation_exit_code(cfg, monkeypatch):
    from expertsim import cli
    from expertsim.memsim import ProtectedSlot

    def boom(*a, **k):
        raise ProtectedSlot("slot 0 holds protected prefetch")

    monkeypatch.setattr(cli, "run", boom)
    assert main(["simulate", "--config", cfg()]) == 4


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for name in ("generate", "simulate", "sweep", "bench-match", "eamc"):
        assert name in text
