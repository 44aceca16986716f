import csv
import statistics
from dataclasses import replace

import pytest

from src.bench.scaling import (
    bench_gateways, bench_model_size, bench_participants, bench_payload, export, gateway_model, participant_model,
)
from src.bench.scenario import (
    CONFIGURE, INSPECT, INSTANTIATE, TRANSACT, ScenarioStep, plan_longest_path, run_scenario, synthetic_payload,
)
from src.core.engine import PROCESS
from src.core.errors import BenchConfigError, ScenarioAborted


@pytest.fixture(scope="module")
def size_reports(xray_model, settings, tmp_path_factory):
    return bench_model_size(xray_model, range(1, 11), settings, tmp_path_factory.mktemp("size"))


# ---------------------------------------------------------------------------
# Planner and runner
# ---------------------------------------------------------------------------

def test_longest_path_plan(xray_model):
    script = plan_longest_path(xray_model)
    transacts = [s for s in script.steps if s.functionality == TRANSACT]
    assert [s.target for s in transacts] == [f"m{i}" for i in range(1, 11)]
    assert [s.target for s in script.steps if s.action == "inspect_confidential"] == ["m1", "m4", "m6", "m9"]
    assert len(script.steps) == 15
    assert script.kickstarter == "patient"
    assert transacts[1].variables["accepted"] is True


def test_run_completes_the_instance(xray_run):
    rows = xray_run.rows
    assert len(rows) == 18
    assert [r.action for r in rows[:3]] == ["configure", "register_auditor", "instantiate"]
    assert len(xray_run.rows_for(TRANSACT)) == 10
    assert all(r.status == "SUCCESS" for r in rows)
    assert xray_run.chain_verified
    assert xray_run.instance_id == "PID476948"
    instance = xray_run.engine.ledger.query(PROCESS, "getInstance", xray_run.instance_id)
    assert len(instance["element_states"]) == 15
    assert set(instance["element_states"].values()) == {"COMPLETED"}
    assert instance["completed_at"] is not None


def test_bucket_totals(xray_run):
    gas = xray_run.gas
    assert sum(gas.values()) == xray_run.total_gas == xray_run.engine.ledger.total_gas
    assert gas[INSTANTIATE] == max(gas.values())
    key_request = next(r for r in xray_run.engine.ledger.receipts if r.function_name == "logKeyRequest")
    assert gas[INSPECT] == key_request.gas_used


def test_gas_is_deterministic(xray_model, settings, tmp_path):
    script = plan_longest_path(xray_model)
    first = run_scenario(script, settings, str(tmp_path / "a"))
    second = run_scenario(script, settings, str(tmp_path / "b"))
    assert [r.gas for r in first.rows] == [r.gas for r in second.rows]


def test_wrong_actor_aborts_the_scenario(xray_model, settings, tmp_path):
    script = plan_longest_path(xray_model)
    steps = list(script.steps)
    steps[1] = replace(steps[1], actor="patient")
    with pytest.raises(ScenarioAborted) as info:
        run_scenario(replace(script, steps=tuple(steps)), settings, str(tmp_path))
    assert info.value.step_index == 2
    assert info.value.reason == "WrongSender"


def test_denied_read_is_recorded(xray_model, settings, tmp_path):
    script = plan_longest_path(xray_model)
    steps = script.steps + (ScenarioStep("inspect_confidential", "insurance", "m1", expect_denied=True),)
    report = run_scenario(replace(script, steps=steps), settings, str(tmp_path))
    assert report.rows[-1].status == "DENIED"


def test_script_validation(xray_model):
    script = plan_longest_path(xray_model)
    with pytest.raises(BenchConfigError):
        replace(script, steps=(ScenarioStep("dance", "patient"),)).validate()
    with pytest.raises(BenchConfigError):
        replace(script, steps=(ScenarioStep("transact_public", "nobody", "m2"),)).validate()
    with pytest.raises(BenchConfigError):
        replace(script, kickstarter="ministry-inspector").validate()


def test_synthetic_payload():
    assert len(synthetic_payload("m1", 1000)) == 1000
    assert synthetic_payload("m1", 64) == synthetic_payload("m1", 100)[:64]
    assert synthetic_payload("m1", 0) == b""


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def test_model_size_scales_linearly(size_reports):
    factors = list(range(1, 11))
    for functionality in (CONFIGURE, INSTANTIATE, TRANSACT):
        totals = [r.gas[functionality] for r in size_reports]
        assert statistics.correlation(factors, totals) >= 0.99, functionality
    transact = [r.gas[TRANSACT] for r in size_reports]
    assert 9 <= transact[-1] / transact[0] <= 11
    assert len({r.gas[INSPECT] for r in size_reports}) == 1
    assert all(r.chain_verified for r in size_reports)


def test_participants_raise_instantiation_cost(xray_model, settings, tmp_path):
    reports = bench_participants(xray_model, range(2, 11), settings, tmp_path)
    instantiate = [r.gas[INSTANTIATE] for r in reports]
    assert instantiate == sorted(instantiate)
    assert instantiate[-1] > instantiate[0]
    assert all(r.gas[INSTANTIATE] == max(r.gas.values()) for r in reports)


def test_payload_size_does_not_change_gas(xray_model, settings, tmp_path):
    reports = bench_payload(xray_model, (0, 256, 4096), settings, tmp_path)
    assert len({r.gas[TRANSACT] for r in reports}) == 1
    assert [r.config_value for r in reports] == [0, 256, 4096]


def test_gateway_sweep(settings, tmp_path):
    reports = bench_gateways(range(0, 4), settings=settings, store_root=tmp_path)
    # the exclusive block fires one of its two branches
    assert [len(r.rows_for(TRANSACT)) for r in reports] == [11, 11, 10, 10]
    assert all(r.chain_verified for r in reports)


def test_gateway_model_shape():
    model = gateway_model(2)
    assert len(model.message_elements) == 11
    assert [e.kind.value for e in model.gateway_elements] == ["AND_SPLIT", "AND_JOIN", "XOR_SPLIT", "XOR_JOIN"]


@pytest.mark.parametrize("blocks,messages", [(-1, 11), (6, 11), (1, 2)])
def test_gateway_model_limits(blocks, messages):
    with pytest.raises(BenchConfigError):
        gateway_model(blocks, messages)


@pytest.mark.parametrize("count", [1, 11])
def test_participant_model_limits(xray_model, count):
    with pytest.raises(BenchConfigError):
        participant_model(xray_model, count)


def test_participant_model_reassigns_senders(xray_model):
    model = participant_model(xray_model, 3)
    assert model.roles == {"P1", "P2", "P3"}
    assert [m.sender_role for m in model.message_elements[:4]] == ["P1", "P2", "P3", "P1"]


def test_size_factor_must_be_positive(xray_model):
    with pytest.raises(BenchConfigError):
        bench_model_size(xray_model, [0])


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def test_export(size_reports, tmp_path):
    reports = size_reports[:3]
    written = export(reports, tmp_path / "out", "size")
    names = {p.name for p in written}
    assert {"size_bench.csv", "size_steps.csv", "size_summary.txt", "size_report.json", "size_report.xlsx"} <= names
    assert {"size_1_chain.ndjson", "size_2_chain.ndjson", "size_3_chain.ndjson"} <= names

    bench_csv = tmp_path / "out" / "size_bench.csv"
    with open(bench_csv, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    for report in reports:
        gas = sum(int(r["gas"]) for r in rows if r["config_value"] == str(report.config_value))
        assert gas == report.total_gas

    first = bench_csv.read_bytes()
    export(reports, tmp_path / "out", "size")
    assert bench_csv.read_bytes() == first


def test_export_needs_reports(tmp_path):
    with pytest.raises(BenchConfigError):
        export([], tmp_path)
