"""
Scaling Benchmarks for CLOAK

Sweeps over writing participants, model size, payload size and gateway
count, each a longest-path scenario per configuration, plus the export of
the resulting reports (CSV, chain, summary table, JSON and XLSX).
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Union

import orjson
from tqdm import tqdm

from src.bench.scenario import (
    FUNCTIONALITIES, BenchReport, plan_longest_path, run_scenario,
)
from src.core.base_contract import ContractRegistry
from src.core.choreography import ChoreographyModel, parse_model, replicate_model, with_elements
from src.core.errors import BenchConfigError, StorageFailure
from src.utils.config import EngineSettings, default_settings
from src.utils.file_operations import (
    log_report_hash, sanitize_filename, validate_folder_path, write_csv_rows, write_excel_report,
    write_json_report,
)
from src.utils.system_info import get_system_info

logger = logging.getLogger(__name__)

BENCH_HEADERS = ["config_value", "functionality", "time_ms", "gas"]
STEP_HEADERS = ["config_value", "step", "functionality", "action", "actor", "target", "time_ms", "gas", "status"]

DEFAULT_PAYLOAD_SIZES = (256, 1024, 4096, 16384, 65536)
GATEWAY_BENCH_MESSAGES = 11


# ---------------------------------------------------------------------------
# Model derivations
# ---------------------------------------------------------------------------

def participant_model(model: ChoreographyModel, count: int) -> ChoreographyModel:
    """Reassign message senders round-robin over `count` roles P1..Pcount"""
    messages = model.message_elements
    if not 2 <= count <= len(messages):
        raise BenchConfigError(f"Participant count {count} outside [2, {len(messages)}]")
    roles = [f"P{i}" for i in range(1, count + 1)]
    position = {m.element_id: i for i, m in enumerate(messages)}
    elements = []
    for element in model.elements:
        if element.is_message:
            i = position[element.element_id]
            element = replace(element, sender_role=roles[i % count], receiver_role=roles[(i + 1) % count])
        elements.append(element)
    return with_elements(model, elements, roles=frozenset(roles), model_id=f"{model.model_id}-p{count}")


def gateway_model(blocks: int, messages: int = GATEWAY_BENCH_MESSAGES) -> ChoreographyModel:
    """Message chain wrapping `blocks` split/join blocks, alternating parallel and exclusive"""
    if blocks < 0 or messages < 1 + 2 * blocks:
        raise BenchConfigError(f"{messages} messages cannot host {blocks} gateway block(s)")

    def message(n: int, variables=()) -> dict:
        sender, receiver = ("A", "B") if n % 2 else ("B", "A")
        return {"id": f"n{n}", "kind": "MESSAGE", "sender": sender, "receiver": receiver, "vars": list(variables)}

    elements = [message(1, [{"name": "go", "type": "BOOL"}])]
    flows = []
    current, n = "n1", 2
    for b in range(1, blocks + 1):
        left, right = f"n{n}", f"n{n + 1}"
        split, join = f"s{b}", f"j{b}"
        if b % 2:
            elements.append({"id": split, "kind": "AND_SPLIT"})
            elements.append({"id": join, "kind": "AND_JOIN"})
        else:
            elements.append({"id": split, "kind": "XOR_SPLIT",
                             "branches": [{"cond": "go == true", "next": left}, {"default": True, "next": right}]})
            elements.append({"id": join, "kind": "XOR_JOIN"})
        elements.extend([message(n), message(n + 1)])
        flows.extend([[current, split], [split, left], [split, right], [left, join], [right, join]])
        current, n = join, n + 2
    while n <= messages:
        elements.append(message(n))
        flows.append([current, f"n{n}"])
        current, n = f"n{n}", n + 1

    document = {"id": f"gateways-{blocks}", "roles": ["A", "B"], "start": "n1",
                "elements": elements, "flows": flows}
    return parse_model(orjson.dumps(document))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _sweep(label: str, values: Sequence, build: Callable[[Union[int, str]], tuple],
           settings: Optional[EngineSettings], store_root: Optional[Union[str, Path]],
           progress: bool) -> List[BenchReport]:
    settings = settings or default_settings()
    reports = []
    for value in tqdm(values, desc=f"bench {label}", unit="config", disable=not progress):
        model, payload_size = build(value)
        script = plan_longest_path(model, payload_size=payload_size,
                                   auditor_roles=tuple(settings.auditor_roles), label=label)
        root = None if store_root is None else str(Path(store_root) / f"{label}-{value}")
        reports.append(run_scenario(script, settings, root, config_value=value))
        logger.info(f"bench {label}={value}: gas {reports[-1].gas}")
    return reports


def bench_participants(model: ChoreographyModel, counts: Iterable[int] = range(2, 11),
                       settings: Optional[EngineSettings] = None, store_root=None,
                       progress: bool = False) -> List[BenchReport]:
    counts = list(counts)
    for count in counts:
        participant_model(model, count)
    payload = (settings or default_settings()).payload_size
    return _sweep("participants", counts, lambda c: (participant_model(model, c), payload),
                  settings, store_root, progress)


def bench_model_size(model: ChoreographyModel, factors: Iterable[int] = range(1, 11),
                     settings: Optional[EngineSettings] = None, store_root=None,
                     progress: bool = False) -> List[BenchReport]:
    factors = list(factors)
    if any(k < 1 for k in factors):
        raise BenchConfigError("Replication factors must be positive")
    payload = (settings or default_settings()).payload_size
    # k = 1 runs the base model itself so its totals match a plain scenario run
    return _sweep("size", factors, lambda k: (model if k == 1 else replicate_model(model, k), payload),
                  settings, store_root, progress)


def bench_payload(model: ChoreographyModel, sizes: Iterable[int] = DEFAULT_PAYLOAD_SIZES,
                  settings: Optional[EngineSettings] = None, store_root=None,
                  progress: bool = False) -> List[BenchReport]:
    sizes = list(sizes)
    if any(s < 0 for s in sizes):
        raise BenchConfigError("Payload sizes must be non-negative")
    return _sweep("payload", sizes, lambda s: (model, s), settings, store_root, progress)


def bench_gateways(blocks: Iterable[int] = range(0, 6), messages: int = GATEWAY_BENCH_MESSAGES,
                   settings: Optional[EngineSettings] = None, store_root=None,
                   progress: bool = False) -> List[BenchReport]:
    blocks = list(blocks)
    payload = (settings or default_settings()).payload_size
    return _sweep("gateways", blocks, lambda b: (gateway_model(b, messages), payload),
                  settings, store_root, progress)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def bench_rows(reports: Sequence[BenchReport]) -> List[list]:
    """One row per functionality per configuration"""
    rows = []
    for report in reports:
        time_ms, gas = report.time_ms, report.gas
        for functionality in FUNCTIONALITIES:
            rows.append([report.config_value, functionality, f"{time_ms[functionality]:.3f}", gas[functionality]])
    return rows


def step_rows(reports: Sequence[BenchReport]) -> List[list]:
    return [
        [report.config_value, row.index, row.functionality, row.action, row.actor, row.target,
         f"{row.time_ms:.3f}", row.gas, row.status]
        for report in reports for row in report.rows
    ]


def summary_table(reports: Sequence[BenchReport]) -> str:
    header = f"{'config':>10} " + " ".join(f"{f + ' ms':>14} {f + ' gas':>16}" for f in FUNCTIONALITIES)
    lines = [header, "-" * len(header)]
    for report in reports:
        time_ms, gas = report.time_ms, report.gas
        cells = " ".join(f"{time_ms[f]:>14.3f} {gas[f]:>16}" for f in FUNCTIONALITIES)
        lines.append(f"{str(report.config_value):>10} {cells}")
    return "\n".join(lines) + "\n"


def export(reports: Sequence[BenchReport], out_dir: Union[str, Path], label: Optional[str] = None) -> List[Path]:
    """Write CSV, chain, summary, JSON and XLSX files for a sweep; returns the written paths"""
    if not reports:
        raise BenchConfigError("Nothing to export")
    is_valid, result = validate_folder_path(str(out_dir), create=True)
    if not is_valid:
        raise StorageFailure(f"Cannot export to {out_dir}: {result}")
    out = Path(result)
    stem = sanitize_filename(label or reports[0].label)

    written: List[Path] = []
    try:
        written.append(Path(write_csv_rows(out / f"{stem}_bench.csv", BENCH_HEADERS, bench_rows(reports))))
        written.append(Path(write_csv_rows(out / f"{stem}_steps.csv", STEP_HEADERS, step_rows(reports))))
        for report in reports:
            if report.engine is not None:
                chain = out / f"{stem}_{sanitize_filename(str(report.config_value))}_chain.ndjson"
                written.append(report.engine.ledger.export_chain(chain))
        summary = out / f"{stem}_summary.txt"
        summary.write_text(summary_table(reports), encoding="utf-8")
        written.append(summary)

        system_info = get_system_info(str(out), contract_registry=ContractRegistry())
        document = {
            "bench": stem,
            "configurations": [
                {"config_value": r.config_value, "instance_id": r.instance_id, "chain_verified": r.chain_verified,
                 "time_ms": r.time_ms, "gas": r.gas, "total_gas": r.total_gas}
                for r in reports
            ],
            "steps": [dict(zip(STEP_HEADERS, row)) for row in step_rows(reports)],
        }
        written.append(Path(write_json_report(out / f"{stem}_report.json", document, system_info)))
        written.append(Path(write_excel_report(out / f"{stem}_report.xlsx", {
            "Bench": (BENCH_HEADERS, bench_rows(reports)),
            "Steps": (STEP_HEADERS, step_rows(reports)),
        }, system_info)))
    except OSError as e:
        raise StorageFailure(f"Export to {out} failed: {e}") from e

    for path in written:
        log_report_hash(str(path), logger)
    return written
