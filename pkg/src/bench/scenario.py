"""
Scenario Module for CLOAK

Scenario scripts (actors plus ordered steps), the longest-path planner and
the runner that drives a script through the engine while timing and
metering each functionality bucket.
"""

import hashlib
import logging
import tempfile
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from src.core.choreography import ChoreographyModel, ConditionExpr, ElementKind, ValueType, serialize_model
from src.core.content_store import ContentStore
from src.core.engine import Engine
from src.core.errors import BenchConfigError, CloakError, PolicyNotSatisfied, ScenarioAborted
from src.core.ledger import create_account
from src.utils.config import EngineSettings, default_settings

logger = logging.getLogger(__name__)

CONFIGURE = "configure"
INSTANTIATE = "instantiate"
TRANSACT = "transact"
INSPECT = "inspect"
FUNCTIONALITIES = (CONFIGURE, INSTANTIATE, TRANSACT, INSPECT)

TRANSACT_PUBLIC = "transact_public"
TRANSACT_CONFIDENTIAL = "transact_confidential"
REQUEST_KEY = "request_key"
INSPECT_PUBLIC = "inspect_public"
INSPECT_CONFIDENTIAL = "inspect_confidential"

STEP_FUNCTIONALITY = {
    TRANSACT_PUBLIC: TRANSACT,
    TRANSACT_CONFIDENTIAL: TRANSACT,
    REQUEST_KEY: INSPECT,
    INSPECT_PUBLIC: INSPECT,
    INSPECT_CONFIDENTIAL: INSPECT,
}

DEFAULT_PAYLOAD_SIZE = 1024


@dataclass(frozen=True)
class ActorDef:
    name: str
    role: str
    seed: str


@dataclass(frozen=True)
class ScenarioStep:
    action: str
    actor: str
    target: str = ""
    variables: Dict[str, Union[bool, int, str]] = field(default_factory=dict)
    payload_size: int = DEFAULT_PAYLOAD_SIZE
    expect_denied: bool = False

    @property
    def functionality(self) -> str:
        return STEP_FUNCTIONALITY[self.action]


@dataclass(frozen=True)
class ScenarioScript:
    model: ChoreographyModel
    actors: Tuple[ActorDef, ...]
    steps: Tuple[ScenarioStep, ...]
    kickstarter: str
    auditor_roles: Tuple[str, ...] = ("MINISTRY-INSPECTOR",)
    label: str = ""

    def actor(self, name: str) -> ActorDef:
        for actor in self.actors:
            if actor.name == name:
                return actor
        raise BenchConfigError(f"Undeclared actor '{name}'")

    @property
    def participants(self) -> Tuple[ActorDef, ...]:
        return tuple(a for a in self.actors if a.role in self.model.roles)

    @property
    def auditors(self) -> Tuple[ActorDef, ...]:
        return tuple(a for a in self.actors if a.role in self.auditor_roles and a.role not in self.model.roles)

    def validate(self) -> None:
        names = [a.name for a in self.actors]
        if len(names) != len(set(names)):
            raise BenchConfigError("Actor names must be unique")
        for role in sorted(self.model.roles):
            bound = [a for a in self.actors if a.role == role]
            if len(bound) != 1:
                raise BenchConfigError(f"Role {role} needs exactly one actor, found {len(bound)}")
        if self.actor(self.kickstarter).role not in self.model.roles:
            raise BenchConfigError(f"Kickstarter '{self.kickstarter}' is not a participant")
        for index, step in enumerate(self.steps, 1):
            if step.action not in STEP_FUNCTIONALITY:
                raise BenchConfigError(f"Step {index}: unknown action '{step.action}'")
            self.actor(step.actor)
            if step.action in (TRANSACT_PUBLIC, TRANSACT_CONFIDENTIAL, INSPECT_CONFIDENTIAL):
                if not self.model.has_element(step.target):
                    raise BenchConfigError(f"Step {index}: unknown element '{step.target}'")
            if step.payload_size < 0:
                raise BenchConfigError(f"Step {index}: negative payload size")


@dataclass(frozen=True)
class StepRow:
    index: int
    functionality: str
    action: str
    actor: str
    target: str
    time_ms: float
    gas: int
    status: str


@dataclass
class BenchReport:
    label: str
    config_value: Union[int, str]
    rows: List[StepRow]
    instance_id: str
    chain_verified: bool
    engine: Optional[Engine] = field(default=None, repr=False, compare=False)
    accounts: Dict[str, object] = field(default_factory=dict, repr=False, compare=False)

    @property
    def time_ms(self) -> Dict[str, float]:
        totals = {f: 0.0 for f in FUNCTIONALITIES}
        for row in self.rows:
            totals[row.functionality] += row.time_ms
        return totals

    @property
    def gas(self) -> Dict[str, int]:
        totals = {f: 0 for f in FUNCTIONALITIES}
        for row in self.rows:
            totals[row.functionality] += row.gas
        return totals

    @property
    def total_gas(self) -> int:
        return sum(row.gas for row in self.rows)

    def rows_for(self, functionality: str) -> List[StepRow]:
        return [row for row in self.rows if row.functionality == functionality]


def synthetic_payload(message_id: str, size: int) -> bytes:
    """Deterministic filler bytes standing in for a real document"""
    block = hashlib.sha256(message_id.encode("utf-8")).digest()
    return (block * (size // len(block) + 1))[:size]


def default_actors(model: ChoreographyModel, auditor_roles: Sequence[str] = ("MINISTRY-INSPECTOR",)) -> Tuple[ActorDef, ...]:
    """One actor per role, named after it"""
    roles = sorted(model.roles) + [r for r in auditor_roles if r not in model.roles]
    return tuple(ActorDef(role.lower(), role, f"cloak/actor/{role}") for role in roles)


# ---------------------------------------------------------------------------
# Planner
# ---------------------------------------------------------------------------

def _satisfying_value(condition: ConditionExpr):
    literal = condition.literal
    comparator = condition.comparator
    if comparator in ("==", "<=", ">="):
        return literal
    if comparator == "<":
        return literal - 1
    if comparator == ">":
        return literal + 1
    if isinstance(literal, bool):
        return not literal
    if isinstance(literal, int):
        return literal + 1
    return f"{literal}-other"


def _filler_value(value_type: ValueType, name: str):
    if value_type is ValueType.BOOL:
        return True
    if value_type is ValueType.INT:
        return 1
    return f"{name}-value"


def _preferred_values(model: ChoreographyModel) -> Dict[str, Union[bool, int, str]]:
    """Values steering every exclusive split to its first non-default branch"""
    values: Dict[str, Union[bool, int, str]] = {}
    for gateway in model.gateway_elements:
        for branch in gateway.branches:
            if not branch.is_default:
                values.setdefault(branch.condition.variable_name, _satisfying_value(branch.condition))
                break
    return values


def _walk_longest_path(model: ChoreographyModel, preferred: Dict) -> List[Tuple[str, Dict]]:
    """Token game over the model; returns (message id, public vars) in firing order"""
    states = {e.element_id: "INACTIVE" for e in model.elements}
    joins: Dict[str, int] = {}
    variables: Dict[str, Union[bool, int, str]] = {}
    fired: List[Tuple[str, Dict]] = []
    limit = 10 * max(1, len(model.elements))

    def enter(element_id: str) -> None:
        element = model.element(element_id)
        if element.is_message:
            states[element_id] = "ENABLED"
            return
        if element.kind is ElementKind.XOR_SPLIT:
            targets = None
            for branch in element.branches:
                if branch.is_default:
                    continue
                value = variables.get(branch.condition.variable_name)
                if value is None:
                    raise BenchConfigError(f"{element_id} reads {branch.condition.variable_name} before it is set")
                if branch.condition.evaluate(value):
                    targets = branch.targets
                    break
            if targets is None:
                targets = next(b.targets for b in element.branches if b.is_default)
            states[element_id] = "COMPLETED"
            for target in targets:
                enter(target)
            return
        if element.kind is ElementKind.AND_JOIN:
            joins[element_id] = joins.get(element_id, 0) + 1
            if joins[element_id] < model.incoming_count(element_id):
                return
            joins[element_id] = 0
        states[element_id] = "COMPLETED"
        for successor in model.successors(element_id):
            enter(successor)

    enter(model.start_element_id)
    while True:
        enabled = [e for e in model.message_elements if states[e.element_id] == "ENABLED"]
        if not enabled:
            return fired
        if len(fired) >= limit:
            raise BenchConfigError(f"Longest path of '{model.model_id}' does not terminate")
        message = enabled[0]
        values = {d.name: preferred.get(d.name, _filler_value(d.value_type, d.name))
                  for d in message.public_variables}
        variables.update(values)
        fired.append((message.element_id, values))
        states[message.element_id] = "COMPLETED"
        for successor in model.successors(message.element_id):
            enter(successor)


def plan_longest_path(model: ChoreographyModel, actors: Optional[Sequence[ActorDef]] = None,
                      payload_size: int = DEFAULT_PAYLOAD_SIZE,
                      auditor_roles: Sequence[str] = ("MINISTRY-INSPECTOR",),
                      kickstarter: Optional[str] = None, label: str = "") -> ScenarioScript:
    """Script following preferred branches to the end, then an auditor reading every document"""
    actors = tuple(actors or default_actors(model, auditor_roles))
    by_role = {a.role: a.name for a in actors}
    steps: List[ScenarioStep] = []
    confidential_fired: List[str] = []

    for message_id, values in _walk_longest_path(model, _preferred_values(model)):
        element = model.element(message_id)
        actor = by_role.get(element.sender_role)
        if actor is None:
            raise BenchConfigError(f"No actor plays {element.sender_role}")
        if element.confidential:
            steps.append(ScenarioStep(TRANSACT_CONFIDENTIAL, actor, message_id, values, payload_size))
            confidential_fired.append(message_id)
        else:
            steps.append(ScenarioStep(TRANSACT_PUBLIC, actor, message_id, values))

    auditor = next((a.name for a in actors if a.role in auditor_roles and a.role not in model.roles), None)
    if auditor is not None:
        steps.append(ScenarioStep(REQUEST_KEY, auditor))
        for message_id in dict.fromkeys(confidential_fired):
            steps.append(ScenarioStep(INSPECT_CONFIDENTIAL, auditor, message_id))

    first_sender = model.element(model.start_element_id)
    if kickstarter is None:
        kickstarter = by_role.get(first_sender.sender_role) if first_sender.is_message else None
        kickstarter = kickstarter or next(a.name for a in actors if a.role in model.roles)

    script = ScenarioScript(model, actors, tuple(steps), kickstarter, tuple(auditor_roles),
                            label or model.model_id)
    script.validate()
    logger.info(f"Planned longest path of '{model.model_id}': {len(steps)} steps")
    return script


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

class _Meter:
    """Wall clock and gas delta of one bucketed action"""

    def __init__(self, engine: Engine):
        self._engine = engine

    def __enter__(self):
        self.started = time.perf_counter()
        self.gas_before = self._engine.ledger.total_gas
        return self

    def __exit__(self, *exc):
        self.time_ms = (time.perf_counter() - self.started) * 1000.0
        self.gas = self._engine.ledger.total_gas - self.gas_before
        return False


def run_scenario(script: ScenarioScript, settings: Optional[EngineSettings] = None,
                 store_root: Optional[str] = None, config_value: Union[int, str] = "") -> BenchReport:
    """Execute configure, instantiate and every step; abort on the first failing step"""
    script.validate()
    settings = settings or default_settings()
    if store_root is None:
        store_root = tempfile.mkdtemp(prefix="cloak_bench_")
        logger.debug(f"Bench content store at {store_root}")
    engine = Engine(settings, ContentStore(store_root))
    accounts = {a.name: create_account(a.seed.encode("utf-8")) for a in script.actors}
    rows: List[StepRow] = []
    model = script.model

    owner = accounts[script.kickstarter]
    with _Meter(engine) as m:
        deployment = engine.configure(serialize_model(model), owner, list(script.auditor_roles))
    rows.append(StepRow(0, CONFIGURE, "configure", script.kickstarter, model.model_id, m.time_ms, m.gas, "SUCCESS"))

    for auditor in script.auditors:
        account = accounts[auditor.name]
        with _Meter(engine) as m:
            engine.register_auditor(account, engine.certify(account.address, auditor.role))
        rows.append(StepRow(0, CONFIGURE, "register_auditor", auditor.name, auditor.role, m.time_ms, m.gas, "SUCCESS"))

    with _Meter(engine) as m:
        pid = engine.next_instance_id()
        registrations = [
            engine.register_participant(accounts[a.name], a.role,
                                        engine.certify(accounts[a.name].address, a.role, pid))
            for a in script.participants
        ]
        pid = engine.instantiate(deployment, registrations, accounts[script.kickstarter])
    rows.append(StepRow(0, INSTANTIATE, "instantiate", script.kickstarter, pid, m.time_ms, m.gas, "SUCCESS"))

    keys: Dict[str, object] = {}
    for index, step in enumerate(script.steps, 1):
        account = accounts[step.actor]
        status = "SUCCESS"
        try:
            with _Meter(engine) as m:
                if step.action == TRANSACT_PUBLIC:
                    receipt = engine.transact_public(pid, step.target, account, step.variables)
                elif step.action == TRANSACT_CONFIDENTIAL:
                    payload = synthetic_payload(step.target, step.payload_size)
                    _, receipt = engine.transact_confidential(pid, step.target, account, payload, step.variables)
                elif step.action == REQUEST_KEY:
                    keys[step.actor] = engine.request_key(account)
                    receipt = None
                elif step.action == INSPECT_PUBLIC:
                    engine.inspect_public(pid, step.target)
                    receipt = None
                else:
                    key = keys.get(step.actor) or engine.request_key(account)
                    keys[step.actor] = key
                    try:
                        engine.inspect_confidential(key, pid, step.target)
                        if step.expect_denied:
                            raise ScenarioAborted(index, "UnexpectedAccess")
                    except PolicyNotSatisfied:
                        if not step.expect_denied:
                            raise
                        status = "DENIED"
                    receipt = None
        except ScenarioAborted:
            raise
        except CloakError as e:
            reason = getattr(e, "reason", None) or e.__class__.__name__
            logger.warning(f"Scenario '{script.label}' aborted at step {index}: {reason}")
            raise ScenarioAborted(index, reason) from e

        if receipt is not None and not receipt.succeeded:
            logger.warning(f"Scenario '{script.label}' aborted at step {index}: {receipt.reason}")
            raise ScenarioAborted(index, receipt.reason)
        rows.append(StepRow(index, step.functionality, step.action, step.actor, step.target,
                            m.time_ms, m.gas, status))

    verified = engine.ledger.verify_chain()
    report = BenchReport(script.label or model.model_id, config_value, rows, pid, verified, engine, accounts)
    logger.info(f"Scenario '{report.label}' finished: {len(script.steps)} steps, "
                f"{report.total_gas} gas, chain verified={verified}")
    return report
