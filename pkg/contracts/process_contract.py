"""
Process Contract

Factory and proxy for process instances: registers process specifications
once, mints instances, and enforces the choreography control flow on every
public state update (guarded message completion, gateway execution and
successor activation).
"""

import hashlib
import logging
from typing import Any, Callable, Dict, Iterable, Optional

from src.core.attestation import Attestation
from src.core.base_contract import BaseContract, CallContext, GasSchedule
from src.core.choreography import ChoreographyModel, ElementKind, parse_model, serialize_model
from src.core.errors import (
    ContractRevert, ModelSyntaxError, UnknownElement, UnknownInstance, UnknownSpec, UnknownVariable,
    ValidationError,
)

logger = logging.getLogger(__name__)

INACTIVE = "INACTIVE"
ENABLED = "ENABLED"
COMPLETED = "COMPLETED"

DEFAULT_INSTANCE_SEED = 476948


def address_bytes(address: str) -> bytes:
    return bytes.fromhex(address[2:])


def address_text(raw: bytes) -> str:
    return "0x" + raw.hex()


class ProcessContract(BaseContract):
    """Control-flow enforcement for every registered process specification"""

    def __init__(self, schedule: Optional[GasSchedule] = None, certifiers: Iterable[bytes] = (),
                 instance_seed: int = DEFAULT_INSTANCE_SEED, confidentiality_id: str = "confidentiality"):
        super().__init__(schedule)
        self.certifiers = frozenset(certifiers)
        self.instance_seed = instance_seed
        self.confidentiality_id = confidentiality_id
        # decoded from registerSpec calldata; storage holds the digest
        self._models: Dict[int, ChoreographyModel] = {}

    def get_name(self) -> str:
        return "process"

    def get_write_functions(self) -> Dict[str, Callable]:
        return {
            "registerSpec": self.register_spec,
            "createInstance": self.create_instance,
            "updatePublicState": self.update_public_state,
        }

    def get_read_functions(self) -> Dict[str, Callable]:
        return {
            "getSpec": self.get_spec,
            "getElementState": self.get_element_state,
            "getPublicVariable": self.get_public_variable,
            "getPublicVars": self.get_public_vars,
            "getInstance": self.get_instance,
            "peekInstanceId": self.peek_instance_id,
            "listInstances": self.list_instances,
        }

    # --- helpers -----------------------------------------------------------

    def _model(self, spec_id: int) -> ChoreographyModel:
        if f"spec/{spec_id}/digest" not in self.storage or spec_id not in self._models:
            raise UnknownSpec(f"Unknown spec: {spec_id}")
        return self._models[spec_id]

    def _instance_model(self, pid: str) -> ChoreographyModel:
        spec_id = self._read(f"inst/{pid}/spec")
        if spec_id is None:
            raise UnknownInstance(f"Unknown instance: {pid}")
        return self._model(spec_id)

    def _state(self, pid: str, element_id: str) -> str:
        return self._read(f"inst/{pid}/state/{element_id}")

    def _set_state(self, ctx: CallContext, pid: str, element_id: str, state: str) -> None:
        if self._state(pid, element_id) != state:
            self._write(ctx, f"inst/{pid}/state/{element_id}", state)

    def _next_pid(self) -> str:
        return f"PID{self.instance_seed + self._read('inst/count', 0)}"

    # --- configure -----------------------------------------------------------

    def register_spec(self, ctx: CallContext, document: str, policy_locator: str) -> int:
        try:
            model = parse_model(document)
        except (ModelSyntaxError, ValidationError) as e:
            raise ContractRevert("InvalidSpec", str(e))

        if f"modelid/{model.model_id}" in self.storage:
            raise ContractRevert("DuplicateSpec", model.model_id)

        spec_id = self._read("spec/count", 0)
        digest = hashlib.sha256(serialize_model(model)).digest()
        self._write(ctx, "spec/count", spec_id + 1)
        self._write(ctx, f"modelid/{model.model_id}", spec_id)
        self._write(ctx, f"spec/{spec_id}/digest", digest)
        self._write(ctx, f"spec/{spec_id}/model", model.model_id)
        self._write(ctx, f"spec/{spec_id}/owner", address_bytes(ctx.origin))
        self._write(ctx, f"spec/{spec_id}/locator", policy_locator)
        for message in model.message_elements:
            self._write(ctx, f"spec/{spec_id}/auth/{message.element_id}", message.sender_role)

        self._models[spec_id] = model
        self._logger.info(f"Spec {spec_id} registered for model '{model.model_id}'")
        return spec_id

    # --- instantiate -------------------------------------------------------

    def create_instance(self, ctx: CallContext, spec_id: int, bindings: Dict[str, str],
                        attestations: Dict[str, dict], policy_locator: str) -> str:
        try:
            model = self._model(spec_id)
        except UnknownSpec:
            raise ContractRevert("UnknownSpec", str(spec_id))

        for role in sorted(model.roles):
            if role not in bindings:
                raise ContractRevert("MissingRole", role)
        for role in bindings:
            if role not in model.roles:
                raise ContractRevert("UnknownRole", role)

        pid = self._next_pid()
        verified: Dict[str, Attestation] = {}
        for role, address in sorted(bindings.items()):
            raw = attestations.get(role)
            try:
                attestation = Attestation.from_abi(raw)
            except (KeyError, TypeError):
                raise ContractRevert("UnattestedBinding", role)
            if (attestation.subject != address or attestation.claimed_role != role
                    or attestation.instance_scope != pid or not attestation.verify(self.certifiers)):
                raise ContractRevert("UnattestedBinding", role)
            verified[role] = attestation

        if ctx.origin not in bindings.values():
            raise ContractRevert("NotAParticipant", ctx.origin)

        self._write(ctx, "inst/count", self._read("inst/count", 0) + 1)
        self._write(ctx, f"inst/{pid}/spec", spec_id)
        self._write(ctx, f"inst/{pid}/creator", address_bytes(ctx.origin))
        self._write(ctx, f"inst/{pid}/started", ctx.block_number)
        self._write(ctx, f"inst/{pid}/completed", None)

        for role, address in sorted(bindings.items()):
            self._write(ctx, f"inst/{pid}/bind/{role}", address_bytes(address))
            self._write(ctx, f"inst/{pid}/att/{role}", verified[role].packed())

        start = model.element(model.start_element_id)
        for element in model.elements:
            initial = ENABLED if element is start and start.is_message else INACTIVE
            self._write(ctx, f"inst/{pid}/state/{element.element_id}", initial)
            if element.is_message:
                self._write(ctx, f"inst/{pid}/snd/{element.element_id}",
                            address_bytes(bindings[element.sender_role]))
                self._write(ctx, f"inst/{pid}/rcv/{element.element_id}",
                            address_bytes(bindings[element.receiver_role]))
            elif element.kind is ElementKind.AND_JOIN:
                self._write(ctx, f"inst/{pid}/join/{element.element_id}", 0)

        for name in model.public_variables:
            self._write(ctx, f"inst/{pid}/var/{name}", None)

        if not start.is_message:
            self._execute_gateway(ctx, pid, model, start.element_id)

        ctx.call(self.confidentiality_id, "recordPolicyLocator", pid, policy_locator)
        self._logger.info(f"Instance {pid} created from spec {spec_id} by {ctx.origin}")
        return pid

    # --- transact ----------------------------------------------------------

    def update_public_state(self, ctx: CallContext, pid: str, message_id: str, variables: Dict[str, Any]) -> bool:
        try:
            model = self._instance_model(pid)
        except UnknownInstance:
            raise ContractRevert("UnknownInstance", pid)
        if not model.has_element(message_id):
            raise ContractRevert("UnknownElement", message_id)
        element = model.element(message_id)

        if not element.is_message:
            raise ContractRevert("NotAMessage", message_id)
        authorized = self._read(f"inst/{pid}/snd/{message_id}")
        if address_bytes(ctx.origin) != authorized:
            raise ContractRevert("WrongSender", f"{ctx.origin} is not bound to {element.sender_role}")
        if self._state(pid, message_id) != ENABLED:
            raise ContractRevert("NotEnabled", f"{message_id} is {self._state(pid, message_id)}")

        if not isinstance(variables, dict):
            raise ContractRevert("MalformedArguments", "variables must be a map")
        for name, value in variables.items():
            decl = element.variable(name)
            if decl is None:
                raise ContractRevert("UndeclaredVariable", name)
            if decl.confidential:
                raise ContractRevert("ConfidentialVarInPublicUpdate", name)
            if not decl.value_type.accepts(value):
                raise ContractRevert("TypeMismatch", f"{name} expects {decl.value_type.value}")

        via_confidentiality = ctx.caller == self.confidentiality_id
        if element.confidential and not via_confidentiality:
            raise ContractRevert("ConfidentialRecordRequired", message_id)
        if via_confidentiality and not element.confidential:
            raise ContractRevert("NotConfidential", message_id)

        for name, value in sorted(variables.items()):
            self._write(ctx, f"inst/{pid}/var/{name}", value)

        self._activate_next(ctx, pid, model, message_id)

        if self._is_complete(pid, model):
            self._write(ctx, f"inst/{pid}/completed", ctx.block_number)
            self._logger.info(f"Instance {pid} completed in block {ctx.block_number}")
        return True

    def _activate_next(self, ctx: CallContext, pid: str, model: ChoreographyModel, completed_id: str) -> None:
        self._set_state(ctx, pid, completed_id, COMPLETED)
        for successor in model.successors(completed_id):
            self._enter(ctx, pid, model, successor)

    def _enter(self, ctx: CallContext, pid: str, model: ChoreographyModel, element_id: str) -> None:
        if model.element(element_id).is_message:
            # a loop flow returns a COMPLETED message to ENABLED
            self._set_state(ctx, pid, element_id, ENABLED)
        else:
            self._execute_gateway(ctx, pid, model, element_id)

    def _execute_gateway(self, ctx: CallContext, pid: str, model: ChoreographyModel, gateway_id: str) -> None:
        gateway = model.element(gateway_id)
        kind = gateway.kind

        if kind is ElementKind.XOR_SPLIT:
            targets = None
            for branch in gateway.branches:
                if branch.is_default:
                    continue
                name = branch.condition.variable_name
                value = self._read(f"inst/{pid}/var/{name}")
                if value is None:
                    raise ContractRevert("UndefinedVariable", name)
                if branch.condition.evaluate(value):
                    targets = branch.targets
                    break
            if targets is None:
                default = next((b for b in gateway.branches if b.is_default), None)
                if default is None:
                    raise ContractRevert("NoBranchMatched", gateway_id)
                targets = default.targets
            self._logger.debug(f"{pid}: {gateway_id} routes to {list(targets)}")
            self._set_state(ctx, pid, gateway_id, COMPLETED)
            for target in targets:
                self._enter(ctx, pid, model, target)
            return

        if kind is ElementKind.AND_JOIN:
            key = f"inst/{pid}/join/{gateway_id}"
            arrived = self._read(key, 0) + 1
            if arrived < model.incoming_count(gateway_id):
                self._write(ctx, key, arrived)
                return
            self._write(ctx, key, 0)

        # AND_SPLIT, XOR_JOIN and a fired AND_JOIN activate every successor
        self._set_state(ctx, pid, gateway_id, COMPLETED)
        for successor in model.successors(gateway_id):
            self._enter(ctx, pid, model, successor)

    def _is_complete(self, pid: str, model: ChoreographyModel) -> bool:
        for element in model.elements:
            if self._state(pid, element.element_id) == ENABLED:
                return False
            if element.kind is ElementKind.AND_JOIN and self._read(f"inst/{pid}/join/{element.element_id}", 0):
                return False
        return True

    # --- views -------------------------------------------------------------

    def get_spec(self, spec_id: int) -> dict:
        model = self._model(spec_id)
        return {
            "spec_id": spec_id,
            "model_id": model.model_id,
            "digest": self._read(f"spec/{spec_id}/digest").hex(),
            "owner": address_text(self._read(f"spec/{spec_id}/owner")),
            "policy_locator": self._read(f"spec/{spec_id}/locator"),
            "document": serialize_model(model).decode("utf-8"),
        }

    def get_element_state(self, pid: str, element_id: str) -> str:
        model = self._instance_model(pid)
        if not model.has_element(element_id):
            raise UnknownElement(f"Unknown element {element_id} in {pid}")
        return self._state(pid, element_id)

    def get_public_variable(self, pid: str, name: str) -> Any:
        self._instance_model(pid)
        key = f"inst/{pid}/var/{name}"
        if key not in self.storage:
            raise UnknownVariable(f"No public variable {name} in {pid}")
        return self._read(key)

    def get_public_vars(self, pid: str) -> Dict[str, Any]:
        model = self._instance_model(pid)
        return {name: self._read(f"inst/{pid}/var/{name}") for name in model.public_variables}

    def get_instance(self, pid: str) -> dict:
        model = self._instance_model(pid)
        prefix = f"inst/{pid}/bind/"
        return {
            "instance_id": pid,
            "spec_id": self._read(f"inst/{pid}/spec"),
            "creator": address_text(self._read(f"inst/{pid}/creator")),
            "started_at": self._read(f"inst/{pid}/started"),
            "completed_at": self._read(f"inst/{pid}/completed"),
            "bindings": {k[len(prefix):]: address_text(self._read(k))
                         for k in sorted(self.storage.keys_with_prefix(prefix))},
            "element_states": {e.element_id: self._state(pid, e.element_id) for e in model.elements},
            "join_counters": {e.element_id: self._read(f"inst/{pid}/join/{e.element_id}")
                              for e in model.elements if e.kind is ElementKind.AND_JOIN},
            "public_vars": self.get_public_vars(pid),
        }

    def peek_instance_id(self) -> str:
        return self._next_pid()

    def list_instances(self) -> list:
        count = self._read("inst/count", 0)
        return [f"PID{self.instance_seed + n}" for n in range(count)]
