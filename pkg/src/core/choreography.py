"""
Choreography Model Module for CLOAK

Defines the choreography model (roles, message elements, gateways and
flows), parses and serializes the structured model document, validates
it strictly, and derives scaled copies for the size benchmarks.
"""

import logging
import re
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import orjson

from src.core.errors import ModelSyntaxError, UnknownElement, ValidationError

logger = logging.getLogger(__name__)

# Upper bound on accepted model documents
MAX_MODEL_BYTES = 4 * 1024 * 1024

Literal = Union[bool, int, str]


class ElementKind(str, Enum):
    MESSAGE = "MESSAGE"
    XOR_SPLIT = "XOR_SPLIT"
    XOR_JOIN = "XOR_JOIN"
    AND_SPLIT = "AND_SPLIT"
    AND_JOIN = "AND_JOIN"

    @property
    def is_gateway(self) -> bool:
        return self is not ElementKind.MESSAGE

    @property
    def is_split(self) -> bool:
        return self in (ElementKind.XOR_SPLIT, ElementKind.AND_SPLIT)

    @property
    def is_join(self) -> bool:
        return self in (ElementKind.XOR_JOIN, ElementKind.AND_JOIN)


class ValueType(str, Enum):
    BOOL = "BOOL"
    INT = "INT"
    STRING = "STRING"

    def accepts(self, value) -> bool:
        if self is ValueType.BOOL:
            return isinstance(value, bool)
        if self is ValueType.INT:
            return isinstance(value, int) and not isinstance(value, bool)
        return isinstance(value, str)


ORDERING_COMPARATORS = frozenset({"<", "<=", ">", ">="})
COMPARATORS = ("==", "!=", "<=", ">=", "<", ">")

_CONDITION_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(==|!=|<=|>=|<|>)\s*(.+?)\s*$")
_INT_RE = re.compile(r"^-?[0-9]+$")


def _parse_literal(text: str) -> Literal:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if _INT_RE.match(text):
        return int(text)
    if len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        return text[1:-1]
    raise ModelSyntaxError(f"Invalid condition literal: {text!r}")


def _render_literal(value: Literal) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return f'"{value}"'


def literal_type(value: Literal) -> ValueType:
    if isinstance(value, bool):
        return ValueType.BOOL
    if isinstance(value, int):
        return ValueType.INT
    return ValueType.STRING


@dataclass(frozen=True)
class VariableDecl:
    name: str
    value_type: ValueType
    confidential: bool = False


@dataclass(frozen=True)
class ConditionExpr:
    """`IDENT CMP LITERAL` guard attached to an exclusive branch"""
    variable_name: str
    comparator: str
    literal: Literal

    @classmethod
    def parse(cls, text: str) -> "ConditionExpr":
        match = _CONDITION_RE.match(text or "")
        if not match:
            raise ModelSyntaxError(f"Invalid condition: {text!r}")
        name, comparator, raw = match.groups()
        return cls(name, comparator, _parse_literal(raw))

    def evaluate(self, value) -> bool:
        literal = self.literal
        if self.comparator == "==":
            return value == literal
        if self.comparator == "!=":
            return value != literal
        if self.comparator == "<":
            return value < literal
        if self.comparator == "<=":
            return value <= literal
        if self.comparator == ">":
            return value > literal
        return value >= literal

    def __str__(self) -> str:
        return f"{self.variable_name} {self.comparator} {_render_literal(self.literal)}"


@dataclass(frozen=True)
class Branch:
    condition: Optional[ConditionExpr]
    targets: Tuple[str, ...]

    @property
    def is_default(self) -> bool:
        return self.condition is None


@dataclass(frozen=True)
class Element:
    element_id: str
    kind: ElementKind
    name: str = ""
    sender_role: Optional[str] = None
    receiver_role: Optional[str] = None
    variables: Tuple[VariableDecl, ...] = ()
    branches: Tuple[Branch, ...] = ()

    @property
    def is_message(self) -> bool:
        return self.kind is ElementKind.MESSAGE

    @property
    def is_gateway(self) -> bool:
        return self.kind.is_gateway

    @property
    def confidential(self) -> bool:
        """A message is confidential when it declares a confidential variable"""
        return any(v.confidential for v in self.variables)

    @property
    def public_variables(self) -> Tuple[VariableDecl, ...]:
        return tuple(v for v in self.variables if not v.confidential)

    @property
    def confidential_variables(self) -> Tuple[VariableDecl, ...]:
        return tuple(v for v in self.variables if v.confidential)

    def variable(self, name: str) -> Optional[VariableDecl]:
        for decl in self.variables:
            if decl.name == name:
                return decl
        return None


@dataclass(frozen=True)
class ChoreographyModel:
    model_id: str
    roles: FrozenSet[str]
    elements: Tuple[Element, ...]
    flows: Tuple[Tuple[str, str], ...]
    start_element_id: str

    @cached_property
    def _index(self) -> Dict[str, Element]:
        return {e.element_id: e for e in self.elements}

    @cached_property
    def _successors(self) -> Dict[str, Tuple[str, ...]]:
        table: Dict[str, List[str]] = {e.element_id: [] for e in self.elements}
        for source, target in self.flows:
            table.setdefault(source, []).append(target)
        return {k: tuple(v) for k, v in table.items()}

    @cached_property
    def _predecessors(self) -> Dict[str, Tuple[str, ...]]:
        table: Dict[str, List[str]] = {e.element_id: [] for e in self.elements}
        for source, target in self.flows:
            table.setdefault(target, []).append(source)
        return {k: tuple(v) for k, v in table.items()}

    def has_element(self, element_id: str) -> bool:
        return element_id in self._index

    def element(self, element_id: str) -> Element:
        try:
            return self._index[element_id]
        except KeyError:
            raise UnknownElement(f"Unknown element: {element_id}") from None

    def successors(self, element_id: str) -> Tuple[str, ...]:
        return self._successors.get(element_id, ())

    def predecessors(self, element_id: str) -> Tuple[str, ...]:
        return self._predecessors.get(element_id, ())

    def incoming_count(self, element_id: str) -> int:
        return len(self.predecessors(element_id))

    @property
    def message_elements(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.is_message)

    @property
    def gateway_elements(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if e.is_gateway)

    @property
    def confidential_messages(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.message_elements if e.confidential)

    @property
    def terminal_elements(self) -> Tuple[Element, ...]:
        return tuple(e for e in self.elements if not self.successors(e.element_id))

    @cached_property
    def public_variables(self) -> Dict[str, VariableDecl]:
        """First public declaration of every public variable name, in model order"""
        table: Dict[str, VariableDecl] = {}
        for element in self.message_elements:
            for decl in element.public_variables:
                table.setdefault(decl.name, decl)
        return table


# ---------------------------------------------------------------------------
# Parsing and serialization
# ---------------------------------------------------------------------------

def _require(mapping: dict, key: str, kind, where: str):
    if key not in mapping:
        raise ModelSyntaxError(f"Missing key '{key}' in {where}")
    value = mapping[key]
    if not isinstance(value, kind):
        raise ModelSyntaxError(f"Key '{key}' in {where} has wrong type: {type(value).__name__}")
    return value


def _parse_variables(raw, element_id: str) -> Tuple[VariableDecl, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ModelSyntaxError(f"'vars' of {element_id} must be an array")
    decls = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ModelSyntaxError(f"Variable declaration of {element_id} must be an object")
        name = _require(entry, "name", str, f"variable of {element_id}")
        type_name = _require(entry, "type", str, f"variable {name}")
        try:
            value_type = ValueType(type_name.upper())
        except ValueError:
            raise ModelSyntaxError(f"Unknown variable type {type_name!r} for {name}") from None
        confidential = entry.get("confidential", False)
        if not isinstance(confidential, bool):
            raise ModelSyntaxError(f"'confidential' of {name} must be a boolean")
        decls.append(VariableDecl(name, value_type, confidential))
    return tuple(decls)


def _parse_branches(raw, element_id: str) -> Tuple[Branch, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ModelSyntaxError(f"'branches' of {element_id} must be an array")
    branches = []
    for entry in raw:
        if not isinstance(entry, dict):
            raise ModelSyntaxError(f"Branch of {element_id} must be an object")
        targets = entry.get("next")
        if isinstance(targets, str):
            targets = [targets]
        if not isinstance(targets, list) or not all(isinstance(t, str) for t in targets):
            raise ModelSyntaxError(f"Branch 'next' of {element_id} must be an id or array of ids")
        cond = entry.get("cond")
        if entry.get("default") is True or cond == "default":
            condition = None
        elif isinstance(cond, str):
            condition = ConditionExpr.parse(cond)
        else:
            raise ModelSyntaxError(f"Branch of {element_id} needs 'cond' or 'default'")
        branches.append(Branch(condition, tuple(targets)))
    return tuple(branches)


def _parse_element(raw) -> Element:
    if not isinstance(raw, dict):
        raise ModelSyntaxError("Element entries must be objects")
    element_id = _require(raw, "id", str, "element")
    kind_name = _require(raw, "kind", str, f"element {element_id}")
    try:
        kind = ElementKind(kind_name.upper())
    except ValueError:
        raise ModelSyntaxError(f"Unknown element kind {kind_name!r} for {element_id}") from None
    name = raw.get("name", element_id)
    sender = raw.get("sender")
    receiver = raw.get("receiver")
    for label, value in (("name", name), ("sender", sender), ("receiver", receiver)):
        if value is not None and not isinstance(value, str):
            raise ModelSyntaxError(f"'{label}' of {element_id} must be a string")
    return Element(
        element_id=element_id,
        kind=kind,
        name=name or element_id,
        sender_role=sender,
        receiver_role=receiver,
        variables=_parse_variables(raw.get("vars"), element_id),
        branches=_parse_branches(raw.get("branches"), element_id),
    )


def parse_model(document: Union[bytes, str]) -> ChoreographyModel:
    """Parse and strictly validate a model document"""
    if isinstance(document, str):
        document = document.encode("utf-8")
    logger.debug(f"Parsing model document ({len(document)} bytes)")

    if len(document) > MAX_MODEL_BYTES:
        raise ModelSyntaxError(f"Model document exceeds {MAX_MODEL_BYTES} bytes")

    try:
        data = orjson.loads(document)
    except orjson.JSONDecodeError as e:
        raise ModelSyntaxError(f"Malformed model document: {e}") from None

    if not isinstance(data, dict):
        raise ModelSyntaxError("Model document must be an object")

    model_id = _require(data, "id", str, "model")
    roles = _require(data, "roles", list, "model")
    if not all(isinstance(r, str) for r in roles):
        raise ModelSyntaxError("'roles' must contain strings")
    start = _require(data, "start", str, "model")
    raw_elements = _require(data, "elements", list, "model")
    raw_flows = _require(data, "flows", list, "model")

    flows = []
    for flow in raw_flows:
        if not (isinstance(flow, list) and len(flow) == 2 and all(isinstance(x, str) for x in flow)):
            raise ModelSyntaxError(f"Flow entries must be [from, to] pairs, got {flow!r}")
        flows.append((flow[0], flow[1]))

    model = ChoreographyModel(
        model_id=model_id,
        roles=frozenset(roles),
        elements=tuple(_parse_element(e) for e in raw_elements),
        flows=tuple(flows),
        start_element_id=start,
    )
    validate_model(model)
    logger.info(f"Parsed model '{model_id}': {len(model.message_elements)} messages, "
                f"{len(model.gateway_elements)} gateways, {len(model.roles)} roles")
    return model


def model_to_dict(model: ChoreographyModel) -> dict:
    elements = []
    for element in model.elements:
        entry = {"id": element.element_id, "kind": element.kind.value, "name": element.name}
        if element.is_message:
            entry["sender"] = element.sender_role
            entry["receiver"] = element.receiver_role
            entry["vars"] = [
                {"name": v.name, "type": v.value_type.value, "confidential": v.confidential}
                for v in element.variables
            ]
        if element.branches:
            entry["branches"] = [
                {"default": True, "next": list(b.targets)} if b.is_default
                else {"cond": str(b.condition), "next": list(b.targets)}
                for b in element.branches
            ]
        elements.append(entry)
    return {
        "id": model.model_id,
        "roles": sorted(model.roles),
        "start": model.start_element_id,
        "elements": elements,
        "flows": [list(f) for f in model.flows],
    }


def serialize_model(model: ChoreographyModel, pretty: bool = False) -> bytes:
    """Canonical document form; the compact form is what goes on-chain"""
    option = orjson.OPT_INDENT_2 if pretty else 0
    return orjson.dumps(model_to_dict(model), option=option)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_reachability(model: ChoreographyModel) -> List[str]:
    """Ids of elements not reachable from the start element, in model order"""
    if not model.has_element(model.start_element_id):
        return [e.element_id for e in model.elements]

    seen = {model.start_element_id}
    queue = deque([model.start_element_id])
    while queue:
        current = queue.popleft()
        for nxt in model.successors(current):
            if nxt not in seen and model.has_element(nxt):
                seen.add(nxt)
                queue.append(nxt)
    return [e.element_id for e in model.elements if e.element_id not in seen]


def _find_gateway_cycle(model: ChoreographyModel) -> Optional[str]:
    """Return an element on a cycle made only of gateways, if any"""
    gateways = {e.element_id for e in model.gateway_elements}
    state: Dict[str, int] = {}
    for root in gateways:
        if state.get(root):
            continue
        stack = [(root, iter(model.successors(root)))]
        state[root] = 1
        while stack:
            node, children = stack[-1]
            advanced = False
            for child in children:
                if child not in gateways:
                    continue
                if state.get(child) == 1:
                    return child
                if not state.get(child):
                    state[child] = 1
                    stack.append((child, iter(model.successors(child))))
                    advanced = True
                    break
            if not advanced:
                state[node] = 2
                stack.pop()
    return None


def _validate_elements(model: ChoreographyModel) -> None:
    seen = set()
    for element in model.elements:
        if element.element_id in seen:
            raise ValidationError("Duplicate element id", element.element_id)
        seen.add(element.element_id)

    if model.start_element_id not in seen:
        raise ValidationError("Start element is not declared", model.start_element_id)

    flow_set = set()
    for source, target in model.flows:
        for endpoint in (source, target):
            if endpoint not in seen:
                raise ValidationError(f"Dangling flow {source} -> {target}", endpoint)
        if (source, target) in flow_set:
            raise ValidationError(f"Duplicate flow {source} -> {target}", source)
        flow_set.add((source, target))

    for element in model.elements:
        eid = element.element_id
        if element.is_message:
            for label, role in (("sender", element.sender_role), ("receiver", element.receiver_role)):
                if not role:
                    raise ValidationError(f"Message without {label} role", eid)
                if role not in model.roles:
                    raise ValidationError(f"Undeclared {label} role {role!r}", eid)
            names = [v.name for v in element.variables]
            if len(names) != len(set(names)):
                raise ValidationError("Duplicate variable declaration", eid)
            if element.branches:
                raise ValidationError("Only exclusive splits declare branches", eid)
            continue

        if element.sender_role or element.receiver_role or element.variables:
            raise ValidationError("Gateways declare no roles or variables", eid)

        incoming = model.incoming_count(eid)
        outgoing = len(model.successors(eid))
        if element.kind.is_join and incoming < 2:
            raise ValidationError(f"{element.kind.value} needs at least 2 incoming flows", eid)
        if element.kind.is_split and outgoing < 2:
            raise ValidationError(f"{element.kind.value} needs at least 2 outgoing flows", eid)

        if element.kind is ElementKind.XOR_SPLIT:
            if len(element.branches) < 2:
                raise ValidationError("Exclusive split needs at least 2 branches", eid)
            if sum(1 for b in element.branches if b.is_default) > 1:
                raise ValidationError("Exclusive split has more than one default branch", eid)
            successors = set(model.successors(eid))
            covered = set()
            for branch in element.branches:
                if not branch.targets:
                    raise ValidationError("Branch without targets", eid)
                for target in branch.targets:
                    if target not in successors:
                        raise ValidationError(f"Branch target {target} is not a successor", eid)
                covered.update(branch.targets)
            if covered != successors:
                raise ValidationError("Outgoing flows not covered by branches", eid)
        elif element.branches:
            raise ValidationError("Only exclusive splits declare branches", eid)


def _validate_variables(model: ChoreographyModel) -> None:
    declarations: Dict[str, VariableDecl] = {}
    for element in model.message_elements:
        for decl in element.variables:
            previous = declarations.setdefault(decl.name, decl)
            if previous.confidential != decl.confidential or previous.value_type != decl.value_type:
                raise ValidationError(f"Inconsistent declarations of variable {decl.name!r}",
                                      element.element_id)

    for element in model.elements:
        for branch in element.branches:
            condition = branch.condition
            if condition is None:
                continue
            decl = declarations.get(condition.variable_name)
            if decl is None:
                raise ValidationError(f"Condition on undeclared variable {condition.variable_name!r}",
                                      element.element_id)
            if decl.confidential:
                raise ValidationError(f"Condition on confidential variable {decl.name!r}",
                                      element.element_id)
            if condition.comparator in ORDERING_COMPARATORS and decl.value_type is not ValueType.INT:
                raise ValidationError(f"Comparator {condition.comparator} requires an INT variable",
                                      element.element_id)
            if literal_type(condition.literal) is not decl.value_type:
                raise ValidationError(f"Literal type does not match variable {decl.name!r}",
                                      element.element_id)


def validate_model(model: ChoreographyModel) -> None:
    """Raise ValidationError on the first broken invariant"""
    _validate_elements(model)
    _validate_variables(model)

    cycle_member = _find_gateway_cycle(model)
    if cycle_member is not None:
        raise ValidationError("Cycle made only of gateways", cycle_member)

    unreachable = validate_reachability(model)
    if unreachable:
        raise ValidationError(f"{len(unreachable)} unreachable element(s)", unreachable[0])


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------

def _suffix(element_id: str, copy: int) -> str:
    return f"{element_id}.{copy}"


def _rename_element(element: Element, copy: int) -> Element:
    return replace(
        element,
        element_id=_suffix(element.element_id, copy),
        branches=tuple(
            Branch(b.condition, tuple(_suffix(t, copy) for t in b.targets))
            for b in element.branches
        ),
    )


def replicate_model(model: ChoreographyModel, k: int) -> ChoreographyModel:
    """Concatenate k id-suffixed copies, linking each copy's terminal element to the next start"""
    if k < 1:
        raise ValueError(f"Replication factor must be positive, got {k}")

    terminals = [e.element_id for e in model.terminal_elements]
    if k > 1 and len(terminals) != 1:
        raise ValidationError(f"Replication needs exactly one terminal element, found {len(terminals)}",
                              terminals[0] if terminals else model.start_element_id)
    elements: List[Element] = []
    flows: List[Tuple[str, str]] = []
    for copy in range(1, k + 1):
        elements.extend(_rename_element(e, copy) for e in model.elements)
        flows.extend((_suffix(a, copy), _suffix(b, copy)) for a, b in model.flows)
        if copy < k:
            flows.append((_suffix(terminals[0], copy), _suffix(model.start_element_id, copy + 1)))

    logger.debug(f"Replicated model '{model.model_id}' x{k}: {len(elements)} elements")
    replicated = ChoreographyModel(
        model_id=f"{model.model_id}x{k}",
        roles=model.roles,
        elements=tuple(elements),
        flows=tuple(flows),
        start_element_id=_suffix(model.start_element_id, 1),
    )
    validate_model(replicated)
    return replicated


def with_elements(model: ChoreographyModel, elements: Iterable[Element], **changes) -> ChoreographyModel:
    """Copy of the model with a new element list (used by bench derivations)"""
    return replace(model, elements=tuple(elements), **changes)
