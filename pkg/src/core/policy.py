"""
Access Policy Module for CLOAK

Monotone boolean policies over attribute literals: parsing, canonical
printing, generation from a choreography model, `$PID` instantiation and
evaluation against attribute sets.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Sequence, Union

from src.core.choreography import ChoreographyModel
from src.core.errors import InvalidInstanceId, PlaceholderPresent, PolicySyntaxError

logger = logging.getLogger(__name__)

PLACEHOLDER = "$PID"
INSTANCE_ID_RE = re.compile(r"^PID[0-9]+$")
ATTRIBUTE_RE = re.compile(r"^[A-Z0-9$_-]+$")

_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|([A-Za-z0-9$_-]+))")


@dataclass(frozen=True)
class Attr:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class And:
    left: "PolicyAst"
    right: "PolicyAst"

    def __str__(self) -> str:
        return f"{_wrap(self.left)} and {_wrap(self.right)}"


@dataclass(frozen=True)
class Or:
    left: "PolicyAst"
    right: "PolicyAst"

    def __str__(self) -> str:
        return f"{_wrap(self.left)} or {_wrap(self.right)}"


PolicyAst = Union[Attr, And, Or]


def _wrap(node: PolicyAst) -> str:
    if isinstance(node, Attr):
        return node.name
    return f"({node})"


class AttributeSet(frozenset):
    """Set of concrete attribute names; placeholders are not allowed"""

    def __new__(cls, attributes: Iterable[str] = ()):
        names = [a.upper() for a in attributes]
        for name in names:
            if "$" in name:
                raise PlaceholderPresent(f"Attribute sets cannot hold placeholders: {name}")
            if not ATTRIBUTE_RE.match(name):
                raise ValueError(f"Invalid attribute name: {name!r}")
        return super().__new__(cls, names)

    def __repr__(self) -> str:
        return f"AttributeSet({sorted(self)})"


# ---------------------------------------------------------------------------
# Parsing and printing
# ---------------------------------------------------------------------------

class _Parser:
    """Recursive descent: or_expr := and_expr ('or' and_expr)*; and binds tighter"""

    def __init__(self, text: str):
        self.text = text
        self.tokens = self._tokenize(text)
        self.index = 0

    @staticmethod
    def _tokenize(text: str) -> List[tuple]:
        tokens = []
        pos = 0
        while pos < len(text):
            if text[pos].isspace():
                pos += 1
                continue
            match = _TOKEN_RE.match(text, pos)
            if not match:
                raise PolicySyntaxError(f"Unexpected character {text[pos]!r}", pos)
            start = match.start(match.lastindex)
            if match.group(1):
                tokens.append(("(", "(", start))
            elif match.group(2):
                tokens.append((")", ")", start))
            else:
                word = match.group(3)
                lowered = word.lower()
                if lowered in ("and", "or"):
                    tokens.append((lowered, lowered, start))
                else:
                    tokens.append(("attr", word.upper(), start))
            pos = match.end()
        return tokens

    def _peek(self):
        return self.tokens[self.index] if self.index < len(self.tokens) else None

    def _position(self) -> int:
        token = self._peek()
        return token[2] if token else len(self.text)

    def parse(self) -> PolicyAst:
        if not self.tokens:
            raise PolicySyntaxError("Empty policy", 0)
        node = self._or_expr()
        if self._peek() is not None:
            raise PolicySyntaxError(f"Unexpected token {self._peek()[1]!r}", self._position())
        return node

    def _or_expr(self) -> PolicyAst:
        node = self._and_expr()
        while self._peek() and self._peek()[0] == "or":
            self.index += 1
            node = Or(node, self._and_expr())
        return node

    def _and_expr(self) -> PolicyAst:
        node = self._atom()
        while self._peek() and self._peek()[0] == "and":
            self.index += 1
            node = And(node, self._atom())
        return node

    def _atom(self) -> PolicyAst:
        token = self._peek()
        if token is None:
            raise PolicySyntaxError("Unexpected end of policy", len(self.text))
        kind, value, position = token
        if kind == "(":
            self.index += 1
            node = self._or_expr()
            closing = self._peek()
            if closing is None or closing[0] != ")":
                raise PolicySyntaxError("Unbalanced parenthesis", self._position())
            self.index += 1
            return node
        if kind == "attr":
            if "$" in value and value != PLACEHOLDER:
                raise PolicySyntaxError(f"Unknown placeholder {value!r}", position)
            self.index += 1
            return Attr(value)
        raise PolicySyntaxError(f"Unexpected token {value!r}", position)


def parse_policy(text: str) -> PolicyAst:
    if not text or not text.strip():
        raise PolicySyntaxError("Empty policy", 0)
    return _Parser(text).parse()


def print_policy(policy: PolicyAst) -> str:
    """Canonical form: every binary operator below the root is parenthesized"""
    return str(policy)


def leaves(policy: PolicyAst) -> Iterator[str]:
    """Attribute names in left-to-right order, duplicates included"""
    stack = [policy]
    while stack:
        node = stack.pop()
        if isinstance(node, Attr):
            yield node.name
        else:
            stack.append(node.right)
            stack.append(node.left)


def has_placeholder(policy: PolicyAst) -> bool:
    return any(name == PLACEHOLDER for name in leaves(policy))


# ---------------------------------------------------------------------------
# Generation, instantiation, evaluation
# ---------------------------------------------------------------------------

def message_policy(sender: str, receiver: str, auditor_roles: Sequence[str] = ()) -> PolicyAst:
    participants: PolicyAst = And(Attr(PLACEHOLDER), Or(Attr(sender.upper()), Attr(receiver.upper())))
    if not auditor_roles:
        return participants
    node: PolicyAst = Attr(auditor_roles[0].upper())
    for role in auditor_roles[1:]:
        node = Or(node, Attr(role.upper()))
    return Or(node, participants)


def generate_policies(model: ChoreographyModel, auditor_roles: Sequence[str] = ()) -> Dict[str, PolicyAst]:
    """Parametric policy for every confidential message element, keyed by element id"""
    policies = {
        element.element_id: message_policy(element.sender_role, element.receiver_role, auditor_roles)
        for element in model.confidential_messages
    }
    logger.info(f"Generated {len(policies)} policies for model '{model.model_id}' "
                f"with {len(auditor_roles)} auditor role(s)")
    return policies


def instantiate_policy(policy: PolicyAst, instance_id: str) -> PolicyAst:
    if not isinstance(instance_id, str) or not INSTANCE_ID_RE.match(instance_id):
        raise InvalidInstanceId(f"Invalid instance id: {instance_id!r}")
    if isinstance(policy, Attr):
        return Attr(instance_id) if policy.name == PLACEHOLDER else policy
    return type(policy)(instantiate_policy(policy.left, instance_id),
                        instantiate_policy(policy.right, instance_id))


def evaluate(policy: PolicyAst, attrs: Iterable[str]) -> bool:
    if has_placeholder(policy):
        raise PlaceholderPresent("Policy still contains the $PID placeholder")
    held = attrs if isinstance(attrs, (set, frozenset)) else set(attrs)
    return _evaluate(policy, held)


def _evaluate(node: PolicyAst, held) -> bool:
    if isinstance(node, Attr):
        return node.name in held
    if isinstance(node, And):
        return _evaluate(node.left, held) and _evaluate(node.right, held)
    return _evaluate(node.left, held) or _evaluate(node.right, held)
