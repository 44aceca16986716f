from collections import deque
from dataclasses import replace

import orjson
import pytest

from src.core.choreography import (
    ConditionExpr, Element, ElementKind, ValueType, parse_model, replicate_model, serialize_model,
    validate_reachability,
)
from src.core.errors import ModelSyntaxError, ValidationError


def _bfs_unreachable(model):
    seen = {model.start_element_id}
    queue = deque([model.start_element_id])
    while queue:
        for nxt in model.successors(queue.popleft()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return [e.element_id for e in model.elements if e.element_id not in seen]


def _parse(document: dict):
    return parse_model(orjson.dumps(document))


def _two_party(elements, flows, start="m1"):
    return {"id": "t", "roles": ["A", "B"], "start": start, "elements": elements, "flows": flows}


def _msg(element_id, sender="A", receiver="B", variables=()):
    return {"id": element_id, "kind": "MESSAGE", "sender": sender, "receiver": receiver, "vars": list(variables)}


@pytest.mark.parametrize("name,roles,messages,gateways", [
    ("xray", 4, 10, 5),
    ("incident", 5, 13, 3),
    ("retail", 3, 12, 2),
])
def test_fixture_counts(model_doc, name, roles, messages, gateways):
    model = parse_model(model_doc(name))
    assert len(model.roles) == roles
    assert len(model.message_elements) == messages
    assert len(model.gateway_elements) == gateways
    assert validate_reachability(model) == []


def test_xray_confidential_messages(xray_model):
    assert [m.element_id for m in xray_model.confidential_messages] == ["m1", "m4", "m6", "m9"]
    assert xray_model.element("m2").variable("accepted").value_type is ValueType.BOOL
    assert set(xray_model.public_variables) == {
        "accepted", "date", "appointment", "temperature", "admitted", "examDone", "outcome"}


def test_minimal_model_is_valid():
    model = _parse(_two_party([_msg("m1")], []))
    assert len(model.elements) == 1
    assert model.start_element_id == "m1"
    assert [e.element_id for e in model.terminal_elements] == ["m1"]


def test_condition_on_confidential_variable_rejected(xray_dict):
    document = orjson.loads(orjson.dumps(xray_dict))
    g2 = next(e for e in document["elements"] if e["id"] == "g2")
    g2["branches"][0]["cond"] = 'prescription == "x"'
    with pytest.raises(ValidationError) as info:
        _parse(document)
    assert info.value.element_id == "g2"
    assert "confidential" in str(info.value)


@pytest.mark.parametrize("raw", [
    b"{not json",
    b"[]",
    b'{"id": "x", "roles": [], "elements": [], "flows": []}',
    b'{"id": "x", "roles": ["A"], "start": "m1", "elements": [{"id": "m1", "kind": "TIMER"}], "flows": []}',
    b'{"id": "x", "roles": ["A"], "start": "m1", "elements": [], "flows": [["m1"]]}',
])
def test_malformed_documents(raw):
    with pytest.raises(ModelSyntaxError):
        parse_model(raw)


def test_invalid_condition_syntax():
    with pytest.raises(ModelSyntaxError):
        ConditionExpr.parse("accepted ~ true")
    with pytest.raises(ModelSyntaxError):
        ConditionExpr.parse("accepted == maybe")


def test_dangling_flow_names_missing_element(xray_dict):
    document = dict(xray_dict, flows=xray_dict["flows"] + [["m10", "zz"]])
    with pytest.raises(ValidationError) as info:
        _parse(document)
    assert info.value.element_id == "zz"


def test_undeclared_role():
    with pytest.raises(ValidationError) as info:
        _parse(_two_party([_msg("m1", sender="C")], []))
    assert info.value.element_id == "m1"


def test_unreachable_element_is_rejected(xray_dict):
    extra = _msg("m11", sender="WARD", receiver="PATIENT")
    document = dict(xray_dict, elements=xray_dict["elements"] + [extra],
                    flows=xray_dict["flows"] + [["m11", "m10"]])
    with pytest.raises(ValidationError) as info:
        _parse(document)
    assert info.value.element_id == "m11"


def test_validate_reachability_reports_orphans(xray_model):
    orphan = Element("mx", ElementKind.MESSAGE, "orphan", "WARD", "PATIENT")
    model = replace(xray_model, elements=xray_model.elements + (orphan,),
                    flows=xray_model.flows + (("mx", "m10"),))
    assert validate_reachability(model) == ["mx"]
    assert _bfs_unreachable(model) == ["mx"]


def test_gateway_only_cycle_rejected():
    elements = [_msg("m1"), _msg("m2", "B", "A"),
                {"id": "j1", "kind": "XOR_JOIN"}, {"id": "j2", "kind": "XOR_JOIN"}]
    flows = [["m1", "j1"], ["j2", "j1"], ["j1", "j2"], ["j1", "m2"], ["m2", "j2"]]
    with pytest.raises(ValidationError, match="gateways"):
        _parse(_two_party(elements, flows))


def test_double_default_rejected():
    elements = [_msg("m1"), _msg("m2", "B", "A"), _msg("m3", "B", "A"),
                {"id": "g1", "kind": "XOR_SPLIT",
                 "branches": [{"default": True, "next": "m2"}, {"default": True, "next": "m3"}]}]
    flows = [["m1", "g1"], ["g1", "m2"], ["g1", "m3"]]
    with pytest.raises(ValidationError) as info:
        _parse(_two_party(elements, flows))
    assert info.value.element_id == "g1"


def test_ordering_comparator_requires_int():
    elements = [_msg("m1", variables=[{"name": "ok", "type": "BOOL"}]),
                _msg("m2", "B", "A"), _msg("m3", "B", "A"),
                {"id": "g1", "kind": "XOR_SPLIT",
                 "branches": [{"cond": "ok < true", "next": "m2"}, {"default": True, "next": "m3"}]}]
    flows = [["m1", "g1"], ["g1", "m2"], ["g1", "m3"]]
    with pytest.raises(ValidationError, match="INT"):
        _parse(_two_party(elements, flows))


def test_split_needs_two_outgoing_flows():
    elements = [_msg("m1"), _msg("m2", "B", "A"), {"id": "g1", "kind": "AND_SPLIT"}]
    with pytest.raises(ValidationError) as info:
        _parse(_two_party(elements, [["m1", "g1"], ["g1", "m2"]]))
    assert info.value.element_id == "g1"


def test_serialize_parse_round_trip(xray_model):
    again = parse_model(serialize_model(xray_model))
    assert again.model_id == xray_model.model_id
    assert again.roles == xray_model.roles
    assert again.elements == xray_model.elements
    assert again.flows == xray_model.flows
    assert serialize_model(again) == serialize_model(xray_model)


def test_condition_evaluation():
    condition = ConditionExpr.parse("severity >= 3")
    assert condition.evaluate(3) and condition.evaluate(4)
    assert not condition.evaluate(2)
    assert str(ConditionExpr.parse("accepted == TRUE")) == "accepted == true"


@pytest.mark.parametrize("k", [1, 3, 10])
def test_replicate_model(xray_model, k):
    scaled = replicate_model(xray_model, k)
    assert len(scaled.elements) == k * len(xray_model.elements)
    assert len(scaled.message_elements) == k * 10
    assert len(scaled.flows) == k * len(xray_model.flows) + (k - 1)
    assert validate_reachability(scaled) == []
    assert _bfs_unreachable(scaled) == []
    assert len({e.element_id for e in scaled.elements}) == len(scaled.elements)


def test_replicated_model_parses_back(xray_model):
    scaled = replicate_model(xray_model, 3)
    assert parse_model(serialize_model(scaled)).elements == scaled.elements


def test_replicate_rejects_non_positive_factor(xray_model):
    with pytest.raises(ValueError):
        replicate_model(xray_model, 0)


def test_replicate_needs_a_single_terminal():
    endless = _parse(_two_party(
        [_msg("m0"), {"id": "j", "kind": "XOR_JOIN"}, _msg("m1", "B", "A"), _msg("m2")],
        [["m0", "j"], ["j", "m1"], ["m1", "m2"], ["m2", "j"]], start="m0"))
    forked = _parse(_two_party(
        [_msg("m1", variables=[{"name": "n", "type": "INT"}]), _msg("m2", "B", "A"), _msg("m3", "B", "A"),
         {"id": "g1", "kind": "XOR_SPLIT",
          "branches": [{"cond": "n > 1", "next": "m2"}, {"default": True, "next": "m3"}]}],
        [["m1", "g1"], ["g1", "m2"], ["g1", "m3"]]))
    for model in (endless, forked):
        assert validate_reachability(replicate_model(model, 1)) == []
        with pytest.raises(ValidationError):
            replicate_model(model, 3)
