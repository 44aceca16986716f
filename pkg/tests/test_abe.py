import random
from dataclasses import replace
from itertools import chain, combinations

import pytest

from src.core import abe
from src.core.abe import (
    FIELD_PRIME, AbeCiphertext, AbKey, compile_lsss, decrypt, encrypt, keygen, partition_from_mapping,
    round_robin_partition, setup_authorities, solve_span,
)
from src.core.errors import (
    IntegrityFailure, MalformedCiphertext, PartitionConflict, PlaceholderPresent, PolicyNotSatisfied,
    UnmanagedAttribute,
)
from src.core.policy import And, Attr, Or, evaluate, instantiate_policy, leaves, parse_policy

POOL = [f"A{i}" for i in range(8)]
PRESCRIPTION = "MINISTRY-INSPECTOR or (PID476948 and (PATIENT or RADIOLOGY))"


@pytest.fixture(scope="module")
def authorities():
    attributes = POOL + ["MINISTRY-INSPECTOR", "PATIENT", "RADIOLOGY", "WARD"]
    return setup_authorities(3, round_robin_partition(attributes, 3), seed=11)


def random_policy(rng: random.Random, n_leaves: int):
    if n_leaves == 1:
        return Attr(rng.choice(POOL))
    split = rng.randint(1, n_leaves - 1)
    node = And if rng.random() < 0.5 else Or
    return node(random_policy(rng, split), random_policy(rng, n_leaves - split))


def policy_corpus(count: int = 500, seed: int = 2024):
    rng = random.Random(seed)
    return [random_policy(rng, rng.randint(1, 12)) for _ in range(count)]


def attribute_subsets(policy, rng: random.Random):
    names = sorted(set(leaves(policy)))
    if len(list(leaves(policy))) <= 6:
        return [set(s) for s in chain.from_iterable(combinations(names, r) for r in range(len(names) + 1))]
    return [{n for n in names if rng.random() < 0.5} for _ in range(24)]


def rank_mod_p(rows):
    """Row rank over F_p by plain elimination"""
    matrix = [[x % FIELD_PRIME for x in row] for row in rows]
    rank = 0
    width = len(matrix[0]) if matrix else 0
    for col in range(width):
        pivot = next((i for i in range(rank, len(matrix)) if matrix[i][col]), None)
        if pivot is None:
            continue
        matrix[rank], matrix[pivot] = matrix[pivot], matrix[rank]
        inverse = pow(matrix[rank][col], FIELD_PRIME - 2, FIELD_PRIME)
        for i in range(len(matrix)):
            if i != rank and matrix[i][col]:
                factor = matrix[i][col] * inverse % FIELD_PRIME
                matrix[i] = [(a - factor * b) % FIELD_PRIME for a, b in zip(matrix[i], matrix[rank])]
        rank += 1
    return rank


def spans_target(rows, width):
    target = [1] + [0] * (width - 1)
    return rank_mod_p(list(rows) + [target]) == rank_mod_p(list(rows)) if rows else False


# ---------------------------------------------------------------------------
# LSSS
# ---------------------------------------------------------------------------

def test_lsss_span_matches_truth_table():
    rng = random.Random(7)
    for policy in policy_corpus():
        lsss = compile_lsss(policy)
        assert len(lsss.rows) == len(list(leaves(policy)))
        assert all(len(row) == lsss.width for row in lsss.rows)
        for subset in attribute_subsets(policy, rng):
            rows = [lsss.rows[i] for i in lsss.rows_for(subset)]
            expected = evaluate(policy, subset)
            assert spans_target(rows, lsss.width) is expected, (policy, subset)
            coefficients = solve_span(rows, lsss.width)
            assert (coefficients is not None) is expected
            if coefficients is not None:
                combined = [sum(c * row[j] for c, row in zip(coefficients, rows)) % FIELD_PRIME
                            for j in range(lsss.width)]
                assert combined == [1] + [0] * (lsss.width - 1)


def test_single_leaf_matrix():
    lsss = compile_lsss(Attr("A"))
    assert lsss.rows == ((1,),)
    assert solve_span(lsss.rows, 1) == [1]
    assert solve_span([], 1) is None


def test_conjunction_needs_both_rows():
    lsss = compile_lsss(parse_policy("A and B"))
    assert lsss.row_labels == ("A", "B")
    assert spans_target(lsss.rows, lsss.width)
    assert not spans_target([lsss.rows[0]], lsss.width)
    assert not spans_target([lsss.rows[1]], lsss.width)


@pytest.mark.parametrize("attrs,expected", [
    ({"MINISTRY-INSPECTOR"}, True),
    ({"PID476948", "PATIENT"}, True),
    ({"PID476948", "RADIOLOGY"}, True),
    ({"PID476948"}, False),
    ({"PATIENT"}, False),
])
def test_prescription_policy_span(attrs, expected):
    lsss = compile_lsss(parse_policy(PRESCRIPTION))
    assert len(lsss.rows) == 4
    assert spans_target([lsss.rows[i] for i in lsss.rows_for(attrs)], lsss.width) is expected


def test_compile_refuses_placeholders():
    with pytest.raises(PlaceholderPresent):
        compile_lsss(parse_policy("$PID and PATIENT"))


# ---------------------------------------------------------------------------
# Encryption
# ---------------------------------------------------------------------------

def test_decrypt_succeeds_iff_policy_satisfied(authorities):
    rng = random.Random(99)
    plaintext = b"choreography payload"
    mismatches = []
    for policy in policy_corpus():
        ciphertext = AbeCiphertext.from_bytes(encrypt(authorities, policy, plaintext).to_bytes())
        for subset in attribute_subsets(policy, rng):
            key = keygen(authorities, "user", subset)
            try:
                opened = decrypt(key, ciphertext) == plaintext
            except PolicyNotSatisfied:
                opened = False
            if opened is not evaluate(policy, subset):
                mismatches.append((str(policy), sorted(subset)))
    assert mismatches == []


def test_prescription_ciphertext_has_one_share_per_leaf():
    policy = instantiate_policy(parse_policy("MINISTRY-INSPECTOR or ($PID and (PATIENT or RADIOLOGY))"), "PID476948")
    authorities = setup_authorities(2, [{"PID*", "PATIENT"}, {"MINISTRY-INSPECTOR", "RADIOLOGY"}], seed=3)
    ciphertext = encrypt(authorities, policy, b"prescription")
    assert len(ciphertext.wrapped_shares) == 4
    patient = keygen(authorities, "0xpatient", {"PATIENT", "PID476948"})
    assert decrypt(patient, ciphertext) == b"prescription"
    with pytest.raises(PolicyNotSatisfied):
        decrypt(keygen(authorities, "0xother", {"PATIENT", "PID1"}), ciphertext)


def test_empty_plaintext(authorities):
    ciphertext = encrypt(authorities, Attr("A0"), b"")
    assert decrypt(keygen(authorities, "u", {"A0"}), ciphertext) == b""
    with pytest.raises(PolicyNotSatisfied):
        decrypt(keygen(authorities, "u", set()), ciphertext)


def test_encryption_is_randomized(authorities):
    policy = parse_policy("A0 and (A1 or A2)")
    first = encrypt(authorities, policy, b"same").to_bytes()
    second = encrypt(authorities, policy, b"same").to_bytes()
    assert first != second
    key = keygen(authorities, "u", {"A0", "A2"})
    assert decrypt(key, AbeCiphertext.from_bytes(first)) == decrypt(key, AbeCiphertext.from_bytes(second)) == b"same"


def test_one_key_opens_every_satisfied_ciphertext(authorities):
    key = keygen(authorities, "u", {"A0", "A3"})
    for text in ["A0", "A3 or A5", "A0 and A3", "(A1 and A2) or A0"]:
        assert decrypt(key, encrypt(authorities, parse_policy(text), text.encode())) == text.encode()


def test_single_bit_flips_are_detected(authorities):
    rng = random.Random(5)
    policy = parse_policy("A0 or (A1 and (A2 or A3))")
    key = keygen(authorities, "u", {"A1", "A3"})
    data = encrypt(authorities, policy, b"x" * 48).to_bytes()
    for _ in range(100):
        position = rng.randrange(len(data))
        flipped = bytearray(data)
        flipped[position] ^= 1 << rng.randrange(8)
        with pytest.raises(IntegrityFailure):
            decrypt(key, AbeCiphertext.from_bytes(bytes(flipped)))


def test_flips_in_payload_and_shares_are_integrity_failures(authorities):
    policy = parse_policy("A0 and A1")
    key = keygen(authorities, "u", {"A0", "A1"})
    ciphertext = encrypt(authorities, policy, b"payload")

    payload = bytearray(ciphertext.encrypted_payload)
    payload[0] ^= 0x80
    tampered = AbeCiphertext(ciphertext.policy_string, ciphertext.lsss, ciphertext.wrapped_shares,
                             ciphertext.payload_nonce, bytes(payload))
    with pytest.raises(IntegrityFailure):
        decrypt(key, tampered)

    share = ciphertext.wrapped_shares[1]
    blob = bytearray(share.blob)
    blob[-1] ^= 0x01
    shares = (ciphertext.wrapped_shares[0], abe.WrappedShare(share.nonce, bytes(blob)))
    tampered = AbeCiphertext(ciphertext.policy_string, ciphertext.lsss, shares,
                             ciphertext.payload_nonce, ciphertext.encrypted_payload)
    with pytest.raises(IntegrityFailure):
        decrypt(key, tampered)


@pytest.mark.parametrize("data", [b"", b"\x02" + bytes(16), b"\x01\xff\xff\xff\xff"])
def test_malformed_ciphertexts(data):
    with pytest.raises(MalformedCiphertext):
        AbeCiphertext.from_bytes(data)


def test_trailing_bytes_rejected(authorities):
    data = encrypt(authorities, Attr("A0"), b"abc").to_bytes()
    with pytest.raises(MalformedCiphertext):
        AbeCiphertext.from_bytes(data + b"\x00")


# ---------------------------------------------------------------------------
# Authorities and keys
# ---------------------------------------------------------------------------

def test_keygen_is_deterministic(authorities):
    first = keygen(authorities, "0xb0", {"PATIENT", "PID476948"})
    second = keygen(authorities, "0xb0", {"patient", "PID476948"})
    assert first.attribute_secrets == second.attribute_secrets
    assert set(first.attribute_secrets) == {"PATIENT", "PID476948"}


def test_seeded_authorities_are_reproducible():
    partition = round_robin_partition(["A", "B", "C"], 2)
    first = setup_authorities(2, partition, seed=42)
    second = setup_authorities(2, partition, seed=42)
    assert keygen(first, "u", {"A", "PID9"}).attribute_secrets == keygen(second, "u", {"A", "PID9"}).attribute_secrets
    other = setup_authorities(2, partition, seed=43)
    assert keygen(other, "u", {"A"}).attribute_secrets != keygen(first, "u", {"A"}).attribute_secrets


def test_wrapping_keys_are_cached_per_authority():
    first, second = setup_authorities(2, round_robin_partition(["A", "B"], 2), seed=5)
    assert first.wrapping_key("PID9") is first.wrapping_key("PID9")
    assert first.wrapping_key("PID9") != second.wrapping_key("B")
    grown = replace(first, managed_attributes=first.managed_attributes | {"C"})
    assert grown._wrapping_keys == {}
    assert grown.wrapping_key("PID9") == first.wrapping_key("PID9")
    assert not hasattr(abe._derive_wrapping_key, "cache_info")


def test_empty_key(authorities):
    assert keygen(authorities, "u", set()).attribute_secrets == {}


def test_unmanaged_attribute(authorities):
    with pytest.raises(UnmanagedAttribute):
        keygen(authorities, "u", {"NOBODY"})


def test_round_robin_partition():
    partition = round_robin_partition(["c", "a", "b", "d"], 3)
    assert partition == [frozenset({"PID*", "A", "D"}), frozenset({"B"}), frozenset({"C"})]


def test_partition_from_mapping():
    assert partition_from_mapping({"a": 1, "B": 0}, 2) == [frozenset({"B"}), frozenset({"A"})]
    with pytest.raises(PartitionConflict):
        partition_from_mapping({"A": 2}, 2)


@pytest.mark.parametrize("partition", [
    [{"A"}, {"A"}],
    [{"PID*"}, {"PID1"}],
])
def test_overlapping_partitions_conflict(partition):
    with pytest.raises(PartitionConflict):
        setup_authorities(2, partition)


def test_partition_size_must_match_authority_count():
    with pytest.raises(PartitionConflict):
        setup_authorities(3, [{"A"}, {"B"}])


def test_key_serialization_keeps_secrets(authorities):
    key = keygen(authorities, "0xb0", {"A0", "A1"})
    restored = AbKey.from_dict(key.to_dict())
    assert restored == key
    assert restored.attributes == {"A0", "A1"}
