"""
Multi-Authority Attribute-Based Encryption Module for CLOAK

Ciphertext-policy encryption realized as a wrapped-share LSSS key
encapsulation over F_p (p = 2^61 - 1):

- each authority derives a per-attribute wrapping key from its master secret;
- a policy compiles to an LSSS matrix whose rows carry shares of a secret s;
- every share is AEAD-wrapped under its row attribute's wrapping key;
- the payload is AEAD-encrypted under a key derived from s.

Decryption succeeds iff the key's attributes span the target vector
(1, 0, ..., 0), i.e. iff they satisfy the policy. Colluding users can pool
wrapping keys; this scheme offers functional correctness only.
"""

import hashlib
import logging
import os
import secrets
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from src.core.errors import (
    IntegrityFailure, MalformedCiphertext, PartitionConflict, PlaceholderPresent,
    PolicyNotSatisfied, UnmanagedAttribute,
)
from src.core.policy import And, Attr, AttributeSet, Or, PolicyAst, has_placeholder, parse_policy, print_policy

logger = logging.getLogger(__name__)

FIELD_PRIME = 2 ** 61 - 1
ABE_WIRE_VERSION = 0x01
NONCE_SIZE = 12
KEY_SIZE = 32
PID_PATTERN = "PID*"

_ELEMENT = struct.Struct("<Q")


def _hkdf(secret: bytes, info: bytes, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=salt, info=info).derive(secret)


def _derive_wrapping_key(master_secret: bytes, attribute: str) -> bytes:
    return _hkdf(master_secret, b"cloak/attribute/" + attribute.encode("utf-8"))


# ---------------------------------------------------------------------------
# Authorities and keys
# ---------------------------------------------------------------------------

def _pattern_matches(pattern: str, attribute: str) -> bool:
    if pattern.endswith("*"):
        return attribute.startswith(pattern[:-1])
    return pattern == attribute


@dataclass(frozen=True)
class AuthorityConfig:
    authority_id: str
    master_secret: bytes = field(repr=False)
    managed_attributes: frozenset = frozenset()
    _wrapping_keys: Dict[str, bytes] = field(default_factory=dict, init=False, repr=False, compare=False)

    def manages(self, attribute: str) -> bool:
        return any(_pattern_matches(p, attribute) for p in self.managed_attributes)

    def wrapping_key(self, attribute: str) -> bytes:
        if not self.manages(attribute):
            raise UnmanagedAttribute(f"{self.authority_id} does not manage {attribute}")
        key = self._wrapping_keys.get(attribute)
        if key is None:
            key = self._wrapping_keys[attribute] = _derive_wrapping_key(self.master_secret, attribute)
        return key


@dataclass(frozen=True)
class AbKey:
    """A user's merged decryption key: attribute name -> wrapping key"""
    user_gid: str
    attribute_secrets: Mapping[str, bytes] = field(default_factory=dict, repr=False)

    @property
    def attributes(self) -> AttributeSet:
        return AttributeSet(self.attribute_secrets)

    def to_dict(self) -> dict:
        return {
            "user": self.user_gid,
            "attributes": {a: k.hex() for a, k in sorted(self.attribute_secrets.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AbKey":
        return cls(data["user"], {a: bytes.fromhex(k) for a, k in data["attributes"].items()})


def round_robin_partition(attributes: Iterable[str], n: int) -> List[frozenset]:
    """`PID*` on authority 0, remaining attributes dealt round-robin in sorted order"""
    buckets: List[set] = [set() for _ in range(n)]
    buckets[0].add(PID_PATTERN)
    for i, attribute in enumerate(sorted({a.upper() for a in attributes} - {PID_PATTERN})):
        buckets[i % n].add(attribute)
    return [frozenset(b) for b in buckets]


def partition_from_mapping(mapping: Mapping[str, int], n: int) -> List[frozenset]:
    """Convert an attribute -> authority index mapping into per-authority sets"""
    buckets: List[set] = [set() for _ in range(n)]
    for attribute, index in mapping.items():
        if not 0 <= index < n:
            raise PartitionConflict(f"Attribute {attribute} mapped to missing authority {index}")
        buckets[index].add(attribute.upper())
    return [frozenset(b) for b in buckets]


def _check_partition(partition: Sequence[Iterable[str]]) -> None:
    owners: Dict[str, int] = {}
    for index, managed in enumerate(partition):
        for pattern in managed:
            if pattern in owners and owners[pattern] != index:
                raise PartitionConflict(f"{pattern} claimed by authorities {owners[pattern]} and {index}")
            owners[pattern] = index
    # an exact name covered by another authority's pattern is also a conflict
    for name, index in owners.items():
        if name.endswith("*"):
            continue
        for pattern, other in owners.items():
            if other != index and pattern.endswith("*") and _pattern_matches(pattern, name):
                raise PartitionConflict(f"{name} claimed by authorities {index} and {other}")


def setup_authorities(n: int, partition: Sequence[Iterable[str]],
                      seed: Optional[int] = None) -> List[AuthorityConfig]:
    """Create n authorities; with a seed the master secrets are reproducible"""
    if n < 1:
        raise ValueError(f"Authority count must be positive, got {n}")
    if len(partition) != n:
        raise PartitionConflict(f"Partition lists {len(partition)} authorities, expected {n}")
    _check_partition(partition)

    authorities = []
    for index, managed in enumerate(partition):
        if seed is None:
            master = secrets.token_bytes(KEY_SIZE)
        else:
            master = _hkdf(str(seed).encode("ascii"), f"cloak/authority/{index}".encode("ascii"))
        authorities.append(AuthorityConfig(f"AUTH{index}", master, frozenset(a.upper() for a in managed)))
    logger.info(f"Set up {n} attribute authorities ({'seeded' if seed is not None else 'random'})")
    return authorities


def authority_for(authorities: Sequence[AuthorityConfig], attribute: str) -> AuthorityConfig:
    owners = [a for a in authorities if a.manages(attribute)]
    if not owners:
        raise UnmanagedAttribute(f"No authority manages {attribute}")
    if len(owners) > 1:
        raise PartitionConflict(f"{attribute} managed by {[a.authority_id for a in owners]}")
    return owners[0]


def keygen(authorities: Sequence[AuthorityConfig], user_gid: str, attrs: Iterable[str]) -> AbKey:
    """Merge the key parts every managing authority issues for attrs"""
    attribute_set = AttributeSet(attrs)
    parts = {a: authority_for(authorities, a).wrapping_key(a) for a in sorted(attribute_set)}
    logger.debug(f"Issued a-b key for {user_gid} with {len(parts)} attribute(s)")
    return AbKey(user_gid, parts)


# ---------------------------------------------------------------------------
# LSSS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LsssMatrix:
    rows: Tuple[Tuple[int, ...], ...]
    row_labels: Tuple[str, ...]
    width: int

    def rows_for(self, attributes) -> List[int]:
        return [i for i, label in enumerate(self.row_labels) if label in attributes]


def compile_lsss(policy: PolicyAst) -> LsssMatrix:
    """Monotone formula to LSSS by recursive vector labeling"""
    if has_placeholder(policy):
        raise PlaceholderPresent("Cannot compile a policy holding the $PID placeholder")

    vectors: List[List[int]] = []
    labels: List[str] = []
    width = 1

    def visit(node: PolicyAst, vector: List[int]) -> None:
        nonlocal width
        if isinstance(node, Attr):
            vectors.append(vector)
            labels.append(node.name)
        elif isinstance(node, Or):
            visit(node.left, vector)
            visit(node.right, vector)
        else:
            width += 1
            padded = vector + [0] * (width - 1 - len(vector))
            visit(node.left, padded + [1])
            visit(node.right, [0] * (width - 1) + [FIELD_PRIME - 1])

    visit(policy, [1])
    rows = tuple(tuple(v + [0] * (width - len(v))) for v in vectors)
    return LsssMatrix(rows, tuple(labels), width)


def solve_span(rows: Sequence[Sequence[int]], width: int) -> Optional[List[int]]:
    """Coefficients c with sum(c_i * row_i) == (1, 0, ..., 0) mod p, or None"""
    n = len(rows)
    if n == 0:
        return None
    p = FIELD_PRIME
    # one equation per column, one unknown per row, plus the target column
    system = [[rows[i][j] % p for i in range(n)] + [1 if j == 0 else 0] for j in range(width)]
    pivots: List[int] = []
    rank = 0
    for col in range(n):
        pivot = next((i for i in range(rank, width) if system[i][col]), None)
        if pivot is None:
            continue
        system[rank], system[pivot] = system[pivot], system[rank]
        inverse = pow(system[rank][col], p - 2, p)
        system[rank] = [x * inverse % p for x in system[rank]]
        for i in range(width):
            factor = system[i][col]
            if i != rank and factor:
                system[i] = [(a - factor * b) % p for a, b in zip(system[i], system[rank])]
        pivots.append(col)
        rank += 1
        if rank == width:
            break
    if any(system[i][n] for i in range(rank, width)):
        return None
    coefficients = [0] * n
    for i, col in enumerate(pivots):
        coefficients[col] = system[i][n]
    return coefficients


# ---------------------------------------------------------------------------
# Ciphertexts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WrappedShare:
    nonce: bytes
    blob: bytes


@dataclass(frozen=True)
class AbeCiphertext:
    policy_string: str
    lsss: LsssMatrix
    wrapped_shares: Tuple[WrappedShare, ...]
    payload_nonce: bytes
    encrypted_payload: bytes

    @property
    def policy(self) -> PolicyAst:
        return parse_policy(self.policy_string)

    def header_digest(self) -> bytes:
        return _header_digest(self.policy_string, self.lsss)

    def body_digest(self) -> bytes:
        return _body_digest(self.header_digest(), self.wrapped_shares)

    def to_bytes(self) -> bytes:
        policy = self.policy_string.encode("utf-8")
        out = bytearray()
        out += struct.pack("<BI", ABE_WIRE_VERSION, len(policy)) + policy
        out += struct.pack("<HH", len(self.lsss.rows), self.lsss.width)
        for label, row in zip(self.lsss.row_labels, self.lsss.rows):
            encoded = label.encode("utf-8")
            out += struct.pack("<H", len(encoded)) + encoded
            out += b"".join(_ELEMENT.pack(x) for x in row)
        for share in self.wrapped_shares:
            out += share.nonce + struct.pack("<H", len(share.blob)) + share.blob
        out += self.payload_nonce + struct.pack("<I", len(self.encrypted_payload)) + self.encrypted_payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AbeCiphertext":
        reader = _Reader(data)
        try:
            version, policy_len = reader.unpack("<BI")
            if version != ABE_WIRE_VERSION:
                raise MalformedCiphertext(f"Unsupported ciphertext version {version}")
            policy_string = reader.take(policy_len).decode("utf-8")
            row_count, width = reader.unpack("<HH")
            labels, rows = [], []
            for _ in range(row_count):
                (label_len,) = reader.unpack("<H")
                labels.append(reader.take(label_len).decode("utf-8"))
                rows.append(tuple(_ELEMENT.unpack(reader.take(8))[0] for _ in range(width)))
            shares = []
            for _ in range(row_count):
                nonce = reader.take(NONCE_SIZE)
                (blob_len,) = reader.unpack("<H")
                shares.append(WrappedShare(nonce, reader.take(blob_len)))
            payload_nonce = reader.take(NONCE_SIZE)
            (payload_len,) = reader.unpack("<I")
            payload = reader.take(payload_len)
        except (struct.error, UnicodeDecodeError) as e:
            raise MalformedCiphertext(f"Malformed ciphertext: {e}") from None
        if reader.remaining:
            raise MalformedCiphertext(f"{reader.remaining} trailing byte(s) after ciphertext")
        return cls(policy_string, LsssMatrix(tuple(rows), tuple(labels), width),
                   tuple(shares), payload_nonce, payload)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise MalformedCiphertext("Truncated ciphertext")
        chunk = bytes(self.data[self.offset:self.offset + n])
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _header_digest(policy_string: str, lsss: LsssMatrix) -> bytes:
    h = hashlib.sha256()
    h.update(policy_string.encode("utf-8"))
    h.update(struct.pack("<HH", len(lsss.rows), lsss.width))
    for label, row in zip(lsss.row_labels, lsss.rows):
        h.update(struct.pack("<H", len(label)) + label.encode("utf-8"))
        h.update(b"".join(_ELEMENT.pack(x) for x in row))
    return h.digest()


def _body_digest(header_digest: bytes, shares: Sequence[WrappedShare]) -> bytes:
    h = hashlib.sha256(header_digest)
    for share in shares:
        h.update(share.nonce + share.blob)
    return h.digest()


def _payload_key(secret: int, header_digest: bytes) -> bytes:
    return _hkdf(_ELEMENT.pack(secret), b"cloak/payload", salt=header_digest)


def _share_aad(header_digest: bytes, index: int) -> bytes:
    return header_digest + struct.pack("<I", index)


def encrypt(authorities: Sequence[AuthorityConfig], policy: PolicyAst, plaintext: bytes) -> AbeCiphertext:
    lsss = compile_lsss(policy)
    policy_string = print_policy(policy)
    p = FIELD_PRIME

    vector = [secrets.randbelow(p) for _ in range(lsss.width)]
    secret = vector[0]
    header = _header_digest(policy_string, lsss)

    shares = []
    for index, (label, row) in enumerate(zip(lsss.row_labels, lsss.rows)):
        share = sum(a * b for a, b in zip(row, vector)) % p
        wrapping_key = authority_for(authorities, label).wrapping_key(label)
        nonce = os.urandom(NONCE_SIZE)
        blob = AESGCM(wrapping_key).encrypt(nonce, _ELEMENT.pack(share), _share_aad(header, index))
        shares.append(WrappedShare(nonce, blob))

    payload_nonce = os.urandom(NONCE_SIZE)
    body = _body_digest(header, shares)
    encrypted = AESGCM(_payload_key(secret, header)).encrypt(payload_nonce, plaintext, body)
    logger.debug(f"Encrypted {len(plaintext)} bytes under a {len(lsss.rows)}-row policy")
    return AbeCiphertext(policy_string, lsss, tuple(shares), payload_nonce, encrypted)


def decrypt(key: AbKey, ct: AbeCiphertext) -> bytes:
    lsss = ct.lsss
    if len(ct.wrapped_shares) != len(lsss.rows) or any(len(r) != lsss.width for r in lsss.rows):
        raise MalformedCiphertext("Share count or row width does not match the matrix")
    try:
        expected = compile_lsss(parse_policy(ct.policy_string))
    except Exception as e:
        raise MalformedCiphertext(f"Unreadable ciphertext policy: {e}") from None
    if expected != lsss:
        raise MalformedCiphertext("Matrix does not match the ciphertext policy")

    held = lsss.rows_for(key.attribute_secrets)
    coefficients = solve_span([lsss.rows[i] for i in held], lsss.width)
    if coefficients is None:
        raise PolicyNotSatisfied(f"Key of {key.user_gid} does not satisfy '{ct.policy_string}'")

    header = ct.header_digest()
    p = FIELD_PRIME
    secret = 0
    for index, coefficient in zip(held, coefficients):
        share = ct.wrapped_shares[index]
        wrapping_key = key.attribute_secrets[lsss.row_labels[index]]
        try:
            raw = AESGCM(wrapping_key).decrypt(share.nonce, share.blob, _share_aad(header, index))
        except InvalidTag:
            raise IntegrityFailure(f"Wrapped share {index} failed authentication") from None
        value = _ELEMENT.unpack(raw)[0]
        if value >= p:
            raise MalformedCiphertext(f"Share {index} is not a field element")
        secret = (secret + coefficient * value) % p

    try:
        return AESGCM(_payload_key(secret, header)).decrypt(
            ct.payload_nonce, ct.encrypted_payload, _body_digest(header, ct.wrapped_shares))
    except InvalidTag:
        raise IntegrityFailure("Payload failed authentication") from None
