"""
Certifier attestations binding an account to a role, optionally scoped to
a process instance. Verified by the engine and re-verified on-chain.
"""

import logging
from dataclasses import dataclass
from typing import Collection

from src.core.abi import encode_args
from src.core.ledger import Account, address_from_public_key, verify_signature

logger = logging.getLogger(__name__)

GLOBAL_SCOPE = "GLOBAL"


def attestation_message(subject: str, role: str, scope: str) -> bytes:
    return encode_args("cloak/attestation", subject, role.upper(), scope)


@dataclass(frozen=True)
class Attestation:
    subject: str
    claimed_role: str
    instance_scope: str
    certifier_key: bytes
    signature: bytes

    @property
    def certifier(self) -> str:
        return address_from_public_key(self.certifier_key)

    def verify(self, trusted_keys: Collection[bytes]) -> bool:
        if self.certifier_key not in trusted_keys:
            return False
        message = attestation_message(self.subject, self.claimed_role, self.instance_scope)
        return verify_signature(self.certifier_key, self.signature, message)

    def packed(self) -> bytes:
        """Certifier key and signature, as kept in contract storage"""
        return self.certifier_key + self.signature

    def to_abi(self) -> dict:
        return {
            "subject": self.subject,
            "role": self.claimed_role,
            "scope": self.instance_scope,
            "certifier_key": self.certifier_key,
            "signature": self.signature,
        }

    @classmethod
    def from_abi(cls, data: dict) -> "Attestation":
        return cls(data["subject"], data["role"], data["scope"], data["certifier_key"], data["signature"])

    def to_dict(self) -> dict:
        data = self.to_abi()
        data["certifier_key"] = self.certifier_key.hex()
        data["signature"] = self.signature.hex()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Attestation":
        return cls(data["subject"], data["role"], data["scope"],
                   bytes.fromhex(data["certifier_key"]), bytes.fromhex(data["signature"]))


def issue_attestation(certifier: Account, subject: str, role: str, scope: str = GLOBAL_SCOPE) -> Attestation:
    """Sign a role claim for subject; scope is an instance id or GLOBAL"""
    role = role.upper()
    signature = certifier.sign(attestation_message(subject, role, scope))
    logger.debug(f"Certifier {certifier.address} attested {subject} as {role} ({scope})")
    return Attestation(subject, role, scope, certifier.public_key, signature)
