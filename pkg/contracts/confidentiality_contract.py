"""
Confidentiality Contract

Registry of policy locators and confidential payload records, notarized
key requests and auditor registrations. Recording a confidential payload
advances the control flow through a same-transaction call into the
Process Contract.
"""

import logging
import re
import struct
from typing import Any, Callable, Dict, Iterable, List, Optional

from src.core.attestation import GLOBAL_SCOPE, Attestation
from src.core.base_contract import BaseContract, CallContext, GasSchedule
from src.core.errors import ContractRevert, NotFound, UnknownInstance

logger = logging.getLogger(__name__)

_LOCATOR_RE = re.compile(r"^cf01[0-9a-f]{64}$")
_RECORD_META = struct.Struct("<32s20sQ")


def _address_bytes(address: str) -> bytes:
    return bytes.fromhex(address[2:])


class ConfidentialityContract(BaseContract):

    def __init__(self, schedule: Optional[GasSchedule] = None, certifiers: Iterable[bytes] = (),
                 process_id: str = "process"):
        super().__init__(schedule)
        self.certifiers = frozenset(certifiers)
        self.process_id = process_id

    def get_name(self) -> str:
        return "confidentiality"

    def get_write_functions(self) -> Dict[str, Callable]:
        return {
            "recordPolicyLocator": self.record_policy_locator,
            "recordConfidential": self.record_confidential,
            "logKeyRequest": self.log_key_request,
            "registerAuditor": self.register_auditor,
        }

    def get_read_functions(self) -> Dict[str, Callable]:
        return {
            "getPolicyLocator": self.get_policy_locator,
            "getRecord": self.get_record,
            "getRecords": self.get_records,
            "getKeyRequests": self.get_key_requests,
            "getAuditors": self.get_auditors,
        }

    # --- writes ------------------------------------------------------------

    def record_policy_locator(self, ctx: CallContext, pid: str, locator: str) -> bool:
        if ctx.caller != self.process_id:
            raise ContractRevert("Unauthorized", "policy locators are recorded at instance creation")
        if not _LOCATOR_RE.match(locator):
            raise ContractRevert("MalformedLocator", locator)
        self._write(ctx, f"loc/{pid}", locator)
        return True

    def record_confidential(self, ctx: CallContext, pid: str, message_id: str, locator: str,
                            payload_hash: bytes, public_vars: Dict[str, Any]) -> bool:
        if f"loc/{pid}" not in self.storage:
            raise ContractRevert("UnknownInstance", pid)
        if not _LOCATOR_RE.match(locator):
            raise ContractRevert("MalformedLocator", locator)
        if not isinstance(payload_hash, bytes) or len(payload_hash) != 32:
            raise ContractRevert("MalformedRecord", "payload hash must be 32 bytes")
        if payload_hash != bytes.fromhex(locator[4:]):
            raise ContractRevert("MalformedRecord", "payload hash does not match the locator")

        self._write(ctx, f"rec/{pid}/{message_id}/loc", locator)
        self._write(ctx, f"rec/{pid}/{message_id}/meta",
                    _RECORD_META.pack(payload_hash, _address_bytes(ctx.origin), ctx.block_number))
        # reverts WrongSender or NotEnabled for the message
        ctx.call(self.process_id, "updatePublicState", pid, message_id, public_vars)
        self._logger.info(f"Confidential record for {pid}/{message_id} at block {ctx.block_number}")
        return True

    def log_key_request(self, ctx: CallContext, attributes: List[str]) -> int:
        if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
            raise ContractRevert("MalformedArguments", "attributes must be a list of names")
        index = self._read("kr/count", 0)
        self._write(ctx, "kr/count", index + 1)
        self._write(ctx, f"kr/{index}", [_address_bytes(ctx.origin), ctx.block_number, sorted(attributes)])
        self._logger.info(f"Key request {index} notarized for {ctx.origin}")
        return index

    def register_auditor(self, ctx: CallContext, attestation: dict) -> bool:
        try:
            parsed = Attestation.from_abi(attestation)
        except (KeyError, TypeError):
            raise ContractRevert("UnattestedBinding", "malformed attestation")
        if (parsed.subject != ctx.origin or parsed.instance_scope != GLOBAL_SCOPE
                or not parsed.verify(self.certifiers)):
            raise ContractRevert("UnattestedBinding", f"{ctx.origin} as {parsed.claimed_role}")
        self._write(ctx, f"aud/{ctx.origin}/{parsed.claimed_role}", parsed.packed())
        self._logger.info(f"Auditor {ctx.origin} registered as {parsed.claimed_role}")
        return True

    # --- views -------------------------------------------------------------

    def get_policy_locator(self, pid: str) -> str:
        locator = self._read(f"loc/{pid}")
        if locator is None:
            raise UnknownInstance(f"No policy locator recorded for {pid}")
        return locator

    def get_record(self, pid: str, message_id: str) -> dict:
        locator = self._read(f"rec/{pid}/{message_id}/loc")
        if locator is None:
            raise NotFound(f"No confidential record for {pid}/{message_id}")
        payload_hash, writer, block = _RECORD_META.unpack(self._read(f"rec/{pid}/{message_id}/meta"))
        return {
            "instance_id": pid,
            "message_id": message_id,
            "locator": locator,
            "payload_hash": payload_hash.hex(),
            "writer": "0x" + writer.hex(),
            "block_number": block,
        }

    def get_records(self, pid: str) -> List[dict]:
        prefix = f"rec/{pid}/"
        message_ids = sorted({k[len(prefix):].rsplit("/", 1)[0] for k in self.storage.keys_with_prefix(prefix)})
        records = [self.get_record(pid, m) for m in message_ids]
        return sorted(records, key=lambda r: r["block_number"])

    def get_key_requests(self) -> List[dict]:
        entries = []
        for index in range(self._read("kr/count", 0)):
            requester, block, attributes = self._read(f"kr/{index}")
            entries.append({"index": index, "requester": "0x" + requester.hex(),
                            "block_number": block, "attributes": list(attributes)})
        return entries

    def get_auditors(self) -> List[dict]:
        auditors = []
        for key in sorted(self.storage.keys_with_prefix("aud/")):
            _, address, role = key.split("/", 2)
            auditors.append({"address": address, "role": role})
        return auditors
