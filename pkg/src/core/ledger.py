"""
Ledger Module for CLOAK

Simulated programmable blockchain: Ed25519 accounts, signed transactions,
hash-linked blocks sealed one transaction at a time, deterministic gas
metering and a host for the deployed contracts.
"""

import csv
import hashlib
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import orjson
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from src.core.abi import decode_args, encode_args, encode_value
from src.core.base_contract import BaseContract, CallContext, GasMeter, GasSchedule
from src.core.errors import (
    BadNonce, BadSignature, ContractRevert, MalformedArguments, UnknownContract, UnknownFunction,
)

logger = logging.getLogger(__name__)

ZERO_HASH = bytes(32)
ADDRESS_SIZE = 20
INTERNAL_ERROR = "InternalError"


def address_from_public_key(public_key: bytes) -> str:
    return "0x" + hashlib.sha256(public_key).digest()[:ADDRESS_SIZE].hex()


class Account:
    """Ed25519 key pair and the address derived from its public key"""

    def __init__(self, private_key: Ed25519PrivateKey):
        self._private_key = private_key
        self.public_key = private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        self.address = address_from_public_key(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self._private_key.sign(message)

    def private_bytes(self) -> bytes:
        return self._private_key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption())

    def __repr__(self) -> str:
        return f"Account({self.address})"


def create_account(seed: Optional[bytes] = None) -> Account:
    """Fresh key pair; a seed makes the key pair (and address) reproducible"""
    if seed is None:
        return Account(Ed25519PrivateKey.generate())
    return Account(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest()))


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Transaction:
    sender: str
    public_key: bytes
    target_contract: str
    function_name: str
    payload: bytes
    nonce: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return encode_args(self.sender, self.target_contract, self.function_name, self.payload, self.nonce)

    @property
    def tx_hash(self) -> str:
        return hashlib.sha256(self.signing_bytes() + self.public_key + self.signature).hexdigest()

    @property
    def calldata_size(self) -> int:
        return len(self.function_name.encode("utf-8")) + len(self.payload)

    def verify(self) -> bool:
        if address_from_public_key(self.public_key) != self.sender:
            return False
        return verify_signature(self.public_key, self.signature, self.signing_bytes())

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "public_key": self.public_key.hex(),
            "target": self.target_contract,
            "function": self.function_name,
            "payload": self.payload.hex(),
            "nonce": self.nonce,
            "signature": self.signature.hex(),
            "hash": self.tx_hash,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Transaction":
        return cls(
            sender=data["sender"],
            public_key=bytes.fromhex(data["public_key"]),
            target_contract=data["target"],
            function_name=data["function"],
            payload=bytes.fromhex(data["payload"]),
            nonce=data["nonce"],
            signature=bytes.fromhex(data["signature"]),
        )


def sign_transaction(account: Account, target: str, function: str, args: Sequence[Any], nonce: int) -> Transaction:
    unsigned = Transaction(account.address, account.public_key, target, function, encode_args(*args), nonce)
    return Transaction(unsigned.sender, unsigned.public_key, target, function, unsigned.payload, nonce,
                       account.sign(unsigned.signing_bytes()))


class ReceiptStatus(str, Enum):
    SUCCESS = "SUCCESS"
    REVERTED = "REVERTED"


@dataclass(frozen=True)
class GasReceipt:
    tx_hash: str
    gas_used: int
    status: ReceiptStatus
    function_name: str = ""
    block_number: int = 0
    reason: Optional[str] = None
    output: Any = None

    @property
    def succeeded(self) -> bool:
        return self.status is ReceiptStatus.SUCCESS

    def to_dict(self) -> dict:
        return {
            "tx_hash": self.tx_hash,
            "function": self.function_name,
            "block": self.block_number,
            "gas_used": self.gas_used,
            "status": self.status.value,
            "reason": self.reason,
        }


def compute_block_hash(number: int, previous_hash: bytes, tx_hashes: Iterable[str]) -> bytes:
    return hashlib.sha256(encode_value([number, previous_hash, list(tx_hashes)])).digest()


@dataclass(frozen=True)
class Block:
    block_number: int
    previous_hash: bytes
    transactions: Tuple[Transaction, ...]
    block_hash: bytes

    @classmethod
    def seal(cls, number: int, previous_hash: bytes, transactions: Sequence[Transaction]) -> "Block":
        txs = tuple(transactions)
        return cls(number, previous_hash, txs, compute_block_hash(number, previous_hash, (t.tx_hash for t in txs)))

    def to_dict(self, receipts: Sequence[GasReceipt] = ()) -> dict:
        return {
            "number": self.block_number,
            "previous_hash": self.previous_hash.hex(),
            "hash": self.block_hash.hex(),
            "transactions": [t.to_dict() for t in self.transactions],
            "receipts": [r.to_dict() for r in receipts],
        }


class Ledger:
    """Single-writer chain: every submission is executed and sealed under one lock"""

    def __init__(self, schedule: Optional[GasSchedule] = None):
        self._logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.schedule = schedule or GasSchedule()
        self._lock = threading.RLock()
        self._contracts: Dict[str, BaseContract] = {}
        self._nonces: Dict[str, int] = {}
        self._blocks: List[Block] = [Block.seal(0, ZERO_HASH, ())]
        self._receipts: List[GasReceipt] = []
        self._logger.info("Ledger initialized with genesis block")

    # --- contracts ---------------------------------------------------------

    def deploy(self, contract: BaseContract) -> str:
        contract_id = contract.get_name()
        with self._lock:
            if contract_id in self._contracts:
                raise UnknownContract(f"Contract id already deployed: {contract_id}")
            self._contracts[contract_id] = contract
        self._logger.info(f"Deployed contract '{contract_id}'")
        return contract_id

    def contract(self, contract_id: str) -> BaseContract:
        try:
            return self._contracts[contract_id]
        except KeyError:
            raise UnknownContract(f"Unknown contract: {contract_id}") from None

    @property
    def contract_ids(self) -> List[str]:
        return list(self._contracts)

    # --- chain state -------------------------------------------------------

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def receipts(self) -> Tuple[GasReceipt, ...]:
        return tuple(self._receipts)

    @property
    def height(self) -> int:
        return len(self._blocks)

    @property
    def total_gas(self) -> int:
        return sum(r.gas_used for r in self._receipts)

    def next_nonce(self, address: str) -> int:
        return self._nonces.get(address, 0)

    def state_digest(self) -> str:
        """Digest over every contract's storage, for before/after comparisons"""
        h = hashlib.sha256()
        for contract_id in sorted(self._contracts):
            h.update(contract_id.encode("utf-8"))
            h.update(self._contracts[contract_id].storage.digest().encode("ascii"))
        return h.hexdigest()

    # --- writes ------------------------------------------------------------

    def call(self, account: Account, target: str, function: str, *args) -> GasReceipt:
        """Sign with the account's next nonce and submit atomically"""
        with self._lock:
            tx = sign_transaction(account, target, function, args, self.next_nonce(account.address))
            return self.submit(tx)

    def submit(self, tx: Transaction) -> GasReceipt:
        with self._lock:
            if not tx.verify():
                self._logger.warning(f"Rejected tx {tx.tx_hash[:16]}: bad signature")
                raise BadSignature(f"Signature does not verify for {tx.sender}")
            expected = self.next_nonce(tx.sender)
            if tx.nonce != expected:
                self._logger.warning(f"Rejected tx {tx.tx_hash[:16]}: nonce {tx.nonce}, expected {expected}")
                raise BadNonce(f"Nonce {tx.nonce} does not match next nonce {expected} of {tx.sender}")
            contract = self.contract(tx.target_contract)

            block_number = len(self._blocks)
            meter = GasMeter(self.schedule)
            meter.charge(self.schedule.base, "base")
            meter.charge(self.schedule.calldata_byte * tx.calldata_size, "calldata")

            for deployed in self._contracts.values():
                deployed.storage.begin()
            ctx = CallContext(tx.sender, tx.sender, block_number, meter, self, tx.target_contract)
            status, reason, output = ReceiptStatus.SUCCESS, None, None
            try:
                output = contract.invoke(ctx, tx.function_name, decode_args(tx.payload))
            except ContractRevert as e:
                status, reason = ReceiptStatus.REVERTED, e.reason
            except (UnknownFunction, MalformedArguments) as e:
                status, reason = ReceiptStatus.REVERTED, e.__class__.__name__
            except Exception as e:
                self._logger.error(f"Handler {tx.target_contract}.{tx.function_name} failed: {e}", exc_info=True)
                status, reason = ReceiptStatus.REVERTED, INTERNAL_ERROR

            if status is ReceiptStatus.REVERTED:
                for deployed in self._contracts.values():
                    deployed.storage.rollback()
                gas_used = self.schedule.base + self.schedule.calldata_byte * tx.calldata_size
            else:
                for deployed in self._contracts.values():
                    deployed.storage.commit()
                gas_used = meter.used

            self._nonces[tx.sender] = expected + 1
            block = Block.seal(block_number, self._blocks[-1].block_hash, [tx])
            self._blocks.append(block)
            receipt = GasReceipt(tx.tx_hash, gas_used, status, tx.function_name, block_number, reason, output)
            self._receipts.append(receipt)

        if receipt.succeeded:
            self._logger.info(f"Block {block_number} sealed: {tx.target_contract}.{tx.function_name} "
                              f"gas={gas_used}")
        else:
            self._logger.warning(f"Block {block_number} sealed: {tx.target_contract}.{tx.function_name} "
                                 f"REVERTED ({reason}) gas={gas_used}")
        return receipt

    # --- reads -------------------------------------------------------------

    def query(self, contract_id: str, function: str, *args) -> Any:
        """Zero-gas read; appends nothing to the chain"""
        return self.contract(contract_id).query(function, list(args))

    def verify_chain(self) -> bool:
        return verify_chain(self)

    # --- export / replay ---------------------------------------------------

    def iter_export_records(self) -> Iterable[dict]:
        receipts_by_block = {r.block_number: r for r in self._receipts}
        for block in self._blocks:
            receipt = receipts_by_block.get(block.block_number)
            yield block.to_dict([receipt] if receipt else [])

    def export_chain(self, path: Union[str, Path]) -> Path:
        """Newline-delimited JSON, one block per line"""
        path = Path(path)
        with open(path, "wb") as f:
            for record in self.iter_export_records():
                f.write(orjson.dumps(record) + b"\n")
        self._logger.info(f"Exported {len(self._blocks)} blocks to {path}")
        return path

    def export_receipts_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["tx_hash", "function", "gas_used", "status"])
            for r in self._receipts:
                status = r.status.value if r.succeeded else f"REVERTED({r.reason})"
                writer.writerow([r.tx_hash, r.function_name, r.gas_used, status])
        self._logger.info(f"Exported {len(self._receipts)} receipts to {path}")
        return path


def verify_chain(ledger: Ledger) -> bool:
    """True iff every block links to its predecessor and every signature verifies"""
    previous = ZERO_HASH
    for index, block in enumerate(ledger.blocks):
        if block.block_number != index or block.previous_hash != previous:
            logger.warning(f"Chain broken at block {index}: bad link")
            return False
        if compute_block_hash(block.block_number, block.previous_hash,
                              (t.tx_hash for t in block.transactions)) != block.block_hash:
            logger.warning(f"Chain broken at block {index}: hash mismatch")
            return False
        for tx in block.transactions:
            if not tx.verify():
                logger.warning(f"Chain broken at block {index}: bad signature")
                return False
        previous = block.block_hash
    return True


def load_chain_records(path: Union[str, Path]) -> List[dict]:
    with open(path, "rb") as f:
        return [orjson.loads(line) for line in f if line.strip()]


def replay_chain(records: Iterable[dict], contract_factories: Sequence[Callable[[], BaseContract]],
                 schedule: Optional[GasSchedule] = None) -> Ledger:
    """Rebuild a ledger by resubmitting every exported transaction from genesis"""
    ledger = Ledger(schedule)
    for factory in contract_factories:
        ledger.deploy(factory())
    for record in records:
        for tx_data in record.get("transactions", []):
            ledger.submit(Transaction.from_dict(tx_data))
    logger.info(f"Replayed chain: {ledger.height} blocks, {ledger.total_gas} gas")
    return ledger
