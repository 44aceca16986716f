import random
import threading
from dataclasses import replace
from typing import Callable, Dict

import pytest

from src.core.abi import decode_args, encode_args
from src.core.base_contract import BaseContract, CallContext, GasSchedule
from src.core.errors import BadNonce, BadSignature, ContractRevert, MalformedArguments, UnknownContract
from src.core.ledger import (
    Ledger, ReceiptStatus, create_account, load_chain_records, replay_chain, sign_transaction, verify_chain,
)


class NotesContract(BaseContract):
    """Minimal key/value contract for exercising the host"""

    def get_name(self) -> str:
        return "notes"

    def get_write_functions(self) -> Dict[str, Callable]:
        return {"put": self.put, "refuse": self.refuse, "tally": self.tally}

    def get_read_functions(self) -> Dict[str, Callable]:
        return {"get": self.get}

    def put(self, ctx: CallContext, key: str, value) -> bool:
        self._write(ctx, key, value)
        return True

    def refuse(self, ctx: CallContext, key: str) -> bool:
        self._write(ctx, key, 1)
        raise ContractRevert("Refused", key)

    def tally(self, ctx: CallContext, key: str, items) -> int:
        self._write(ctx, key, True)
        return len(items)

    def get(self, key: str):
        return self._read(key)


def _calldata(function: str, *args) -> int:
    return len(function) + len(encode_args(*args))


@pytest.fixture
def ledger():
    ledger = Ledger()
    ledger.deploy(NotesContract())
    return ledger


@pytest.fixture
def alice():
    return create_account(b"alice")


# ---------------------------------------------------------------------------
# Gas metering
# ---------------------------------------------------------------------------

def test_fresh_slot_gas(ledger, alice):
    receipt = ledger.call(alice, "notes", "put", "a", 5)
    assert receipt.status is ReceiptStatus.SUCCESS
    assert receipt.gas_used == 21000 + 16 * _calldata("put", "a", 5) + 20000
    assert receipt.block_number == 1


def test_overwrite_and_growth_gas(ledger, alice):
    ledger.call(alice, "notes", "put", "a", 5)
    same = ledger.call(alice, "notes", "put", "a", 6)
    assert same.gas_used == 21000 + 16 * _calldata("put", "a", 6) + 5000
    grown = ledger.call(alice, "notes", "put", "a", b"\x01" * 40)
    assert grown.gas_used == 21000 + 16 * _calldata("put", "a", b"\x01" * 40) + 5000 + 20000


def test_multi_slot_value(ledger, alice):
    receipt = ledger.call(alice, "notes", "put", "s", "x" * 100)
    assert receipt.gas_used == 21000 + 16 * _calldata("put", "s", "x" * 100) + 4 * 20000


def test_gas_schedule_overrides(alice):
    ledger = Ledger(GasSchedule.from_overrides({"base": 1000, "fresh_slot": 1}))
    ledger.deploy(NotesContract(ledger.schedule))
    receipt = ledger.call(alice, "notes", "put", "a", 5)
    assert receipt.gas_used == 1000 + 16 * _calldata("put", "a", 5) + 1


def test_revert_rolls_back_and_charges_base(ledger, alice):
    before = ledger.state_digest()
    receipt = ledger.call(alice, "notes", "refuse", "k")
    assert receipt.status is ReceiptStatus.REVERTED
    assert receipt.reason == "Refused"
    assert receipt.gas_used == 21000 + 16 * _calldata("refuse", "k")
    assert ledger.query("notes", "get", "k") is None
    assert ledger.state_digest() == before
    assert ledger.height == 2
    assert ledger.next_nonce(alice.address) == 1


def test_unknown_function_and_bad_arity_revert(ledger, alice):
    assert ledger.call(alice, "notes", "erase", "a").reason == "UnknownFunction"
    assert ledger.call(alice, "notes", "put", "a").reason == "MalformedArguments"


def test_handler_failure_is_sealed_as_revert(ledger, alice):
    before = ledger.state_digest()
    receipt = ledger.call(alice, "notes", "tally", "k", 5)
    assert receipt.status is ReceiptStatus.REVERTED
    assert receipt.reason == "InternalError"
    assert receipt.gas_used == 21000 + 16 * _calldata("tally", "k", 5)
    assert ledger.query("notes", "get", "k") is None
    assert ledger.state_digest() == before
    assert ledger.height == 2
    assert ledger.next_nonce(alice.address) == 1
    assert verify_chain(ledger)
    assert ledger.call(alice, "notes", "tally", "k", [1, 2]).output == 2


def test_reads_are_free(ledger, alice):
    ledger.call(alice, "notes", "put", "a", 5)
    gas, height = ledger.total_gas, ledger.height
    assert ledger.query("notes", "get", "a") == 5
    assert (ledger.total_gas, ledger.height) == (gas, height)


# ---------------------------------------------------------------------------
# Admission
# ---------------------------------------------------------------------------

def test_bad_nonce_is_rejected_without_block(ledger, alice):
    tx = sign_transaction(alice, "notes", "put", ["a", 1], 3)
    with pytest.raises(BadNonce):
        ledger.submit(tx)
    assert ledger.height == 1
    assert ledger.total_gas == 0


def test_replayed_transaction_is_rejected(ledger, alice):
    tx = sign_transaction(alice, "notes", "put", ["a", 1], 0)
    ledger.submit(tx)
    with pytest.raises(BadNonce):
        ledger.submit(tx)


def test_altered_payload_fails_signature(ledger, alice):
    tx = sign_transaction(alice, "notes", "put", ["a", 1], 0)
    with pytest.raises(BadSignature):
        ledger.submit(replace(tx, payload=encode_args("a", 2)))


def test_foreign_sender_fails_signature(ledger, alice):
    mallory = create_account(b"mallory")
    tx = sign_transaction(mallory, "notes", "put", ["a", 1], 0)
    with pytest.raises(BadSignature):
        ledger.submit(replace(tx, sender=alice.address))


def test_unknown_contract(ledger, alice):
    with pytest.raises(UnknownContract):
        ledger.call(alice, "missing", "put", "a", 1)
    with pytest.raises(UnknownContract):
        ledger.deploy(NotesContract())


def test_seeded_accounts_are_stable():
    first, second = create_account(b"seed"), create_account(b"seed")
    assert first.address == second.address
    assert first.address.startswith("0x") and len(first.address) == 42
    assert create_account().address != create_account().address


def test_concurrent_submissions_are_serialized(ledger):
    accounts = [create_account(f"writer-{i}".encode()) for i in range(4)]

    def work(account):
        for n in range(10):
            ledger.call(account, "notes", "put", f"{account.address}/{n}", n)

    threads = [threading.Thread(target=work, args=(a,)) for a in accounts]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert ledger.height == 41
    assert all(ledger.next_nonce(a.address) == 10 for a in accounts)
    assert verify_chain(ledger)


# ---------------------------------------------------------------------------
# Chain integrity, export and replay
# ---------------------------------------------------------------------------

def _populate(ledger, account, count=12):
    for n in range(count):
        if n % 4:
            ledger.call(account, "notes", "put", f"k{n}", n)
        else:
            ledger.call(account, "notes", "refuse", f"k{n}")


def test_block_links(ledger, alice):
    _populate(ledger, alice)
    blocks = ledger.blocks
    assert all(b.previous_hash == a.block_hash for a, b in zip(blocks, blocks[1:]))
    assert all(len(b.transactions) == 1 for b in blocks[1:])
    assert ledger.verify_chain()


def test_payload_bit_flips_break_verification(ledger, alice):
    _populate(ledger, alice)
    rng = random.Random(3)
    for _ in range(100):
        index = rng.randrange(1, ledger.height)
        original = ledger._blocks[index]
        tx = original.transactions[0]
        payload = bytearray(tx.payload)
        payload[rng.randrange(len(payload))] ^= 1 << rng.randrange(8)
        ledger._blocks[index] = replace(original, transactions=(replace(tx, payload=bytes(payload)),))
        try:
            assert not verify_chain(ledger)
        finally:
            ledger._blocks[index] = original
    assert verify_chain(ledger)


def test_replay_reproduces_hashes_and_gas(ledger, alice, tmp_path):
    _populate(ledger, alice)
    path = ledger.export_chain(tmp_path / "chain.ndjson")
    replayed = replay_chain(load_chain_records(path), [NotesContract])
    assert [b.block_hash for b in replayed.blocks] == [b.block_hash for b in ledger.blocks]
    assert replayed.total_gas == ledger.total_gas
    assert [r.status for r in replayed.receipts] == [r.status for r in ledger.receipts]
    assert replayed.state_digest() == ledger.state_digest()


def test_replay_rejects_tampered_export(ledger, alice, tmp_path):
    _populate(ledger, alice, 3)
    records = load_chain_records(ledger.export_chain(tmp_path / "chain.ndjson"))
    tx = records[2]["transactions"][0]
    tx["payload"] = tx["payload"][:-2] + ("00" if tx["payload"][-2:] != "00" else "01")
    with pytest.raises(BadSignature):
        replay_chain(records, [NotesContract])


def test_receipts_csv(ledger, alice, tmp_path):
    _populate(ledger, alice, 4)
    lines = ledger.export_receipts_csv(tmp_path / "receipts.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "tx_hash,function,gas_used,status"
    assert len(lines) == 5
    assert lines[1].endswith("REVERTED(Refused)")


# ---------------------------------------------------------------------------
# Argument codec
# ---------------------------------------------------------------------------

def test_codec_handles_nested_values():
    args = ["PID476948", 3, True, None, b"\x00\xff", {"b": [1, "x"], "a": {"c": False}}]
    assert decode_args(encode_args(*args)) == args


def test_map_encoding_is_canonical():
    assert encode_args({"b": 1, "a": 2}) == encode_args({"a": 2, "b": 1})


@pytest.mark.parametrize("payload", [
    b"",
    b"\x02\x06\x00\x00\x00\x00",
    encode_args(1) + b"\x00",
    b"\x01\x09",
    # map keyed by a list
    b"\x01\x06\x01\x00\x00\x00\x07\x01\x00\x00\x00\x06\x00\x00\x00\x00\x00",
])
def test_malformed_payloads(payload):
    with pytest.raises(MalformedArguments):
        decode_args(payload)


@pytest.mark.parametrize("value", [2 ** 63, object(), {1: "x"}])
def test_unencodable_values(value):
    with pytest.raises(MalformedArguments):
        encode_args(value)
