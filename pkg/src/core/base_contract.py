import importlib
import inspect
import hashlib
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

from src.core.abi import encode_value
from src.core.errors import MalformedArguments, UnknownFunction

# Setup logger for base_contract module
logger = logging.getLogger(__name__)

_MISSING = object()


@dataclass(frozen=True)
class GasSchedule:
    """Cost constants of the metering model"""
    base: int = 21000
    calldata_byte: int = 16
    fresh_slot: int = 20000
    overwrite_slot: int = 5000
    slot_size: int = 32

    @classmethod
    def from_overrides(cls, overrides: Optional[Dict[str, int]] = None) -> "GasSchedule":
        return cls(**(overrides or {}))


class GasMeter:
    """Accumulates the gas of one transaction, shared by nested calls"""

    def __init__(self, schedule: GasSchedule):
        self.schedule = schedule
        self.used = 0
        self.fresh_slots = 0
        self.overwritten_slots = 0

    def charge(self, amount: int, reason: str) -> None:
        self.used += amount
        logger.debug(f"Gas +{amount} ({reason}), total {self.used}")

    def charge_storage(self, fresh: int, overwritten: int) -> None:
        self.fresh_slots += fresh
        self.overwritten_slots += overwritten
        self.used += fresh * self.schedule.fresh_slot + overwritten * self.schedule.overwrite_slot


def storage_size(value: Any) -> int:
    """Byte footprint of a stored value; scalars occupy one slot"""
    if value is None or isinstance(value, (bool, int)):
        return 32
    if isinstance(value, (bytes, bytearray)):
        return len(value)
    if isinstance(value, str):
        return len(value.encode("utf-8"))
    return len(encode_value(value))


class ContractStorage:
    """Key/value slots of one contract with a rollback journal"""

    def __init__(self, schedule_slot_size: int = 32):
        self._slots: Dict[str, Any] = {}
        self._journal: Optional[List[Tuple[str, Any]]] = None
        self._slot_size = schedule_slot_size

    def slot_count(self, value: Any) -> int:
        return max(1, math.ceil(storage_size(value) / self._slot_size))

    def write(self, key: str, value: Any, meter: GasMeter) -> None:
        new_slots = self.slot_count(value)
        previous = self._slots.get(key, _MISSING)
        if previous is _MISSING:
            fresh, overwritten = new_slots, 0
        else:
            old_slots = self.slot_count(previous)
            overwritten = min(old_slots, new_slots)
            fresh = max(0, new_slots - old_slots)
        meter.charge_storage(fresh, overwritten)
        if self._journal is not None:
            self._journal.append((key, previous))
        self._slots[key] = value

    def read(self, key: str, default: Any = None) -> Any:
        return self._slots.get(key, default)

    def __contains__(self, key: str) -> bool:
        return key in self._slots

    def keys_with_prefix(self, prefix: str) -> Iterator[str]:
        return (k for k in self._slots if k.startswith(prefix))

    def begin(self) -> None:
        self._journal = []

    def commit(self) -> None:
        self._journal = None

    def rollback(self) -> None:
        if self._journal is None:
            return
        for key, previous in reversed(self._journal):
            if previous is _MISSING:
                self._slots.pop(key, None)
            else:
                self._slots[key] = previous
        self._journal = None

    def digest(self) -> str:
        return hashlib.sha256(encode_value(dict(self._slots))).hexdigest()

    def __len__(self) -> int:
        return len(self._slots)


@dataclass
class CallContext:
    """Execution context of a contract call inside one transaction"""
    origin: str
    caller: str
    block_number: int
    meter: GasMeter
    host: Any = field(default=None, repr=False)
    callee: str = ""

    def call(self, contract_id: str, function: str, *args) -> Any:
        """Direct, same-transaction call into another deployed contract"""
        target = self.host.contract(contract_id)
        nested = CallContext(self.origin, self.callee, self.block_number, self.meter, self.host, contract_id)
        logger.debug(f"Cross-contract call {self.callee} -> {contract_id}.{function}")
        return target.invoke(nested, function, list(args))


class BaseContract(ABC):
    """Abstract base class for all host-native contracts"""

    def __init__(self, schedule: Optional[GasSchedule] = None):
        self._logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.schedule = schedule or GasSchedule()
        self.storage = ContractStorage(self.schedule.slot_size)
        self._logger.info(f"Initializing contract: {self.__class__.__name__}")

    @abstractmethod
    def get_name(self) -> str:
        """Return the contract id this contract is deployed under (e.g., 'process')"""
        pass

    @abstractmethod
    def get_write_functions(self) -> Dict[str, Callable]:
        """Return state-changing handlers by function name; each takes (ctx, *args)"""
        pass

    @abstractmethod
    def get_read_functions(self) -> Dict[str, Callable]:
        """Return read-only views by function name; each takes (*args)"""
        pass

    def invoke(self, ctx: CallContext, function: str, args: list) -> Any:
        handler = self.get_write_functions().get(function)
        if handler is None:
            raise UnknownFunction(f"{self.get_name()} has no function '{function}'")
        self._bind(handler, function, ctx, *args)
        self._log_call(ctx, function)
        return handler(ctx, *args)

    def query(self, function: str, args: list) -> Any:
        handler = self.get_read_functions().get(function)
        if handler is None:
            raise UnknownFunction(f"{self.get_name()} has no view '{function}'")
        self._bind(handler, function, *args)
        return handler(*args)

    def _bind(self, handler: Callable, function: str, *args) -> None:
        try:
            inspect.signature(handler).bind(*args)
        except TypeError as e:
            raise MalformedArguments(f"{function}: {e}") from None

    def _write(self, ctx: CallContext, key: str, value: Any) -> None:
        self.storage.write(key, value, ctx.meter)

    def _read(self, key: str, default: Any = None) -> Any:
        return self.storage.read(key, default)

    def _log_call(self, ctx: CallContext, function: str):
        """Helper method to log an invocation"""
        self._logger.debug(f"{function} called by {ctx.caller} (origin {ctx.origin}) in block {ctx.block_number}")


class ContractRegistry:
    """Registry for loading and managing contracts from the contracts directory"""

    def __init__(self, contracts_dir: Optional[Path] = None):
        self.contracts: Dict[str, type] = {}
        self.contracts_dir = contracts_dir or Path(__file__).parent.parent.parent / "contracts"
        self.load_contracts()

    def load_contracts(self):
        """Load all available contracts from the contracts directory"""
        logger.info(f"Loading contracts from {self.contracts_dir}")

        if not self.contracts_dir.exists():
            logger.error(f"Contracts directory not found: {self.contracts_dir}")
            return

        for contract_file in sorted(self.contracts_dir.glob("*_contract.py")):
            if contract_file.name.startswith("__"):
                continue

            module_name = f"contracts.{contract_file.stem}"
            logger.debug(f"Importing contract module: {module_name}")

            try:
                module = importlib.import_module(module_name)
            except Exception as e:
                logger.error(f"Failed to load contract from {contract_file}: {e}")
                continue

            for name, obj in inspect.getmembers(module, inspect.isclass):
                if issubclass(obj, BaseContract) and obj is not BaseContract and not inspect.isabstract(obj):
                    try:
                        contract_name = obj().get_name()
                        self.contracts[contract_name] = obj
                        logger.info(f"Loaded contract: {contract_name}")
                    except Exception as e:
                        logger.error(f"Failed to instantiate contract {name}: {e}")

        logger.info(f"Successfully loaded {len(self.contracts)} contracts")

    def get_contract_names(self) -> List[str]:
        return sorted(self.contracts)

    def get_contract(self, name: str) -> Optional[type]:
        return self.contracts.get(name)
