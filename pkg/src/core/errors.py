"""
Exception hierarchy for CLOAK

Every failure the library raises derives from CloakError so the CLI can
render it as a machine-readable error. Names follow the operation contracts
they belong to.
"""

from typing import Optional


class CloakError(Exception):
    """Base class for all CLOAK errors"""

    def to_dict(self) -> dict:
        return {"error": self.__class__.__name__, "message": str(self)}


class ConfigurationError(CloakError):
    pass


# --- choreography models -------------------------------------------------

class ModelSyntaxError(CloakError):
    """Malformed model document"""


class ValidationError(CloakError):
    """Structurally invalid model; carries the offending element id"""

    def __init__(self, message: str, element_id: Optional[str] = None):
        super().__init__(f"{message} (element: {element_id})" if element_id else message)
        self.element_id = element_id

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["element_id"] = self.element_id
        return data


# --- policies --------------------------------------------------------------

class PolicySyntaxError(CloakError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["position"] = self.position
        return data


class InvalidInstanceId(CloakError):
    pass


class PlaceholderPresent(CloakError):
    pass


# --- attribute-based encryption -----------------------------------------

class PartitionConflict(CloakError):
    pass


class UnmanagedAttribute(CloakError):
    pass


class PolicyNotSatisfied(CloakError):
    pass


class IntegrityFailure(CloakError):
    pass


class MalformedCiphertext(IntegrityFailure):
    pass


# --- ledger ----------------------------------------------------------------

class TransactionRejected(CloakError):
    """Rejected before inclusion; no gas charged"""


class BadSignature(TransactionRejected):
    pass


class BadNonce(TransactionRejected):
    pass


class UnknownContract(TransactionRejected):
    pass


class UnknownFunction(CloakError):
    pass


class ContractRevert(CloakError):
    """Raised inside contract handlers; turned into a REVERTED receipt"""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class MalformedArguments(CloakError):
    pass


# --- contract queries ----------------------------------------------------

class QueryError(CloakError):
    pass


class UnknownSpec(QueryError):
    pass


class UnknownInstance(QueryError):
    pass


class UnknownVariable(QueryError):
    pass


class UnknownElement(QueryError):
    pass


# --- content store -------------------------------------------------------

class StorageFailure(CloakError):
    pass


class NotFound(CloakError):
    pass


class TamperDetected(CloakError):
    pass


# --- engine ----------------------------------------------------------------

class MissingAttestation(CloakError):
    pass


class RoleUncovered(CloakError):
    pass


class KickstarterNotRegistered(CloakError):
    pass


class PolicyRejected(CloakError):
    pass


class UngrantedAttribute(CloakError):
    pass


class ClientSideRejection(CloakError):
    """Request refused by the interface before any transaction is built"""


class TransactionReverted(CloakError):
    def __init__(self, reason: str, receipt=None):
        super().__init__(reason)
        self.reason = reason
        self.receipt = receipt

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["reason"] = self.reason
        return data


# --- bench -----------------------------------------------------------------

class BenchConfigError(CloakError):
    pass


class ScenarioAborted(CloakError):
    def __init__(self, step_index: int, reason: str):
        super().__init__(f"scenario aborted at step {step_index}: {reason}")
        self.step_index = step_index
        self.reason = reason

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["step"] = self.step_index
        data["reason"] = self.reason
        return data
