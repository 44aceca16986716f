"""
Engine Module for CLOAK

The Process Interface and Confidentiality Interface: orchestrates configure,
instantiate, transact and inspect over the ledger, the two contracts, the
content store and attribute-based encryption. Every chain write is signed
by the acting user's own account.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import orjson

from contracts.confidentiality_contract import ConfidentialityContract
from contracts.process_contract import ProcessContract
from src.core import abe
from src.core.abi import decode_args
from src.core.attestation import GLOBAL_SCOPE, Attestation, issue_attestation
from src.core.base_contract import GasSchedule
from src.core.choreography import ChoreographyModel, parse_model, serialize_model
from src.core.content_store import ContentId, ContentStore
from src.core.errors import (
    ClientSideRejection, KickstarterNotRegistered, MissingAttestation, PolicyRejected, RoleUncovered,
    TamperDetected, TransactionReverted, UngrantedAttribute, UnknownInstance, UnknownVariable,
)
from src.core.ledger import Account, GasReceipt, Ledger, create_account
from src.core.policy import (
    PLACEHOLDER, AttributeSet, PolicyAst, generate_policies, instantiate_policy, leaves, parse_policy, print_policy,
)
from src.utils.config import EngineSettings, default_settings

logger = logging.getLogger(__name__)

PROCESS = "process"
CONFIDENTIALITY = "confidentiality"

PolicyReview = Callable[[Dict[str, str]], Optional[Dict[str, str]]]


@dataclass
class ParticipantRegistration:
    address: str
    role: str
    attestation: Attestation
    attribute_grant: AttributeSet = field(default_factory=AttributeSet)


@dataclass(frozen=True)
class ProcessDeployment:
    spec_id: int
    model: ChoreographyModel
    policy_map: Dict[str, PolicyAst]
    policy_locator: ContentId
    receipt: Optional[GasReceipt] = None

    def policy_strings(self) -> Dict[str, str]:
        return {mid: print_policy(p) for mid, p in sorted(self.policy_map.items())}


def encode_policy_bundle(model_id: str, policies: Dict[str, str]) -> bytes:
    return orjson.dumps({"model_id": model_id, "policies": policies}, option=orjson.OPT_SORT_KEYS)


def decode_policy_bundle(data: bytes) -> Dict[str, PolicyAst]:
    bundle = orjson.loads(data)
    return {mid: parse_policy(text) for mid, text in bundle["policies"].items()}


def trusted_certifier_keys(settings: EngineSettings) -> List[bytes]:
    keys = list(settings.certifier_keys)
    if settings.certifier_seed:
        keys.append(create_account(settings.certifier_seed.encode("utf-8")).public_key)
    return keys


def contract_factories(settings: EngineSettings) -> List[Callable]:
    """Constructors of the deployed contracts, in deployment order"""
    schedule = GasSchedule.from_overrides(settings.gas)
    certifiers = trusted_certifier_keys(settings)
    return [
        lambda: ProcessContract(schedule, certifiers, settings.instance_seed, CONFIDENTIALITY),
        lambda: ConfidentialityContract(schedule, certifiers, PROCESS),
    ]


def build_ledger(settings: EngineSettings) -> Ledger:
    ledger = Ledger(GasSchedule.from_overrides(settings.gas))
    for factory in contract_factories(settings):
        ledger.deploy(factory())
    return ledger


def initial_authorities(settings: EngineSettings) -> List[abe.AuthorityConfig]:
    n = settings.authority_count
    partition = abe.partition_from_mapping(settings.partition, n)
    if not any(abe.PID_PATTERN in bucket for bucket in partition):
        partition[0] = partition[0] | {abe.PID_PATTERN}
    return abe.setup_authorities(n, partition, seed=settings.deterministic_seed)


class Engine:
    """Process Interface and Confidentiality Interface over one ledger"""

    def __init__(self, settings: Optional[EngineSettings] = None, store: Optional[ContentStore] = None,
                 ledger: Optional[Ledger] = None, authorities: Optional[Sequence[abe.AuthorityConfig]] = None):
        self._logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.settings = settings or default_settings()
        self.store = store or ContentStore(self.settings.store_root)
        self.ledger = ledger or build_ledger(self.settings)
        self.authorities: List[abe.AuthorityConfig] = list(authorities or initial_authorities(self.settings))
        self.trusted_certifiers = frozenset(trusted_certifier_keys(self.settings))
        self.default_certifier = (create_account(self.settings.certifier_seed.encode("utf-8"))
                                  if self.settings.certifier_seed else None)

        self.deployments: Dict[int, ProcessDeployment] = {}
        self._instance_spec: Dict[str, int] = {}
        self._grants: Dict[str, set] = {}
        self._grant_versions: Dict[str, int] = {}
        self._key_cache: Dict[str, Tuple[int, abe.AbKey]] = {}
        self._round_robin = 0

        self._state_lock = threading.RLock()
        self._create_lock = threading.Lock()
        self._instance_locks: Dict[str, threading.Lock] = {}
        self._logger.info(f"Engine ready: {len(self.authorities)} authorities, "
                          f"{len(self.trusted_certifiers)} trusted certifier(s)")

    # --- helpers -----------------------------------------------------------

    def _instance_lock(self, pid: str) -> threading.Lock:
        with self._state_lock:
            return self._instance_locks.setdefault(pid, threading.Lock())

    def _ensure_managed(self, attributes: Iterable[str]) -> None:
        """Assign attributes no authority manages yet: configured index, else round-robin"""
        with self._state_lock:
            n = len(self.authorities)
            for attribute in sorted({a.upper() for a in attributes} - {PLACEHOLDER}):
                if any(auth.manages(attribute) for auth in self.authorities):
                    continue
                index = self.settings.partition.get(attribute)
                if index is None:
                    index = self._round_robin % n
                    self._round_robin += 1
                auth = self.authorities[index]
                self.authorities[index] = replace(auth, managed_attributes=auth.managed_attributes | {attribute})
                self._logger.debug(f"Attribute {attribute} assigned to {auth.authority_id}")

    def _grant(self, address: str, attributes: Iterable[str]) -> None:
        with self._state_lock:
            held = self._grants.setdefault(address, set())
            new = {a.upper() for a in attributes} - held
            if new:
                held.update(new)
                self._grant_versions[address] = self._grant_versions.get(address, 0) + 1

    def grants_of(self, address: str) -> AttributeSet:
        with self._state_lock:
            return AttributeSet(self._grants.get(address, ()))

    def _deployment_for(self, pid: str) -> ProcessDeployment:
        spec_id = self._instance_spec.get(pid)
        if spec_id is None:
            spec_id = self.ledger.query(PROCESS, "getInstance", pid)["spec_id"]
        return self.deployments[spec_id]

    def _known_deployment(self, pid: str) -> Optional[ProcessDeployment]:
        """Deployment of pid, or None when the ledger should judge the call"""
        try:
            return self._deployment_for(pid)
        except (UnknownInstance, KeyError):
            return None

    @staticmethod
    def _require_success(receipt: GasReceipt) -> GasReceipt:
        if not receipt.succeeded:
            raise TransactionReverted(receipt.reason, receipt)
        return receipt

    def certify(self, subject: str, role: str, scope: str = GLOBAL_SCOPE) -> Attestation:
        """Attestation from the configured default certifier"""
        if self.default_certifier is None:
            raise MissingAttestation("No default certifier configured")
        return issue_attestation(self.default_certifier, subject, role, scope)

    # --- configure ---------------------------------------------------------

    def configure(self, model_doc: Union[bytes, str], owner: Account,
                  auditor_roles: Optional[Sequence[str]] = None,
                  review: Optional[PolicyReview] = None) -> ProcessDeployment:
        model = parse_model(model_doc)
        auditors = [r.upper() for r in (self.settings.auditor_roles if auditor_roles is None else auditor_roles)]
        generated = {mid: print_policy(p) for mid, p in generate_policies(model, auditors).items()}

        confirmed = dict(generated)
        if review is not None:
            revised = review(dict(generated))
            if not revised:
                raise PolicyRejected(f"Owner declined the policies of '{model.model_id}'")
            if set(revised) != set(generated):
                raise PolicyRejected("Revised bundle must cover exactly the confidential messages")
            confirmed = {mid: print_policy(parse_policy(text)) for mid, text in revised.items()}

        policy_map = {mid: parse_policy(text) for mid, text in confirmed.items()}
        bundle = encode_policy_bundle(model.model_id, dict(sorted(confirmed.items())))
        locator = ContentId.for_bytes(bundle)

        receipt = self._require_success(self.ledger.call(
            owner, PROCESS, "registerSpec", serialize_model(model).decode("utf-8"), str(locator)))
        self.store.put(bundle)
        self._ensure_managed(set(model.roles) | {a for p in policy_map.values() for a in leaves(p)})
        deployment = ProcessDeployment(receipt.output, model, policy_map, locator, receipt)
        with self._state_lock:
            self.deployments[deployment.spec_id] = deployment
        self._logger.info(f"Configured '{model.model_id}' as spec {deployment.spec_id}: "
                          f"{len(policy_map)} policies, bundle {locator[:20]}...")
        return deployment

    # --- instantiate -------------------------------------------------------

    def next_instance_id(self) -> str:
        return self.ledger.query(PROCESS, "peekInstanceId")

    def register_participant(self, account: Account, role: str, attestation: Attestation) -> ParticipantRegistration:
        return ParticipantRegistration(account.address, role.upper(), attestation)

    def instantiate(self, deployment: ProcessDeployment, registrations: Sequence[ParticipantRegistration],
                    kickstarter: Account) -> str:
        model = deployment.model
        with self._create_lock:
            pid = self.next_instance_id()

            by_role: Dict[str, ParticipantRegistration] = {}
            for registration in registrations:
                if registration.role in by_role:
                    raise ClientSideRejection(f"Role {registration.role} registered twice")
                attestation = registration.attestation
                if (attestation is None or attestation.subject != registration.address
                        or attestation.claimed_role != registration.role
                        or attestation.instance_scope != pid
                        or not attestation.verify(self.trusted_certifiers)):
                    raise MissingAttestation(f"No valid attestation for {registration.address} "
                                             f"as {registration.role} in {pid}")
                by_role[registration.role] = registration

            for role in sorted(model.roles):
                if role not in by_role:
                    raise RoleUncovered(f"Role {role} has no registered participant")
            if kickstarter.address not in {r.address for r in registrations}:
                raise KickstarterNotRegistered(f"{kickstarter.address} is not a registered participant")

            bindings = {role: r.address for role, r in by_role.items()}
            attestations = {role: r.attestation.to_abi() for role, r in by_role.items()}
            receipt = self._require_success(self.ledger.call(
                kickstarter, PROCESS, "createInstance", deployment.spec_id, bindings, attestations,
                str(deployment.policy_locator)))
            pid = receipt.output

        self._ensure_managed([pid])
        for registration in by_role.values():
            self._grant(registration.address, [registration.role, pid])
            registration.attribute_grant = AttributeSet({registration.role, pid})
        with self._state_lock:
            self._instance_spec[pid] = deployment.spec_id
        self._logger.info(f"Instantiated {pid} from spec {deployment.spec_id} "
                          f"with {len(by_role)} participant(s)")
        return pid

    def register_auditor(self, account: Account, attestation: Attestation) -> GasReceipt:
        if (attestation.subject != account.address or attestation.instance_scope != GLOBAL_SCOPE
                or not attestation.verify(self.trusted_certifiers)):
            raise MissingAttestation(f"No valid global attestation for {account.address}")
        receipt = self._require_success(self.ledger.call(
            account, CONFIDENTIALITY, "registerAuditor", attestation.to_abi()))
        self._ensure_managed([attestation.claimed_role])
        self._grant(account.address, [attestation.claimed_role])
        self._logger.info(f"Auditor {account.address} registered as {attestation.claimed_role}")
        return receipt

    # --- transact ----------------------------------------------------------

    def _reject_confidential_names(self, model: ChoreographyModel, message_id: str, variables: Dict) -> None:
        if not model.has_element(message_id):
            return
        element = model.element(message_id)
        leaked = sorted(n for n in variables if (d := element.variable(n)) is not None and d.confidential)
        if leaked:
            raise ClientSideRejection(f"Confidential variable(s) in public data: {', '.join(leaked)}")

    def transact_public(self, pid: str, message_id: str, sender: Account, variables: Optional[Dict] = None) -> GasReceipt:
        variables = dict(variables or {})
        deployment = self._known_deployment(pid)
        if deployment is not None:
            self._reject_confidential_names(deployment.model, message_id, variables)
        with self._instance_lock(pid):
            receipt = self.ledger.call(sender, PROCESS, "updatePublicState", pid, message_id, variables)
        return receipt

    def transact_confidential(self, pid: str, message_id: str, sender: Account, payload: bytes,
                              public_vars: Optional[Dict] = None) -> Tuple[ContentId, GasReceipt]:
        public_vars = dict(public_vars or {})
        model = self._deployment_for(pid).model
        if not model.has_element(message_id):
            raise ClientSideRejection(f"Unknown message {message_id}")
        element = model.element(message_id)
        if not element.is_message or not element.confidential:
            raise ClientSideRejection(f"{message_id} is not a confidential message")
        self._reject_confidential_names(model, message_id, public_vars)

        with self._instance_lock(pid):
            locator = self.ledger.query(CONFIDENTIALITY, "getPolicyLocator", pid)
            policies = decode_policy_bundle(self.store.get(locator))
            policy = instantiate_policy(policies[message_id], pid)
            ciphertext = abe.encrypt(self.authorities, policy, payload).to_bytes()
            content_id = ContentId.for_bytes(ciphertext)
            receipt = self.ledger.call(sender, CONFIDENTIALITY, "recordConfidential",
                                       pid, message_id, str(content_id), content_id.digest, public_vars)
            if receipt.succeeded:
                self.store.put(ciphertext)
        return content_id, receipt

    # --- inspect -----------------------------------------------------------

    def request_key(self, user: Account, attributes: Iterable[str] = ()) -> abe.AbKey:
        requested = AttributeSet(attributes)
        with self._state_lock:
            granted = set(self._grants.get(user.address, ()))
            version = self._grant_versions.get(user.address, 0)
            cached = self._key_cache.get(user.address)
        ungranted = sorted(requested - granted)
        if ungranted:
            raise UngrantedAttribute(f"{user.address} holds no grant for {', '.join(ungranted)}")
        if cached and cached[0] == version:
            self._logger.debug(f"Reusing a-b key of {user.address} (grant version {version})")
            return cached[1]

        self._require_success(self.ledger.call(user, CONFIDENTIALITY, "logKeyRequest", sorted(requested or granted)))
        key = abe.keygen(self.authorities, user.address, granted)
        with self._state_lock:
            self._key_cache[user.address] = (version, key)
        self._logger.info(f"a-b key issued to {user.address} ({len(granted)} attribute(s))")
        return key

    def inspect_public(self, pid: str, what: str):
        model = self._deployment_for(pid).model
        if model.has_element(what):
            return self.ledger.query(PROCESS, "getElementState", pid, what)
        if what in model.public_variables:
            return self.ledger.query(PROCESS, "getPublicVariable", pid, what)
        raise UnknownVariable(f"{what} is neither an element nor a public variable of {pid}")

    def inspect_confidential(self, key: abe.AbKey, pid: str, message_id: str) -> bytes:
        record = self.ledger.query(CONFIDENTIALITY, "getRecord", pid, message_id)
        data = self.store.get(record["locator"])
        if hashlib.sha256(data).hexdigest() != record["payload_hash"]:
            raise TamperDetected(f"Payload of {pid}/{message_id} does not match its on-chain hash")
        return abe.decrypt(key, abe.AbeCiphertext.from_bytes(data))

    # --- recovery ----------------------------------------------------------

    @classmethod
    def rebuild_from_ledger(cls, ledger: Ledger, store: ContentStore, settings: Optional[EngineSettings] = None,
                            authorities: Optional[Sequence[abe.AuthorityConfig]] = None) -> "Engine":
        """Reconstruct deployments, instances and grants from sealed successful transactions"""
        engine = cls(settings, store, ledger, authorities)
        receipts = {r.block_number: r for r in ledger.receipts}
        for block in ledger.blocks:
            receipt = receipts.get(block.block_number)
            if receipt is None or not receipt.succeeded:
                continue
            for tx in block.transactions:
                engine._apply_sealed(tx.sender, tx.target_contract, tx.function_name,
                                     decode_args(tx.payload), receipt.output)
        engine._logger.info(f"Rebuilt engine state: {len(engine.deployments)} deployment(s), "
                            f"{len(engine._instance_spec)} instance(s)")
        return engine

    def _apply_sealed(self, sender: str, target: str, function: str, args: list, output) -> None:
        if target == PROCESS and function == "registerSpec":
            document, locator = args
            model = parse_model(document)
            policy_map = decode_policy_bundle(self.store.get(locator))
            self._ensure_managed(set(model.roles) | {a for p in policy_map.values() for a in leaves(p)})
            self.deployments[output] = ProcessDeployment(output, model, policy_map, ContentId(locator))
        elif target == PROCESS and function == "createInstance":
            spec_id, bindings = args[0], args[1]
            self._ensure_managed([output])
            for role, address in bindings.items():
                self._grant(address, [role, output])
            self._instance_spec[output] = spec_id
        elif target == CONFIDENTIALITY and function == "registerAuditor":
            role = args[0]["role"]
            self._ensure_managed([role])
            self._grant(sender, [role])
