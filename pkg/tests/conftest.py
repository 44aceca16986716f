"""
Shared fixtures: deterministic settings, fixture models, an engine on a
temporary content store, and a completed X-ray longest-path run.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict

import orjson
import pytest

from src.bench.scenario import plan_longest_path, run_scenario
from src.core.choreography import parse_model
from src.core.content_store import ContentStore
from src.core.engine import Engine, ProcessDeployment
from src.core.ledger import Account, create_account
from src.utils.config import default_settings

MODELS_DIR = Path(__file__).parent.parent / "fixtures" / "models"
INSPECTOR = "MINISTRY-INSPECTOR"


@dataclass
class LiveInstance:
    engine: Engine
    deployment: ProcessDeployment
    pid: str
    accounts: Dict[str, Account]

    def account(self, role: str) -> Account:
        return self.accounts[role]


def load_model_doc(name: str) -> bytes:
    return (MODELS_DIR / f"{name}.json").read_bytes()


@pytest.fixture(scope="session")
def settings():
    return default_settings().with_overrides(deterministic_seed=7)


@pytest.fixture(scope="session")
def model_doc() -> Callable[[str], bytes]:
    return load_model_doc


@pytest.fixture(scope="session")
def xray_doc() -> bytes:
    return load_model_doc("xray")


@pytest.fixture(scope="session")
def xray_dict(xray_doc) -> dict:
    return orjson.loads(xray_doc)


@pytest.fixture(scope="session")
def xray_model(xray_doc):
    return parse_model(xray_doc)


@pytest.fixture
def engine(settings, tmp_path):
    return Engine(settings, ContentStore(tmp_path / "store"))


@pytest.fixture
def enact() -> Callable[..., LiveInstance]:
    """Configure a model document and start one instance, one account per role"""

    def _enact(engine: Engine, document: bytes, auditors=(INSPECTOR,)) -> LiveInstance:
        model = parse_model(document)
        accounts = {role: create_account(f"test/{role}".encode("utf-8"))
                    for role in sorted(model.roles) + list(auditors)}
        owner = accounts[sorted(model.roles)[0]]
        deployment = engine.configure(document, owner, list(auditors))
        for role in auditors:
            engine.register_auditor(accounts[role], engine.certify(accounts[role].address, role))

        pid = engine.next_instance_id()
        registrations = [
            engine.register_participant(accounts[role], role, engine.certify(accounts[role].address, role, pid))
            for role in sorted(model.roles)
        ]
        pid = engine.instantiate(deployment, registrations, owner)
        return LiveInstance(engine, deployment, pid, accounts)

    return _enact


@pytest.fixture
def xray_instance(engine, enact, xray_doc) -> LiveInstance:
    return enact(engine, xray_doc)


@pytest.fixture(scope="module")
def xray_run(settings, xray_model, tmp_path_factory):
    script = plan_longest_path(xray_model)
    return run_scenario(script, settings, str(tmp_path_factory.mktemp("xray_store")))
