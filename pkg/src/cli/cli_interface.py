"""
CLI Interface Module for CLOAK

Subcommands for configure, instantiate, transact, inspect, key generation,
benches, export and chain verification. State persists in a workspace
directory between invocations; every invocation replays the stored chain.
"""

import argparse
import logging
import re
import secrets
import sys
from pathlib import Path
from typing import Dict, List, Optional

import orjson

from src.bench import scaling
from src.core.abe import AbKey
from src.core.base_contract import GasSchedule
from src.core.choreography import parse_model
from src.core.content_store import ContentStore
from src.core.engine import Engine, contract_factories
from src.core.errors import (
    BenchConfigError, CloakError, ConfigurationError, TamperDetected, TransactionReverted, UnknownSpec,
)
from src.core.ledger import Account, create_account, load_chain_records, replay_chain
from src.utils.config import default_settings, load_settings
from src.utils.file_operations import (
    atomic_write_bytes, log_report_hash, sanitize_filename, validate_file_path, validate_folder_path,
)

logger = logging.getLogger(__name__)

DEFAULT_MODEL = Path(__file__).parent.parent.parent / "fixtures" / "models" / "xray.json"
BENCH_KINDS = ("participants", "size", "payload", "gateways")
_INT_RE = re.compile(r"^-?[0-9]+$")


class Workspace:
    """chain.ndjson, store/, actors.json, keys/ and workspace.json under one root"""

    def __init__(self, root, config_path: Optional[str] = None):
        is_valid, result = validate_folder_path(str(root), create=True)
        if not is_valid:
            raise ConfigurationError(f"Unusable workspace {root}: {result}")
        self.root = Path(result)
        self.chain_path = self.root / "chain.ndjson"
        self.actors_path = self.root / "actors.json"
        self.meta_path = self.root / "workspace.json"
        self.keys_dir = self.root / "keys"

        if config_path:
            settings = load_settings(config_path)
        elif (self.root / "config.json").exists():
            settings = load_settings(self.root / "config.json")
        else:
            settings = default_settings()

        meta = self._read_json(self.meta_path) or {}
        if "authority_seed" not in meta:
            meta["authority_seed"] = secrets.randbits(62)
            atomic_write_bytes(self.meta_path, orjson.dumps(meta, option=orjson.OPT_INDENT_2))
            logger.info(f"Initialized workspace {self.root}")
        seed = settings.deterministic_seed if settings.deterministic_seed is not None else meta["authority_seed"]
        self.settings = settings.with_overrides(store_root=str(self.root / "store"), deterministic_seed=seed)
        self.store = ContentStore(self.settings.store_root)

    @staticmethod
    def _read_json(path: Path):
        if not path.exists():
            return None
        try:
            return orjson.loads(path.read_bytes())
        except orjson.JSONDecodeError as e:
            raise ConfigurationError(f"Corrupt workspace file {path}: {e}") from None

    # --- engine ------------------------------------------------------------

    def load_engine(self) -> Engine:
        if not self.chain_path.exists():
            return Engine(self.settings, self.store)
        records = load_chain_records(self.chain_path)
        ledger = replay_chain(records, contract_factories(self.settings),
                              GasSchedule.from_overrides(self.settings.gas))
        for record, block in zip(records, ledger.blocks):
            if record.get("hash") != block.block_hash.hex():
                raise TamperDetected(f"Stored chain diverges from replay at block {block.block_number}")
        if len(records) != ledger.height:
            raise TamperDetected(f"Stored chain lists {len(records)} blocks, replay produced {ledger.height}")
        return Engine.rebuild_from_ledger(ledger, self.store, self.settings)

    def save(self, engine: Engine) -> None:
        data = b"".join(orjson.dumps(r) + b"\n" for r in engine.ledger.iter_export_records())
        atomic_write_bytes(self.chain_path, data)
        logger.debug(f"Workspace chain saved: {engine.ledger.height} blocks")

    # --- actors ------------------------------------------------------------

    def actor(self, name: str) -> Account:
        """Account of a named actor, created on first use"""
        actors: Dict[str, dict] = self._read_json(self.actors_path) or {}
        entry = actors.get(name)
        if entry is None:
            entry = {"seed": secrets.token_bytes(32).hex()}
            actors[name] = entry
            atomic_write_bytes(self.actors_path, orjson.dumps(actors, option=orjson.OPT_INDENT_2))
            logger.info(f"Created actor '{name}'")
        account = create_account(bytes.fromhex(entry["seed"]))
        if entry.get("address") != account.address:
            entry["address"] = account.address
            actors[name] = entry
            atomic_write_bytes(self.actors_path, orjson.dumps(actors, option=orjson.OPT_INDENT_2))
        return account


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _emit(data) -> None:
    sys.stdout.write(orjson.dumps(data, option=orjson.OPT_INDENT_2 | orjson.OPT_NON_STR_KEYS).decode("utf-8"))
    sys.stdout.write("\n")


def _read_input(path: str, extensions: Optional[List[str]] = None) -> bytes:
    is_valid, result = validate_file_path(path, extensions)
    if not is_valid:
        raise ConfigurationError(f"{path}: {result}")
    return Path(result).read_bytes()


def parse_var(text: str):
    """`name=value` with true/false and integers typed"""
    if "=" not in text:
        raise ConfigurationError(f"Variable assignment must be name=value, got {text!r}")
    name, raw = text.split("=", 1)
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return name, lowered == "true"
    if _INT_RE.match(raw):
        return name, int(raw)
    return name, raw


def _split_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [item.strip() for item in text.split(",") if item.strip()]


def _receipt_or_raise(receipt):
    if not receipt.succeeded:
        raise TransactionReverted(receipt.reason, receipt)
    return receipt.to_dict()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_configure(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    owner = ws.actor(args.as_actor)
    document = _read_input(args.model, [".json"])
    review = None
    if args.policies:
        revised = orjson.loads(_read_input(args.policies, [".json"]))
        review = lambda generated: revised
    deployment = engine.configure(document, owner, _split_list(args.auditors), review)
    ws.save(engine)
    _emit({
        "spec_id": deployment.spec_id,
        "model_id": deployment.model.model_id,
        "policy_locator": str(deployment.policy_locator),
        "policies": deployment.policy_strings(),
        "receipt": deployment.receipt.to_dict(),
    })
    return 0


def cmd_instantiate(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    deployment = engine.deployments.get(int(args.deployment))
    if deployment is None:
        raise UnknownSpec(f"Unknown deployment: {args.deployment}")
    bindings: Dict[str, str] = orjson.loads(_read_input(args.bindings, [".json"]))
    kickstarter_name = args.kickstarter or next(iter(bindings.values()))

    pid = engine.next_instance_id()
    registrations = []
    for role, actor_name in sorted(bindings.items()):
        account = ws.actor(actor_name)
        attestation = engine.certify(account.address, role, pid)
        registrations.append(engine.register_participant(account, role, attestation))
    pid = engine.instantiate(deployment, registrations, ws.actor(kickstarter_name))
    ws.save(engine)
    _emit({"instance_id": pid, "bindings": {r.role: r.address for r in registrations}})
    return 0


def cmd_register_auditor(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    account = ws.actor(args.as_actor)
    receipt = engine.register_auditor(account, engine.certify(account.address, args.role))
    ws.save(engine)
    _emit({"auditor": account.address, "role": args.role.upper(), "receipt": receipt.to_dict()})
    return 0


def cmd_transact(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    sender = ws.actor(args.as_actor)
    variables = dict(parse_var(v) for v in args.var or [])
    if args.confidential:
        payload = _read_input(args.confidential)
        content_id, receipt = engine.transact_confidential(args.instance, args.message, sender, payload, variables)
        ws.save(engine)
        result = {"content_id": str(content_id), "receipt": _receipt_or_raise(receipt)}
    else:
        receipt = engine.transact_public(args.instance, args.message, sender, variables)
        ws.save(engine)
        result = {"receipt": _receipt_or_raise(receipt)}
    _emit(result)
    return 0


def cmd_inspect(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    if args.key:
        key = AbKey.from_dict(orjson.loads(_read_input(args.key, [".json"])))
        plaintext = engine.inspect_confidential(key, args.instance, args.target)
        if args.out:
            atomic_write_bytes(args.out, plaintext)
            _emit({"instance_id": args.instance, "target": args.target, "written": args.out,
                   "bytes": len(plaintext)})
        else:
            sys.stdout.buffer.write(plaintext)
            sys.stdout.flush()
        return 0
    value = engine.inspect_public(args.instance, args.target)
    _emit({"instance_id": args.instance, "target": args.target, "value": value})
    return 0


def cmd_keygen(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    account = ws.actor(args.as_actor)
    key = engine.request_key(account, _split_list(args.attrs) or ())
    ws.save(engine)
    ws.keys_dir.mkdir(parents=True, exist_ok=True)
    key_file = ws.keys_dir / f"{sanitize_filename(args.as_actor)}.json"
    atomic_write_bytes(key_file, orjson.dumps(key.to_dict(), option=orjson.OPT_INDENT_2))
    _emit({"key_file": str(key_file), "attributes": sorted(key.attributes)})
    return 0


def cmd_bench(args, ws: Workspace) -> int:
    model = parse_model(_read_input(args.model or str(DEFAULT_MODEL), [".json"]))
    values = [int(v) for v in _split_list(args.values)] if args.values else None
    out_dir = args.out or str(ws.root / "bench")
    store_root = Path(out_dir) / "store"
    settings = ws.settings
    common = dict(settings=settings, store_root=store_root, progress=not args.no_progress)

    if args.kind == "participants":
        reports = scaling.bench_participants(model, values or range(2, len(model.message_elements) + 1), **common)
    elif args.kind == "size":
        reports = scaling.bench_model_size(model, values or range(1, 11), **common)
    elif args.kind == "payload":
        reports = scaling.bench_payload(model, values or scaling.DEFAULT_PAYLOAD_SIZES, **common)
    elif args.kind == "gateways":
        reports = scaling.bench_gateways(values or range(0, 6), **common)
    else:
        raise BenchConfigError(f"Unknown bench '{args.kind}'")

    written = scaling.export(reports, out_dir, label=args.kind)
    print(scaling.summary_table(reports), end="")
    _emit({"bench": args.kind, "files": [str(p) for p in written],
           "chains_verified": all(r.chain_verified for r in reports)})
    return 0


def cmd_export(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    is_valid, result = validate_folder_path(args.out, create=True)
    if not is_valid:
        raise ConfigurationError(f"{args.out}: {result}")
    out = Path(result)
    written = [engine.ledger.export_chain(out / "chain.ndjson"),
               engine.ledger.export_receipts_csv(out / "receipts.csv")]
    hashes = {str(p): log_report_hash(str(p), logger) for p in written}
    _emit({"files": hashes, "height": engine.ledger.height, "total_gas": engine.ledger.total_gas})
    return 0


def cmd_verify_chain(args, ws: Workspace) -> int:
    engine = ws.load_engine()
    valid = engine.ledger.verify_chain()
    if not valid:
        raise TamperDetected("Chain verification failed")
    _emit({"valid": True, "height": engine.ledger.height, "total_gas": engine.ledger.total_gas})
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloak",
        description="Choreography enactment on a ledger with attribute-based confidential payloads",
    )
    parser.add_argument("--workspace", default="workspace", help="Workspace directory (default: ./workspace)")
    parser.add_argument("--config", help="Engine configuration file (JSON)")
    parser.add_argument("--verbose", action="store_true", help="Log INFO messages to the console")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("configure", help="Register a choreography model and its policies")
    p.add_argument("model")
    p.add_argument("--auditors", help="Comma-separated auditor roles")
    p.add_argument("--policies", help="Revised policy bundle (JSON object: message id -> policy)")
    p.add_argument("--as", dest="as_actor", default="owner")
    p.set_defaults(handler=cmd_configure)

    p = sub.add_parser("instantiate", help="Create a process instance")
    p.add_argument("deployment", help="Spec id returned by configure")
    p.add_argument("--bindings", required=True, help="JSON object: role -> actor name")
    p.add_argument("--kickstarter", help="Actor submitting the instantiation")
    p.set_defaults(handler=cmd_instantiate)

    p = sub.add_parser("register-auditor", help="Register an actor under a global auditor role")
    p.add_argument("--as", dest="as_actor", required=True)
    p.add_argument("--role", required=True)
    p.set_defaults(handler=cmd_register_auditor)

    p = sub.add_parser("transact", help="Complete a message element")
    p.add_argument("instance")
    p.add_argument("message")
    p.add_argument("--as", dest="as_actor", required=True)
    p.add_argument("--confidential", metavar="PAYLOAD_FILE")
    p.add_argument("--var", action="append", metavar="NAME=VALUE")
    p.set_defaults(handler=cmd_transact)

    p = sub.add_parser("inspect", help="Read public state, or decrypt a confidential payload with --key")
    p.add_argument("instance")
    p.add_argument("target")
    p.add_argument("--key", metavar="KEY_FILE")
    p.add_argument("--out", help="Write the plaintext to a file instead of stdout")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("keygen", help="Request an a-b key for an actor")
    p.add_argument("--as", dest="as_actor", required=True)
    p.add_argument("--attrs", help="Comma-separated attributes to request (default: all granted)")
    p.set_defaults(handler=cmd_keygen)

    p = sub.add_parser("bench", help="Run a scaling benchmark")
    p.add_argument("kind", choices=BENCH_KINDS)
    p.add_argument("--model", help="Model document (default: X-ray fixture)")
    p.add_argument("--values", help="Comma-separated configuration values")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--no-progress", action="store_true")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("export", help="Export the chain and receipts")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("verify-chain", help="Replay and verify the stored chain")
    p.set_defaults(handler=cmd_verify_chain)
    return parser


def run_cli(argv=None) -> int:
    """Parse arguments and run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    logger.info(f"Running command '{args.command}' in workspace {args.workspace}")
    try:
        ws = Workspace(args.workspace, args.config)
        return args.handler(args, ws)
    except CloakError as e:
        logger.error(f"Command '{args.command}' failed: {e.__class__.__name__}: {e}")
        sys.stderr.write(orjson.dumps(e.to_dict()).decode("utf-8") + "\n")
        return 2
    except Exception as e:
        logger.critical(f"Unexpected error in '{args.command}': {e}", exc_info=True)
        sys.stderr.write(orjson.dumps({"error": "InternalError", "message": str(e)}).decode("utf-8") + "\n")
        return 1
