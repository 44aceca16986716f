"""
Engine configuration for CLOAK

Settings are read from a JSON file; every key is optional and falls back to
the in-code default.
"""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import orjson

from src.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

SUPPORTED_AEADS = ("AES-256-GCM",)
SUPPORTED_KDF_HASHES = ("SHA-256",)
GAS_KEYS = ("base", "calldata_byte", "fresh_slot", "overwrite_slot")


@dataclass(frozen=True)
class EngineSettings:
    certifiers: List[str] = field(default_factory=list)
    certifier_seed: Optional[str] = "cloak-certifier"
    authority_count: int = 4
    partition: Dict[str, int] = field(default_factory=dict)
    gas: Dict[str, int] = field(default_factory=dict)
    store_root: str = "store"
    deterministic_seed: Optional[int] = None
    instance_seed: int = 476948
    auditor_roles: List[str] = field(default_factory=lambda: ["MINISTRY-INSPECTOR"])
    payload_size: int = 1024
    aead: str = "AES-256-GCM"
    kdf_hash: str = "SHA-256"

    def with_overrides(self, **changes) -> "EngineSettings":
        settings = replace(self, **changes)
        _validate(settings)
        return settings

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def certifier_keys(self) -> List[bytes]:
        return [bytes.fromhex(k) for k in self.certifiers]


def default_settings() -> EngineSettings:
    return EngineSettings()


def _expect(name: str, value, kinds, allow_none: bool = False) -> None:
    if value is None and allow_none:
        return
    if isinstance(value, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
        raise ConfigurationError(f"'{name}' has wrong type: bool")
    if not isinstance(value, kinds):
        raise ConfigurationError(f"'{name}' has wrong type: {type(value).__name__}")


def _validate(settings: EngineSettings) -> None:
    _expect("certifiers", settings.certifiers, list)
    for key in settings.certifiers:
        _expect("certifiers[]", key, str)
        try:
            if len(bytes.fromhex(key)) != 32:
                raise ValueError
        except ValueError:
            raise ConfigurationError(f"Certifier key is not a 32-byte hex Ed25519 key: {key!r}") from None
    _expect("certifier_seed", settings.certifier_seed, str, allow_none=True)
    _expect("authority_count", settings.authority_count, int)
    if settings.authority_count < 1:
        raise ConfigurationError("'authority_count' must be at least 1")
    _expect("partition", settings.partition, dict)
    for attribute, index in settings.partition.items():
        _expect(f"partition.{attribute}", index, int)
        if not 0 <= index < settings.authority_count:
            raise ConfigurationError(f"Partition maps {attribute} to missing authority {index}")
    _expect("gas", settings.gas, dict)
    for key, value in settings.gas.items():
        if key not in GAS_KEYS:
            raise ConfigurationError(f"Unknown gas constant '{key}'")
        _expect(f"gas.{key}", value, int)
        if value < 0:
            raise ConfigurationError(f"Gas constant '{key}' must be non-negative")
    _expect("store_root", settings.store_root, str)
    _expect("deterministic_seed", settings.deterministic_seed, int, allow_none=True)
    _expect("instance_seed", settings.instance_seed, int)
    if settings.instance_seed < 0:
        raise ConfigurationError("'instance_seed' must be non-negative")
    _expect("auditor_roles", settings.auditor_roles, list)
    _expect("payload_size", settings.payload_size, int)
    if settings.payload_size < 0:
        raise ConfigurationError("'payload_size' must be non-negative")
    if settings.aead not in SUPPORTED_AEADS:
        raise ConfigurationError(f"Unsupported AEAD '{settings.aead}'")
    if settings.kdf_hash not in SUPPORTED_KDF_HASHES:
        raise ConfigurationError(f"Unsupported KDF hash '{settings.kdf_hash}'")


def load_settings(path: Union[str, Path]) -> EngineSettings:
    """Read and validate an engine configuration file"""
    path = Path(path)
    logger.info(f"Loading engine settings from {path}")
    try:
        data = orjson.loads(path.read_bytes())
    except FileNotFoundError:
        raise ConfigurationError(f"Configuration file not found: {path}") from None
    except orjson.JSONDecodeError as e:
        raise ConfigurationError(f"Malformed configuration file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("Configuration must be a JSON object")

    known = {f.name for f in fields(EngineSettings)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"Unknown configuration key(s): {', '.join(unknown)}")

    settings = replace(default_settings(), **data)
    _validate(settings)
    logger.debug(f"Engine settings: authorities={settings.authority_count}, "
                 f"certifiers={len(settings.certifiers)}, seed={settings.deterministic_seed}")
    return settings
