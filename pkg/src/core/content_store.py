"""
Content Store Module for CLOAK

Tamper-evident, content-addressed blob storage on a local directory. A blob
is addressed by the SHA-256 of its bytes and every read re-verifies it.
"""

import hashlib
import logging
import re
from pathlib import Path
from typing import Iterator, Union

from src.core.errors import NotFound, StorageFailure, TamperDetected
from src.utils.file_operations import atomic_write_bytes

logger = logging.getLogger(__name__)

CONTENT_ID_PREFIX = "cf01"
_CONTENT_ID_RE = re.compile(r"^cf01[0-9a-f]{64}$")


class ContentId(str):
    """`cf01` followed by the lower-case hex SHA-256 of the content"""

    def __new__(cls, value: str):
        if not _CONTENT_ID_RE.match(value):
            raise ValueError(f"Invalid content id: {value!r}")
        return super().__new__(cls, value)

    @classmethod
    def for_bytes(cls, data: bytes) -> "ContentId":
        return cls(CONTENT_ID_PREFIX + hashlib.sha256(data).hexdigest())

    @property
    def digest_hex(self) -> str:
        return self[len(CONTENT_ID_PREFIX):]

    @property
    def digest(self) -> bytes:
        return bytes.fromhex(self.digest_hex)


class ContentStore:
    """Directory-backed store laid out as <root>/<first 2 hex chars>/<id>"""

    def __init__(self, root: Union[str, Path]):
        self._logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageFailure(f"Cannot create store root {self.root}: {e}") from None
        self._logger.info(f"Content store at {self.root}")

    def path_for(self, content_id: ContentId) -> Path:
        return self.root / content_id.digest_hex[:2] / content_id

    def put(self, data: bytes) -> ContentId:
        content_id = ContentId.for_bytes(data)
        path = self.path_for(content_id)
        if path.exists():
            self._logger.debug(f"Blob already stored: {content_id}")
            return content_id
        try:
            atomic_write_bytes(path, data)
        except OSError as e:
            raise StorageFailure(f"Failed to store blob {content_id}: {e}") from None
        self._logger.info(f"Stored blob {content_id[:20]}... ({len(data)} bytes)")
        return content_id

    def get(self, content_id: Union[str, ContentId]) -> bytes:
        try:
            content_id = ContentId(content_id)
        except ValueError:
            raise NotFound(f"Not a content id: {content_id!r}") from None
        path = self.path_for(content_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"No blob stored under {content_id}") from None
        except OSError as e:
            raise StorageFailure(f"Failed to read blob {content_id}: {e}") from None
        if hashlib.sha256(data).hexdigest() != content_id.digest_hex:
            self._logger.warning(f"Tampered blob detected: {content_id}")
            raise TamperDetected(f"Stored bytes no longer hash to {content_id}")
        return data

    def contains(self, content_id: Union[str, ContentId]) -> bool:
        try:
            return self.path_for(ContentId(content_id)).exists()
        except ValueError:
            return False

    def iter_ids(self) -> Iterator[ContentId]:
        for path in sorted(self.root.glob("*/cf01*")):
            if _CONTENT_ID_RE.match(path.name):
                yield ContentId(path.name)
