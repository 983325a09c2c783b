from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)

BLOB_SUFFIX = ".bin"
DIGEST_SUFFIX = ".sha256"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class CacheKey:
    namespace: str
    key: str

    @property
    def digest(self) -> str:
        return _sha256(f"{self.namespace}:{self.key}".encode("utf-8"))

    @property
    def folder(self) -> str:
        return self.namespace.replace("/", "_")


class FileCache:
    """Content cache for deterministic binary artifacts (path batch dumps).

    A key fully determines its value, so entries never expire. Each blob has a sidecar
    checksum; a blob that no longer matches it is dropped and reported as a miss.
    """

    def __init__(self, directory: Path, enabled: bool = True):
        self.directory = Path(directory)
        self.enabled = enabled

    def _blob_path(self, cache_key: CacheKey) -> Path:
        digest = cache_key.digest
        return self.directory / cache_key.folder / digest[:2] / f"{digest}{BLOB_SUFFIX}"

    @staticmethod
    def _digest_path(blob: Path) -> Path:
        return blob.with_suffix(DIGEST_SUFFIX)

    def path_for(self, namespace: str, key: str) -> Path:
        return self._blob_path(CacheKey(namespace, key))

    def get_bytes(self, namespace: str, key: str) -> Optional[bytes]:
        if not self.enabled:
            return None
        blob = self._blob_path(CacheKey(namespace, key))
        digest_path = self._digest_path(blob)
        if not blob.exists() or not digest_path.exists():
            return None
        data = blob.read_bytes()
        if _sha256(data) != digest_path.read_text(encoding="utf-8").strip():
            logger.warning("Dropping corrupt cache entry %s", blob)
            blob.unlink(missing_ok=True)
            digest_path.unlink(missing_ok=True)
            return None
        return data

    def set_bytes(self, namespace: str, key: str, value: bytes) -> Optional[Path]:
        if not self.enabled:
            return None
        blob = self._blob_path(CacheKey(namespace, key))
        blob.parent.mkdir(parents=True, exist_ok=True)
        # Blob first, checksum last: a torn write reads as a miss.
        tmp = blob.with_suffix(f"{BLOB_SUFFIX}.tmp")
        tmp.write_bytes(value)
        tmp.replace(blob)
        self._digest_path(blob).write_text(_sha256(value) + "\n", encoding="utf-8")
        return blob

    def entries(self, namespace: str) -> list[Path]:
        root = self.directory / CacheKey(namespace, "").folder
        if not root.exists():
            return []
        return sorted(root.rglob(f"*{BLOB_SUFFIX}"))

    def clear_namespace(self, namespace: str) -> int:
        """Remove every entry of a namespace; returns the number of blobs removed."""

        if not self.enabled:
            return 0
        blobs = self.entries(namespace)
        for blob in blobs:
            blob.unlink(missing_ok=True)
            self._digest_path(blob).unlink(missing_ok=True)
        return len(blobs)
