"""Content-addressed blob store: `<store>/blobs/<sha256>`.

Writes are atomic (temp file + rename into place) and idempotent; storing
the same content twice costs one blob.  Deletion is the caller's job and
only safe when no journal references the digest any more.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

from .errors import StoreError

_CHUNK = 1 << 16


class BlobStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, digest: str) -> Path:
        if not digest or "/" in digest or digest.startswith("tmp-"):
            raise StoreError(f"bad blob digest {digest!r}")
        return self.root / digest

    def has(self, digest: str) -> bool:
        return self.path(digest).exists()

    def size(self, digest: str) -> int:
        return self.path(digest).stat().st_size

    def _ingest(self, tmp_path: str, digest: str) -> str:
        final = self.path(digest)
        if final.exists():
            os.unlink(tmp_path)
        else:
            os.rename(tmp_path, final)
        return digest

    def put_bytes(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        if self.has(digest):
            return digest
        fd, tmp = tempfile.mkstemp(prefix="tmp-", dir=self.root)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        except BaseException:
            os.unlink(tmp)
            raise
        return self._ingest(tmp, digest)

    def put_file(self, source: Path) -> str:
        """Stream a file into the store, returning its digest."""
        hasher = hashlib.sha256()
        fd, tmp = tempfile.mkstemp(prefix="tmp-", dir=self.root)
        try:
            with os.fdopen(fd, "wb") as out, open(source, "rb") as src:
                while True:
                    chunk = src.read(_CHUNK)
                    if not chunk:
                        break
                    hasher.update(chunk)
                    out.write(chunk)
                out.flush()
                os.fsync(out.fileno())
        except BaseException:
            os.unlink(tmp)
            raise
        return self._ingest(tmp, hasher.hexdigest())

    def read_bytes(self, digest: str) -> bytes:
        try:
            return self.path(digest).read_bytes()
        except FileNotFoundError:
            raise StoreError(f"missing blob {digest}") from None

    def delete(self, digest: str) -> None:
        try:
            os.unlink(self.path(digest))
        except FileNotFoundError:
            pass

    def iter_digests(self):
        for name in sorted(os.listdir(self.root)):
            if not name.startswith("tmp-"):
                yield name

    def total_bytes(self) -> int:
        total = 0
        for name in self.iter_digests():
            total += (self.root / name).stat().st_size
        return total
