"""Content-addressed storage for encrypted blobs.

Blobs are named by the SHA-256 of their canonical bytes and re-hashed on
every read, so a modified blob can never be returned under its old name.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import crypto
from .crypto import Ciphertext, Digest


class StoreError(Exception):
    pass


class BlobMissing(StoreError, KeyError):
    pass


class IntegrityViolation(StoreError):
    """Stored bytes no longer hash to the name they are stored under."""

    def __init__(self, digest: bytes) -> None:
        super().__init__(f"blob {digest.hex()} failed hash verification")
        self.digest = digest


class CapacityExceeded(StoreError):
    pass


class ContentStore:
    def __init__(self, capacity: int | None = None) -> None:
        self.capacity = capacity
        self._blobs: dict[Digest, bytes] = {}

    def __len__(self) -> int:
        return len(self._blobs)

    def __contains__(self, digest: object) -> bool:
        return digest in self._blobs

    def digests(self) -> list[Digest]:
        return sorted(self._blobs)

    @property
    def size_bytes(self) -> int:
        return sum(len(b) for b in self._blobs.values())

    def put(self, ct: Ciphertext) -> Digest:
        return self.put_bytes(ct.to_bytes())

    def put_bytes(self, raw: bytes) -> Digest:
        digest = crypto.hash(raw)
        existing = self._blobs.get(digest)
        if existing is not None and crypto.hash(existing) == digest:
            return digest
        extra = len(raw) - (len(existing) if existing is not None else 0)
        if self.capacity is not None and self.size_bytes + extra > self.capacity:
            raise CapacityExceeded(f"storing {len(raw)} bytes exceeds capacity {self.capacity}")
        # a corrupted entry under the same name is overwritten with good bytes
        self._blobs[digest] = bytes(raw)
        return digest

    def get(self, digest: bytes) -> Ciphertext:
        return Ciphertext.from_bytes(self.get_bytes(digest))

    def get_bytes(self, digest: bytes) -> bytes:
        digest = Digest(digest)
        raw = self._blobs.get(digest)
        if raw is None:
            raise BlobMissing(digest.hex())
        if crypto.hash(raw) != digest:
            raise IntegrityViolation(digest)
        return raw

    def tamper(self, digest: bytes, offset: int = 0, mask: int = 0x01) -> None:
        """Test backdoor: flip bits of a stored blob in place."""
        raw = bytearray(self._blobs[Digest(digest)])
        raw[offset % len(raw)] ^= mask
        self._blobs[Digest(digest)] = bytes(raw)

    def save(self, directory: str | os.PathLike) -> None:
        """Write one file per blob, named by its hex digest."""
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        for digest, raw in sorted(self._blobs.items()):
            (path / digest.hex()).write_bytes(raw)

    @classmethod
    def load(cls, directory: str | os.PathLike, capacity: int | None = None) -> "ContentStore":
        store = cls(capacity)
        for entry in sorted(Path(directory).iterdir()):
            if entry.is_file():
                store._blobs[Digest.from_hex(entry.name)] = entry.read_bytes()
        return store


@dataclass
class ReplicationResult:
    count: int = 0
    skipped: list[Digest] = field(default_factory=list)


def put(store: ContentStore, ct: Ciphertext) -> Digest:
    return store.put(ct)


def get(store: ContentStore, digest: bytes) -> Ciphertext:
    return store.get(digest)


def replicate(source: ContentStore, target: ContentStore, digests: Iterable[bytes]) -> ReplicationResult:
    """Copy verified blobs from ``source`` into ``target``.

    Blobs that are missing or corrupted at the source are skipped and listed.
    """
    result = ReplicationResult()
    for d in digests:
        try:
            raw = source.get_bytes(d)
        except StoreError:
            result.skipped.append(Digest(d))
            continue
        target.put_bytes(raw)
        result.count += 1
    return result


def holders(digest: bytes, n: int, k: int | None) -> list[int]:
    """Validator indices that keep a copy of ``digest`` (all of them when k is None)."""
    if k is None or k >= n:
        return list(range(n))
    ranked = sorted(range(n), key=lambda i: crypto.hash(bytes(digest) + i.to_bytes(4, "big")))
    return sorted(ranked[:k])


class NodeStore:
    """A validator's view of off-chain storage.

    Writes are kept locally when this node is one of the blob's holders. Reads
    fall back to verified fetches from peer stores, which stands in for the
    off-chain network.
    """

    def __init__(self, index: int, n: int, k: int | None = None, capacity: int | None = None) -> None:
        self.index = index
        self.n = n
        self.k = k
        self.local = ContentStore(capacity)
        self.peers: Sequence["NodeStore"] = ()
        self.violations: list[Digest] = []
        self.repaired: list[Digest] = []

    def put(self, ct: Ciphertext) -> Digest:
        digest = ct.digest()
        if self.index in holders(digest, self.n, self.k):
            self.local.put(ct)
        return digest

    def get(self, digest: bytes) -> Ciphertext:
        try:
            return self.local.get(digest)
        except IntegrityViolation:
            self.violations.append(Digest(digest))
            self._repair(digest)
            raise
        except BlobMissing:
            for peer in self.peers:
                if peer is self:
                    continue
                try:
                    return Ciphertext.from_bytes(peer.local.get_bytes(digest))
                except StoreError:
                    continue
            raise

    def _repair(self, digest: bytes) -> None:
        for peer in self.peers:
            if peer is not self and replicate(peer.local, self.local, [digest]).count:
                self.repaired.append(Digest(digest))
                return
