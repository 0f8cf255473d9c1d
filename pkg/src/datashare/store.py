"""Per-node off-chain storage of encrypted chunks, with tombstoned deletion.

On-disk layout (when a root directory is given)::

    <root>/<chunk digest hex>.chunk   CipherChunk.encode() bytes; sha256 of the
                                      file equals the digest in its name
    <root>/index                      one line per item:
                                      <item id hex> SP <live|deleted> SP <digest hex>[,<digest hex>]*

The index is rewritten atomically (temp file + rename) after every mutation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .crypto import CipherChunk
from .encoding import Address, Digest
from .errors import CorruptChunk, DuplicateItem, StoreError, UnknownItem


class Gone(Enum):
    """Sentinel returned by :meth:`LocalStore.fetch_chunk` for absent or erased content."""

    CONTENT_GONE = "ContentGone"

    def __repr__(self) -> str:
        return self.value


CONTENT_GONE = Gone.CONTENT_GONE


@dataclass(frozen=True)
class DeletionReceipt:
    item_id: Digest
    deleted_chunk_count: int
    timestamp: int


@dataclass
class ItemRecord:
    chunk_digests: tuple[Digest, ...]
    deleted: bool = False


class LocalStore:
    def __init__(self, owner: Address, root: str | Path | None = None) -> None:
        self.owner = owner
        self.root = Path(root) if root is not None else None
        self._entries: dict[Digest, CipherChunk] = {}
        self.item_index: dict[Digest, ItemRecord] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    # ------------------------------------------------------------------ queries

    def has_item(self, item_id: Digest) -> bool:
        return item_id in self.item_index

    def is_live(self, item_id: Digest) -> bool:
        record = self.item_index.get(item_id)
        return record is not None and not record.deleted

    def status(self, item_id: Digest) -> str:
        record = self.item_index.get(item_id)
        if record is None:
            return "unknown"
        return "deleted" if record.deleted else "live"

    def fetch_chunk(self, chunk_digest: Digest) -> CipherChunk | Gone:
        chunk = self._entries.get(chunk_digest)
        return CONTENT_GONE if chunk is None else chunk

    def item_chunks(self, item_id: Digest) -> list[CipherChunk] | Gone:
        record = self.item_index.get(item_id)
        if record is None or record.deleted:
            return CONTENT_GONE
        return [self._entries[d] for d in record.chunk_digests]

    def __len__(self) -> int:
        return len(self._entries)

    # ------------------------------------------------------------------ mutations

    def store_chunks(self, item_id: Digest, chunks: Iterable[CipherChunk]) -> None:
        chunks = list(chunks)
        if item_id in self.item_index:
            raise DuplicateItem(f"item {item_id.hex()[:16]} already stored")
        if not chunks:
            raise StoreError("an item needs at least one chunk")
        for chunk in chunks:
            if not chunk.digest_matches():
                raise CorruptChunk(f"chunk {chunk.index} digest does not match its contents")
        digests = tuple(c.chunk_digest for c in chunks)
        if len(set(digests)) != len(digests):
            raise CorruptChunk("duplicate chunk digests within one item")
        # validation done; the writes below cannot fail half way in memory
        if self.root is not None:
            for chunk in chunks:
                _atomic_write(self.root / f"{chunk.chunk_digest.hex()}.chunk", chunk.encode())
        for chunk in chunks:
            self._entries[chunk.chunk_digest] = chunk
        self.item_index[item_id] = ItemRecord(digests)
        self._flush_index()

    def delete_item(self, item_id: Digest, timestamp: int = 0) -> DeletionReceipt:
        record = self.item_index.get(item_id)
        if record is None or record.deleted:
            raise UnknownItem(f"item {item_id.hex()[:16]} is not stored")
        for digest in record.chunk_digests:
            self._entries.pop(digest, None)
            if self.root is not None:
                (self.root / f"{digest.hex()}.chunk").unlink(missing_ok=True)
        record.deleted = True
        self._flush_index()
        return DeletionReceipt(item_id, len(record.chunk_digests), timestamp)

    # ------------------------------------------------------------------ persistence

    def _flush_index(self) -> None:
        if self.root is None:
            return
        lines = [
            f"{item_id.hex()} {'deleted' if rec.deleted else 'live'} {','.join(d.hex() for d in rec.chunk_digests)}\n"
            for item_id, rec in self.item_index.items()
        ]
        _atomic_write(self.root / "index", "".join(lines).encode("ascii"))

    def _load(self) -> None:
        assert self.root is not None
        index_path = self.root / "index"
        if not index_path.exists():
            return
        for lineno, line in enumerate(index_path.read_text(encoding="ascii").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                item_hex, status, digest_list = line.split(" ")
                if status not in ("live", "deleted"):
                    raise ValueError(f"bad status {status!r}")
                digests = tuple(Digest.fromhex(d) for d in digest_list.split(","))
            except ValueError as exc:
                raise StoreError(f"{index_path}:{lineno}: {exc}") from exc
            record = ItemRecord(digests, deleted=status == "deleted")
            self.item_index[Digest.fromhex(item_hex)] = record
            if record.deleted:
                continue
            for digest in digests:
                path = self.root / f"{digest.hex()}.chunk"
                try:
                    chunk = CipherChunk.decode(path.read_bytes())
                except (OSError, ValueError) as exc:
                    raise StoreError(f"missing or unreadable chunk {path.name}") from exc
                if chunk.chunk_digest != digest:
                    raise CorruptChunk(f"{path.name} does not hash to its name")
                self._entries[digest] = chunk


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
