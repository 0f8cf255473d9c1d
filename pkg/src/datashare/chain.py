"""Append-only hash-chained ledger with Merkle-rooted blocks and named streams.

Byte layouts (all integers u64 big-endian, all ``blob``/``text`` fields
u32-length-prefixed, see :mod:`datashare.encoding`)::

    tx signing body = publisher(20) | text stream | text key | blob payload
                      | u64 n_meta | (text k | text v)* | u64 nonce
    tx digest       = sha256(signing body | blob signature)
    tx encoding     = tx digest(32) | signing body | blob signature
    block header    = u64 height | prev_hash(32) | merkle_root(32) | u64 timestamp
    block encoding  = block header | u64 n_tx | (blob tx encoding)*

Metadata pairs are sorted by key before encoding. The export file holds one
block per line as lowercase hex of the block encoding, genesis first.

Publishers are admitted by a ``Pubkeys`` entry signed by the system key whose
item key is the publisher address and whose payload is the public key. An
address is the last 20 bytes of sha256(public key), so the mapping is
self-certifying and the whole chain can be verified from its own contents.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .crypto import DEFAULT_PROVIDER, AsymmetricKeypair, CryptoProvider
from .encoding import ZERO_DIGEST, Address, Digest, Reader, Writer, sha256
from .errors import (
    BadSignature,
    ChainError,
    ChainFormatError,
    EmptyBlock,
    OversizePayload,
    UnknownPublisher,
    UnknownStream,
)

PUBKEYS = "Pubkeys"
ITEMS = "Items"
ACCESS = "Access"
PROVENANCE = "Provenance"
CONTRACTS = "Contracts"
DEFAULT_STREAMS = (PUBKEYS, ITEMS, ACCESS, PROVENANCE, CONTRACTS)

DEFAULT_INLINE_LIMIT = 4096
DEFAULT_GENESIS_TIME = 1_700_000_000

_STREAM_NAME = re.compile(r"^[A-Za-z0-9_\-]{1,64}$")


@dataclass(frozen=True)
class Transaction:
    tx_id: Digest
    publisher: Address
    stream: str
    key: str
    payload: bytes
    metadata: tuple[tuple[str, str], ...]
    nonce: int
    signature: bytes

    def signing_body(self) -> bytes:
        return signing_body(self.publisher, self.stream, self.key, self.payload, self.metadata, self.nonce)

    def encode(self) -> bytes:
        return bytes(self.tx_id) + self.signing_body() + Writer().blob(self.signature).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        reader = Reader(data)
        tx_id = Digest(reader.raw(32))
        publisher = Address(reader.raw(20))
        stream = reader.text()
        key = reader.text()
        payload = reader.blob()
        metadata = reader.pairs()
        nonce = reader.uint()
        signature = reader.blob()
        reader.expect_end()
        return cls(tx_id, publisher, stream, key, payload, metadata, nonce, signature)

    def meta(self) -> dict[str, str]:
        return dict(self.metadata)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: Digest
    merkle_root: Digest
    timestamp: int
    txs: tuple[Transaction, ...]

    def header_bytes(self) -> bytes:
        return (
            Writer()
            .uint(self.height)
            .raw(self.prev_hash)
            .raw(self.merkle_root)
            .uint(self.timestamp)
            .getvalue()
        )

    def header_digest(self) -> Digest:
        return sha256(self.header_bytes())

    def encode(self) -> bytes:
        w = Writer().raw(self.header_bytes()).uint(len(self.txs))
        for tx in self.txs:
            w.blob(tx.encode())
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        reader = Reader(data)
        height = reader.uint()
        prev_hash = Digest(reader.raw(32))
        merkle_root = Digest(reader.raw(32))
        timestamp = reader.uint()
        count = reader.uint()
        if count > len(data):
            raise ValueError("implausible transaction count")
        txs = tuple(Transaction.decode(reader.blob()) for _ in range(count))
        reader.expect_end()
        return cls(height, prev_hash, merkle_root, timestamp, txs)


@dataclass(frozen=True)
class StreamItem:
    stream: str
    key: str
    publisher: Address
    payload: bytes
    tx_id: Digest
    block_height: int
    metadata: tuple[tuple[str, str], ...] = ()


@dataclass
class BlockCheck:
    height: int
    ok: bool = True
    problems: list[str] = field(default_factory=list)

    def fail(self, problem: str) -> None:
        self.ok = False
        self.problems.append(problem)


@dataclass
class VerificationReport:
    blocks: list[BlockCheck]
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems and all(b.ok for b in self.blocks)

    @property
    def first_failure(self) -> int | None:
        for check in self.blocks:
            if not check.ok:
                return check.height
        return None

    def summary(self) -> str:
        if self.ok:
            return f"chain ok ({len(self.blocks)} blocks)"
        lines = [f"chain INVALID: {p}" for p in self.problems]
        for check in self.blocks:
            lines.extend(f"block {check.height}: {p}" for p in check.problems)
        return "\n".join(lines)


def signing_body(
    publisher: Address,
    stream: str,
    key: str,
    payload: bytes,
    metadata: Iterable[tuple[str, str]],
    nonce: int,
) -> bytes:
    return (
        Writer()
        .raw(publisher)
        .text(stream)
        .text(key)
        .blob(payload)
        .pairs(sorted(metadata))
        .uint(nonce)
        .getvalue()
    )


def tx_digest(tx: Transaction) -> Digest:
    return sha256(tx.signing_body(), Writer().blob(tx.signature).getvalue())


def compute_merkle_root(digests: Iterable[bytes]) -> Digest:
    level = [bytes(d) for d in digests]
    if not level:
        return ZERO_DIGEST
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return Digest(level[0])


def _normalize_metadata(metadata: Mapping[str, str] | Iterable[tuple[str, str]]) -> tuple[tuple[str, str], ...]:
    items = metadata.items() if isinstance(metadata, Mapping) else metadata
    return tuple(sorted((str(k), str(v)) for k, v in items))


def _admission(tx: Transaction, system: Address) -> tuple[Address, bytes] | None:
    """Return (address, public key) if ``tx`` is a valid system-signed Pubkeys entry."""
    if tx.stream != PUBKEYS or tx.publisher != system:
        return None
    try:
        addr = Address.parse(tx.key)
    except ValueError:
        return None
    if Address.derive(tx.payload) != addr:
        return None
    return addr, tx.payload


class Chain:
    """Single-writer permissioned ledger.

    Transactions are staged with :meth:`publish_item` and committed by
    :meth:`seal_pending`, or committed directly with :meth:`append_block`.
    """

    def __init__(
        self,
        system: AsymmetricKeypair,
        *,
        provider: CryptoProvider = DEFAULT_PROVIDER,
        inline_limit: int = DEFAULT_INLINE_LIMIT,
        genesis_time: int = DEFAULT_GENESIS_TIME,
        streams: Iterable[str] = DEFAULT_STREAMS,
    ) -> None:
        self.provider = provider
        self.system = system
        self.inline_limit = inline_limit
        self.blocks: list[Block] = []
        self.pending: list[Transaction] = []
        self.head: Digest = ZERO_DIGEST
        self._streams: dict[str, list[StreamItem]] = {}
        self._tx_index: dict[Digest, tuple[int, int]] = {}
        self._publishers: dict[Address, bytes] = {}
        self._staged_publishers: dict[Address, bytes] = {}
        self._nonces: dict[Address, int] = {}
        for name in streams:
            self.create_stream(name)
        genesis_tx = self._sign(PUBKEYS, str(system.owner_addr), system.public_key, (), system)
        self._staged_publishers[system.owner_addr] = system.public_key
        self._commit(Block(0, ZERO_DIGEST, compute_merkle_root([genesis_tx.tx_id]), genesis_time, (genesis_tx,)))

    # ------------------------------------------------------------------ state

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    @property
    def stream_names(self) -> list[str]:
        return list(self._streams)

    def create_stream(self, name: str) -> None:
        if not _STREAM_NAME.match(name):
            raise UnknownStream(f"invalid stream name {name!r}")
        self._streams.setdefault(name, [])

    def is_publisher(self, addr: Address) -> bool:
        return addr in self._publishers or addr in self._staged_publishers

    def public_key(self, addr: Address) -> bytes:
        try:
            return self._publishers[addr]
        except KeyError:
            raise UnknownPublisher(f"{addr} has no committed public key") from None

    def get_tx(self, tx_id: Digest) -> tuple[Transaction, int]:
        height, pos = self._tx_index[tx_id]
        return self.blocks[height].txs[pos], height

    def contains_tx(self, tx_id: Digest) -> bool:
        return tx_id in self._tx_index

    # ------------------------------------------------------------------ writes

    def _sign(
        self,
        stream: str,
        key: str,
        payload: bytes,
        metadata: tuple[tuple[str, str], ...],
        signer: AsymmetricKeypair,
    ) -> Transaction:
        nonce = self._nonces.get(signer.owner_addr, 0)
        body = signing_body(signer.owner_addr, stream, key, payload, metadata, nonce)
        signature = self.provider.sign(signer.private_key, body)
        self._nonces[signer.owner_addr] = nonce + 1
        tx_id = sha256(body, Writer().blob(signature).getvalue())
        return Transaction(tx_id, signer.owner_addr, stream, key, payload, metadata, nonce, signature)

    def make_tx(
        self,
        stream: str,
        key: str,
        payload: bytes,
        signer: AsymmetricKeypair,
        metadata: Mapping[str, str] | Iterable[tuple[str, str]] = (),
    ) -> Transaction:
        if not self.is_publisher(signer.owner_addr):
            raise UnknownPublisher(f"{signer.owner_addr} is not an admitted publisher")
        if stream not in self._streams:
            raise UnknownStream(stream)
        if len(payload) > self.inline_limit:
            raise OversizePayload(
                f"payload of {len(payload)} bytes exceeds the {self.inline_limit}-byte inline limit; "
                "commit digests and keep content off-chain"
            )
        return self._sign(stream, key, bytes(payload), _normalize_metadata(metadata), signer)

    def publish_item(
        self,
        stream: str,
        key: str,
        payload: bytes,
        signer: AsymmetricKeypair,
        metadata: Mapping[str, str] | Iterable[tuple[str, str]] = (),
    ) -> Transaction:
        """Stage a signed stream publication for the next sealed block."""
        tx = self.make_tx(stream, key, payload, signer, metadata)
        self.pending.append(tx)
        return tx

    def admit(self, public_key: bytes) -> Transaction:
        """Stage a system-signed Pubkeys entry admitting the owner of ``public_key``."""
        addr = Address.derive(public_key)
        tx = self.publish_item(PUBKEYS, str(addr), public_key, self.system)
        self._staged_publishers[addr] = public_key
        return tx

    def _validate(self, txs: list[Transaction]) -> None:
        known = dict(self._publishers)
        for tx in txs:
            if tx.stream not in self._streams:
                raise UnknownStream(tx.stream)
            if len(tx.payload) > self.inline_limit:
                raise OversizePayload(f"tx {tx.tx_id.hex()[:12]} exceeds the inline limit")
            pub = known.get(tx.publisher)
            if pub is None:
                raise UnknownPublisher(f"{tx.publisher} is not an admitted publisher")
            if tx_digest(tx) != tx.tx_id:
                raise BadSignature(f"tx {tx.tx_id.hex()[:12]} digest does not match its contents")
            if not self.provider.verify(pub, tx.signing_body(), tx.signature):
                raise BadSignature(f"tx {tx.tx_id.hex()[:12]} signature does not verify")
            if tx.tx_id in self._tx_index:
                raise ChainError(f"tx {tx.tx_id.hex()[:12]} already committed")
            admitted = _admission(tx, self.system.owner_addr)
            if admitted:
                known[admitted[0]] = admitted[1]

    def append_block(self, txs: Iterable[Transaction], timestamp: int | None = None) -> Block:
        txs = list(txs)
        if not txs:
            raise EmptyBlock("a block needs at least one transaction")
        if timestamp is None:
            timestamp = self.tip.timestamp
        if timestamp < self.tip.timestamp:
            raise ChainError(f"timestamp {timestamp} precedes tip timestamp {self.tip.timestamp}")
        self._validate(txs)
        block = Block(
            height=self.tip.height + 1,
            prev_hash=self.head,
            merkle_root=compute_merkle_root(tx.tx_id for tx in txs),
            timestamp=timestamp,
            txs=tuple(txs),
        )
        self._commit(block)
        committed = {tx.tx_id for tx in txs}
        self.pending = [tx for tx in self.pending if tx.tx_id not in committed]
        return block

    def seal_pending(self, timestamp: int | None = None) -> Block | None:
        if not self.pending:
            return None
        return self.append_block(list(self.pending), timestamp)

    def _commit(self, block: Block) -> None:
        self.blocks.append(block)
        self.head = block.header_digest()
        for pos, tx in enumerate(block.txs):
            self._tx_index[tx.tx_id] = (block.height, pos)
            self._streams.setdefault(tx.stream, []).append(
                StreamItem(tx.stream, tx.key, tx.publisher, tx.payload, tx.tx_id, block.height, tx.metadata)
            )
            admitted = _admission(tx, self.system.owner_addr)
            if admitted:
                self._publishers[admitted[0]] = admitted[1]
                self._staged_publishers.pop(admitted[0], None)

    # ------------------------------------------------------------------ reads

    def list_items(
        self,
        stream: str,
        *,
        key_prefix: str | None = None,
        publisher: Address | None = None,
    ) -> list[StreamItem]:
        try:
            items = self._streams[stream]
        except KeyError:
            raise UnknownStream(stream) from None
        return [
            item
            for item in items
            if (key_prefix is None or item.key.startswith(key_prefix))
            and (publisher is None or item.publisher == publisher)
        ]

    def verify(self) -> VerificationReport:
        return verify_blocks(self.blocks, self.system.owner_addr, self.provider, head=self.head)

    # ------------------------------------------------------------------ export

    def export_lines(self) -> Iterator[str]:
        for block in self.blocks:
            yield block.encode().hex()

    def export(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.export_lines()), encoding="ascii")


def load_blocks(lines: Iterable[str]) -> list[Block]:
    blocks = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            blocks.append(Block.decode(bytes.fromhex(line)))
        except ValueError as exc:
            raise ChainFormatError(f"line {lineno}: {exc}") from exc
    return blocks


def import_chain(path: str | Path) -> list[Block]:
    return load_blocks(Path(path).read_text(encoding="ascii").splitlines())


def verify_blocks(
    blocks: list[Block],
    system: Address | None = None,
    provider: CryptoProvider = DEFAULT_PROVIDER,
    *,
    head: Digest | None = None,
) -> VerificationReport:
    """Check links, Merkle roots, transaction digests and signatures.

    ``system`` defaults to the publisher of the genesis transaction. When
    ``head`` is given the tip header must hash to it, which also covers
    tampering with the last block's header.
    """
    report = VerificationReport([])
    if not blocks:
        report.problems.append("chain has no blocks")
        return report
    if system is None and blocks[0].txs:
        system = blocks[0].txs[0].publisher
    publishers: dict[Address, bytes] = {}
    prev: Block | None = None
    for index, block in enumerate(blocks):
        check = BlockCheck(block.height)
        report.blocks.append(check)
        if block.height != index:
            check.fail(f"height {block.height} at position {index}")
        expected_prev = ZERO_DIGEST if prev is None else prev.header_digest()
        if block.prev_hash != expected_prev:
            check.fail("prev_hash does not match the previous header")
        if prev is not None and block.timestamp < prev.timestamp:
            check.fail("timestamp decreases")
        if not block.txs:
            check.fail("empty block")
        if compute_merkle_root(tx.tx_id for tx in block.txs) != block.merkle_root:
            check.fail("merkle root mismatch")
        for pos, tx in enumerate(block.txs):
            if tx_digest(tx) != tx.tx_id:
                check.fail(f"tx {pos}: digest mismatch")
            if index == 0 and pos == 0:
                # genesis is self-signed by the system key it publishes
                admitted = _admission(tx, tx.publisher)
                if admitted is None or tx.publisher != system:
                    check.fail("genesis does not publish the system key")
                else:
                    publishers[admitted[0]] = admitted[1]
            pub = publishers.get(tx.publisher)
            if pub is None:
                check.fail(f"tx {pos}: publisher {tx.publisher} not admitted")
            elif not provider.verify(pub, tx.signing_body(), tx.signature):
                check.fail(f"tx {pos}: bad signature")
            if system is not None and index > 0:
                admitted = _admission(tx, system)
                if admitted:
                    publishers[admitted[0]] = admitted[1]
        prev = block
    if head is not None and blocks[-1].header_digest() != head:
        report.blocks[-1].fail("tip header does not match the recorded head")
    return report


def replace_tx(block: Block, position: int, tx: Transaction) -> Block:
    """Copy of ``block`` with one transaction swapped (used by audit tooling and tests)."""
    txs = list(block.txs)
    txs[position] = tx
    return replace(block, txs=tuple(txs))
