"""Deterministic multi-node simulation of the publish, purchase, deliver and settle flow.

A :class:`World` owns the ledger, the contract engine and every node. Time
advances in ticks; each tick delivers the messages queued before it (FIFO),
seals one block holding all pending transactions and moves the clock by
``block_interval`` seconds. Every random choice (item keys, nonce seeds,
key-wrap entropy, adversarial garbage) comes from one ``random.Random(seed)``.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .chain import ACCESS, DEFAULT_GENESIS_TIME, DEFAULT_STREAMS, ITEMS, Chain
from .crypto import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_PROVIDER,
    AsymmetricKeypair,
    CipherChunk,
    CryptoProvider,
    WrappedKey,
    content_hash,
    decrypt_verified,
    encrypt_item,
    generate_keypair,
    unwrap_key,
    wrap_key,
)
from .encoding import Address, Digest, Reader, Writer, sha256
from .errors import (
    ChunkVerificationFailure,
    ContentGone,
    DataShareError,
    DuplicateItem,
    NonQuiescence,
    NotSubscribed,
    OversizePayload,
    SimulationError,
    Unauthorized,
    UnknownItem,
    WrongState,
)
from .escrow import ContractEnv, EscrowContract, Role, State, fresh_symmetric_key
from .gas import DEFAULT_GAS_PRICE_WEI, GasSchedule
from .store import CONTENT_GONE, DeletionReceipt, LocalStore

DEFAULT_BLOCK_INTERVAL = 15
DEFAULT_MAX_TICKS = 1000
DEFAULT_RETRIEVAL_ROUNDS = 3

ENGINE_ID = "engine"

# log fields whose values depend on seeded nonces or keys rather than on the scenario
NONCE_DERIVED_FIELDS = frozenset({"hash", "merkle_root", "tx", "access_tx", "chunk", "nonce_seed"})


class MessageKind(str, Enum):
    CHUNK_QUERY = "ChunkQuery"
    CHUNK_RESPONSE = "ChunkResponse"
    ACCESS_NOTICE = "AccessNotice"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: str
    recipient: str
    payload: bytes


_OK, _GONE = 0, 1


@dataclass(frozen=True)
class ItemCommitment:
    """Items-stream payload: what a buyer needs to locate and verify an item."""

    item_id: Digest
    contract: Address
    size: int
    chunk_size: int
    chunk_digests: tuple[Digest, ...]

    def encode(self) -> bytes:
        w = Writer().raw(self.item_id).raw(self.contract).uint(self.size).uint(self.chunk_size)
        w.uint(len(self.chunk_digests))
        for d in self.chunk_digests:
            w.raw(d)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "ItemCommitment":
        r = Reader(data)
        item_id = Digest(r.raw(32))
        contract = Address(r.raw(20))
        size, chunk_size, count = r.uint(), r.uint(), r.uint()
        if count > len(data):
            raise ValueError("implausible chunk count")
        digests = tuple(Digest(r.raw(32)) for _ in range(count))
        r.expect_end()
        return cls(item_id, contract, size, chunk_size, digests)


@dataclass(frozen=True)
class Listing:
    item_id: Digest
    contract: Address
    owner: Address
    price: int
    state: str
    metadata: dict[str, str]
    commitment: ItemCommitment
    tx_id: Digest


@dataclass
class Retrieval:
    item_id: Digest
    contract: Address
    wanted: dict[Digest, int]
    accepted: dict[Digest, CipherChunk] = field(default_factory=dict)
    rejected: int = 0
    gone: int = 0


@dataclass
class Node:
    node_id: str
    keypair: AsymmetricKeypair
    store: LocalStore
    subscriptions: set[str]
    adversarial: bool = False
    online: bool = True
    retrieval_queue: deque[Digest] = field(default_factory=deque)
    access_notices: dict[Digest, Digest] = field(default_factory=dict)
    received: dict[Digest, bytes] = field(default_factory=dict)
    retrieval: Retrieval | None = None

    @property
    def addr(self) -> Address:
        return self.keypair.owner_addr


def node_seed(node_id: str) -> bytes:
    return bytes(sha256(b"datashare/node-key/", node_id.encode("utf-8")))


class World:
    def __init__(
        self,
        *,
        seed: int = 0,
        block_interval: int = DEFAULT_BLOCK_INTERVAL,
        provider: CryptoProvider = DEFAULT_PROVIDER,
        schedule: GasSchedule | None = None,
        gas_price_wei: int = DEFAULT_GAS_PRICE_WEI,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        max_ticks: int = DEFAULT_MAX_TICKS,
        genesis_time: int = DEFAULT_GENESIS_TIME,
        timeout_blocks: int | None = None,
        store_root: str | Path | None = None,
        retrieval_rounds: int = DEFAULT_RETRIEVAL_ROUNDS,
    ) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.block_interval = block_interval
        self.provider = provider
        self.chunk_size = chunk_size
        self.max_ticks = max_ticks
        self.genesis_time = genesis_time
        self.store_root = Path(store_root) if store_root is not None else None
        self.retrieval_rounds = retrieval_rounds
        self.engine = generate_keypair(bytes(sha256(b"datashare/engine-key")), provider)
        self.chain = Chain(self.engine, provider=provider, genesis_time=genesis_time, streams=DEFAULT_STREAMS)
        self.env = ContractEnv(
            self.chain,
            schedule=schedule,
            gas_price_wei=gas_price_wei,
            rng=self.rng,
            timeout_blocks=timeout_blocks,
        )
        self.nodes: dict[str, Node] = {}
        self.messages: deque[Message] = deque()
        self.clock = 0
        self.log: list[dict] = []
        self._event_cursor = 0

    @property
    def registry(self):
        return self.env.registry

    # ------------------------------------------------------------------ setup

    def add_node(
        self,
        node_id: str,
        roles: Iterable[Role | str] = (Role.OWNER, Role.CONSUMER),
        balance: int = 0,
        *,
        adversarial: bool = False,
        subscriptions: Iterable[str] = (ITEMS, ACCESS),
    ) -> Node:
        if node_id in self.nodes or node_id == ENGINE_ID:
            raise SimulationError(f"duplicate node id {node_id!r}")
        if balance < 0:
            raise SimulationError("initial balance must be non-negative")
        keypair = generate_keypair(node_seed(node_id), self.provider)
        store_dir = self.store_root / node_id if self.store_root is not None else None
        node = Node(node_id, keypair, LocalStore(keypair.owner_addr, store_dir), set(subscriptions), adversarial)
        for role in roles:
            self.env.register(keypair.owner_addr, role, keypair.public_key)
        self.env.mint(keypair.owner_addr, balance)
        self.nodes[node_id] = node
        self._log("join", node=node_id, addr=str(node.addr), roles=sorted(Role(r).value for r in roles), balance=balance)
        return node

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise SimulationError(f"unknown node {node_id!r}") from None

    def node_by_addr(self, addr: Address) -> Node | None:
        for node in self.nodes.values():
            if node.addr == addr:
                return node
        return None

    def balance(self, node: Node | str) -> int:
        node = self.node(node) if isinstance(node, str) else node
        return self.env.balance_of(node.addr)

    # ------------------------------------------------------------------ log

    def _log(self, kind: str, **fields) -> None:
        self._sync_events()
        self.log.append({"tick": self.clock, "kind": kind, **fields})

    def _sync_events(self) -> None:
        for event in self.env.events[self._event_cursor:]:
            self.log.append({"tick": self.clock, "kind": "contract_event", **event.to_dict()})
        self._event_cursor = len(self.env.events)

    def log_lines(self) -> list[str]:
        self._sync_events()
        return [json.dumps(entry, separators=(",", ":")) for entry in self.log]

    def export_log(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.log_lines()), encoding="utf-8")

    # ------------------------------------------------------------------ scheduler

    def quiescent(self) -> bool:
        return not self.messages and not self.chain.pending

    def tick(self) -> None:
        batch = list(self.messages)
        self.messages.clear()
        for message in batch:
            self._deliver(message)
        self._sync_events()
        block = self.chain.seal_pending(self.genesis_time + (self.clock + 1) * self.block_interval)
        self.clock += 1
        if block is not None:
            self._log(
                "block",
                height=block.height,
                txs=len(block.txs),
                timestamp=block.timestamp,
                hash=block.header_digest().hex(),
                merkle_root=block.merkle_root.hex(),
            )

    def run_to_quiescence(self, max_ticks: int | None = None) -> list[dict]:
        limit = self.max_ticks if max_ticks is None else max_ticks
        ticks = 0
        while not self.quiescent():
            if ticks >= limit:
                raise NonQuiescence(f"still busy after {limit} ticks")
            self.tick()
            ticks += 1
        self._sync_events()
        return self.log

    def _send(self, kind: MessageKind, sender: str, recipient: str, payload: bytes) -> None:
        self.messages.append(Message(kind, sender, recipient, payload))

    def _deliver(self, message: Message) -> None:
        node = self.nodes.get(message.recipient)
        if node is None or not node.online:
            self._log("dropped", msg=message.kind.value, sender=message.sender, recipient=message.recipient)
            return
        if message.kind is MessageKind.CHUNK_QUERY:
            self._on_query(node, message)
        elif message.kind is MessageKind.CHUNK_RESPONSE:
            self._on_response(node, message)
        elif message.kind is MessageKind.ACCESS_NOTICE:
            item_id, tx_id = Digest(message.payload[:32]), Digest(message.payload[32:64])
            node.access_notices[item_id] = tx_id
            self._log("access_notice", node=node.node_id, item=item_id.hex(), tx=tx_id.hex())

    def _on_query(self, node: Node, message: Message) -> None:
        digest = Digest(message.payload)
        if node.adversarial:
            forged = CipherChunk(0, self.rng.randbytes(12), self.rng.randbytes(48), digest)
            body = bytes(digest) + bytes([_OK]) + forged.encode()
            self._send(MessageKind.CHUNK_RESPONSE, node.node_id, message.sender, body)
            return
        chunk = node.store.fetch_chunk(digest)
        if chunk is not CONTENT_GONE:
            body = bytes(digest) + bytes([_OK]) + chunk.encode()
        elif any(digest in rec.chunk_digests for rec in node.store.item_index.values()):
            body = bytes(digest) + bytes([_GONE])
        else:
            return
        self._send(MessageKind.CHUNK_RESPONSE, node.node_id, message.sender, body)

    def _on_response(self, node: Node, message: Message) -> None:
        retrieval = node.retrieval
        digest, status, body = Digest(message.payload[:32]), message.payload[32], message.payload[33:]
        if retrieval is None or digest not in retrieval.wanted:
            return
        if status == _GONE:
            retrieval.gone += 1
            self._log("chunk_gone", node=node.node_id, peer=message.sender, chunk=digest.hex())
            return
        # reject anything whose bytes do not hash to the committed digest before decrypting
        chunk = CipherChunk.decode(body) if sha256(body) == digest else None
        if chunk is None or chunk.index != retrieval.wanted[digest]:
            retrieval.rejected += 1
            self._log("chunk_rejected", node=node.node_id, peer=message.sender, chunk=digest.hex())
            return
        if digest in retrieval.accepted:
            return
        retrieval.accepted[digest] = chunk
        if digest in node.retrieval_queue:
            node.retrieval_queue.remove(digest)
        self._log("chunk_accepted", node=node.node_id, peer=message.sender, chunk=digest.hex())

    # ------------------------------------------------------------------ lookups

    def listings(self) -> list[Listing]:
        out = []
        for item in self.chain.list_items(ITEMS):
            try:
                commitment = ItemCommitment.decode(item.payload)
            except ValueError:
                continue
            contract = self.env.contracts.get(commitment.contract)
            if contract is None:
                continue
            out.append(
                Listing(
                    commitment.item_id,
                    commitment.contract,
                    contract.owner,
                    contract.price,
                    contract.state.value,
                    dict(item.metadata),
                    commitment,
                    item.tx_id,
                )
            )
        return out

    def _listing(self, item_id: Digest, *, consumer: Address | None = None) -> Listing:
        """Newest committed listing of ``item_id``; prefer a contract locked to ``consumer``."""
        matches = [l for l in self.listings() if l.item_id == item_id]
        if not matches:
            raise UnknownItem(f"item {item_id.hex()[:16]} has no committed listing")
        if consumer is not None:
            for listing in reversed(matches):
                if self.env.contracts[listing.contract].consumer == consumer:
                    return listing
        for listing in reversed(matches):
            if listing.state == State.CREATED.value:
                return listing
        return matches[-1]

    def contract_for(self, item_id: Digest, consumer: Address | None = None) -> Address:
        return self._listing(item_id, consumer=consumer).contract

    # ------------------------------------------------------------------ operations

    def publish_data(
        self,
        owner: Node | str,
        plaintext: bytes,
        metadata: Mapping[str, str] | None = None,
        deposit: int = 0,
        *,
        chunk_size: int | None = None,
    ) -> Digest:
        """Encrypt and store ``plaintext`` locally, deploy its escrow and commit its digests."""
        owner = self.node(owner) if isinstance(owner, str) else owner
        chunk_size = chunk_size or self.chunk_size
        item_id = content_hash(plaintext)
        if owner.store.has_item(item_id):
            raise DuplicateItem(f"{owner.node_id} already published item {item_id.hex()[:16]}")
        key = fresh_symmetric_key(item_id, self.rng)
        nonce_seed = self.rng.randbytes(8)
        chunks = encrypt_item(plaintext, key, nonce_seed, chunk_size, self.provider)
        custody = wrap_key(key, self.engine.public_key, self.engine.owner_addr, rng=self.rng, provider=self.provider)
        # size check before any side effect so a rejected publication leaves no trace
        probe = ItemCommitment(item_id, Address(bytes(20)), len(plaintext), chunk_size, tuple(c.chunk_digest for c in chunks))
        if len(probe.encode()) > self.chain.inline_limit:
            raise OversizePayload("item commitment exceeds the inline limit; use a larger chunk size")
        contract = self.env.deploy_contract(owner.addr, deposit, item_id, key_custody=custody)
        owner.store.store_chunks(item_id, chunks)
        commitment = ItemCommitment(item_id, contract.addr, len(plaintext), chunk_size, probe.chunk_digests)
        self.chain.publish_item(ITEMS, item_id.hex(), commitment.encode(), owner.keypair, metadata or {})
        self._log(
            "publish",
            node=owner.node_id,
            item=item_id.hex(),
            contract=str(contract.addr),
            chunks=len(chunks),
            size=len(plaintext),
        )
        return item_id

    def relist(self, owner: Node | str, item_id: Digest, deposit: int, metadata: Mapping[str, str] | None = None) -> Address:
        """Open a fresh contract for another buyer of an item the owner still holds."""
        owner = self.node(owner) if isinstance(owner, str) else owner
        chunks = owner.store.item_chunks(item_id)
        if chunks is CONTENT_GONE:
            raise ContentGone(f"{owner.node_id} no longer holds item {item_id.hex()[:16]}")
        previous = self._listing(item_id)
        source = self.env.contracts[previous.contract]
        contract = self.env.deploy_contract(owner.addr, deposit, item_id, key_custody=source.key_custody)
        commitment = ItemCommitment(item_id, contract.addr, previous.commitment.size, previous.commitment.chunk_size, previous.commitment.chunk_digests)
        self.chain.publish_item(ITEMS, item_id.hex(), commitment.encode(), owner.keypair, metadata or previous.metadata)
        self._log("relist", node=owner.node_id, item=item_id.hex(), contract=str(contract.addr))
        return contract.addr

    def search_items(self, node: Node | str, metadata_filter: Mapping[str, str] | None = None) -> list[Listing]:
        node = self.node(node) if isinstance(node, str) else node
        if ITEMS not in node.subscriptions:
            raise NotSubscribed(f"{node.node_id} is not subscribed to {ITEMS}")
        wanted = dict(metadata_filter or {})
        return [l for l in self.listings() if all(l.metadata.get(k) == v for k, v in wanted.items())]

    def purchase(self, consumer: Node | str, item_id: Digest) -> EscrowContract:
        consumer = self.node(consumer) if isinstance(consumer, str) else consumer
        listing = self._listing(item_id)
        contract = self.env.consumer_pay(listing.contract, consumer.addr)
        assert contract.access_tx is not None
        owner = self.node_by_addr(contract.owner)
        self._send(
            MessageKind.ACCESS_NOTICE,
            ENGINE_ID,
            consumer.node_id,
            bytes(item_id) + bytes(contract.access_tx),
        )
        self._log(
            "purchase",
            node=consumer.node_id,
            item=item_id.hex(),
            contract=str(contract.addr),
            owner=owner.node_id if owner else str(contract.owner),
        )
        return contract

    def retrieve_and_confirm(self, consumer: Node | str, item_id: Digest) -> bytes:
        """Fetch verified chunks over the simulated network, decrypt, check, confirm and settle."""
        consumer = self.node(consumer) if isinstance(consumer, str) else consumer
        if ITEMS not in consumer.subscriptions:
            raise NotSubscribed(f"{consumer.node_id} is not subscribed to {ITEMS}")
        listing = self._listing(item_id, consumer=consumer.addr)
        contract = self.env.contracts[listing.contract]
        if contract.state is not State.LOCKED:
            raise WrongState(f"contract {contract.addr} is {contract.state.value}, not Locked")
        if contract.consumer != consumer.addr:
            raise Unauthorized(f"{consumer.node_id} did not buy item {item_id.hex()[:16]}")

        # the access entry must be committed and announced before retrieval starts
        ticks = 0
        while item_id not in consumer.access_notices or not self.chain.contains_tx(consumer.access_notices[item_id]):
            if self.quiescent() or ticks >= self.max_ticks:
                raise SimulationError("access grant never reached the consumer")
            self.tick()
            ticks += 1

        commitment = listing.commitment
        retrieval = Retrieval(item_id, contract.addr, {d: i for i, d in enumerate(commitment.chunk_digests)})
        consumer.retrieval = retrieval
        consumer.retrieval_queue.extend(commitment.chunk_digests)
        try:
            for round_no in range(self.retrieval_rounds):
                missing = [d for d in commitment.chunk_digests if d not in retrieval.accepted]
                if not missing:
                    break
                self._log("query_round", node=consumer.node_id, item=item_id.hex(), round=round_no, missing=len(missing))
                for digest in missing:
                    for peer_id in sorted(self.nodes):
                        if peer_id != consumer.node_id:
                            self._send(MessageKind.CHUNK_QUERY, consumer.node_id, peer_id, bytes(digest))
                ticks = 0
                while self.messages:
                    if ticks >= self.max_ticks:
                        raise NonQuiescence(f"retrieval still busy after {self.max_ticks} ticks")
                    self.tick()
                    ticks += 1
            missing = [d for d in commitment.chunk_digests if d not in retrieval.accepted]
            if missing:
                if retrieval.rejected and not retrieval.gone:
                    reason, exc_type = "verification", ChunkVerificationFailure
                else:
                    reason, exc_type = "content_gone", ContentGone
                self.env.note(contract.addr, "DeliveryFailed", consumer.addr, {"reason": reason, "missing": str(len(missing))})
                self._log("delivery_failed", node=consumer.node_id, item=item_id.hex(), reason=reason, missing=len(missing))
                raise exc_type(f"{len(missing)} of {len(commitment.chunk_digests)} chunks could not be retrieved")

            access_item, _ = self.chain.get_tx(consumer.access_notices[item_id])
            wrapped = WrappedKey.decode(access_item.payload)
            try:
                key = unwrap_key(wrapped, consumer.keypair.private_key, self.provider)
            except DataShareError:
                self.env.note(contract.addr, "DeliveryFailed", consumer.addr, {"reason": "unwrap"})
                raise
            chunks = [retrieval.accepted[d] for d in commitment.chunk_digests]
            plaintext = decrypt_verified(chunks, commitment.chunk_digests, key, self.provider)
            if content_hash(plaintext) != item_id:
                self.env.note(contract.addr, "DeliveryFailed", consumer.addr, {"reason": "content_hash"})
                raise ChunkVerificationFailure("reassembled content does not match the committed item id")
        finally:
            consumer.retrieval = None
            consumer.retrieval_queue.clear()

        if not consumer.store.has_item(item_id):
            consumer.store.store_chunks(item_id, chunks)
        consumer.received[item_id] = plaintext
        self.env.record_delivery(contract.addr, consumer.addr, item_id)
        self.env.confirm_delivery(contract.addr, consumer.addr)
        self._log("delivered", node=consumer.node_id, item=item_id.hex(), size=len(plaintext))
        return plaintext

    def delete_item(self, owner: Node | str, item_id: Digest) -> DeletionReceipt:
        owner = self.node(owner) if isinstance(owner, str) else owner
        receipt = owner.store.delete_item(item_id, self.genesis_time + self.clock * self.block_interval)
        for contract in self.env.contracts.values():
            if contract.item_id == item_id and contract.owner == owner.addr:
                self.env.note(contract.addr, "DataDeleted", owner.addr, {"chunks": str(receipt.deleted_chunk_count)})
        self._log("deleted", node=owner.node_id, item=item_id.hex(), chunks=receipt.deleted_chunk_count)
        return receipt

    def commit_provenance(self, researcher: Node | str, research_id: str, metadata: Mapping[str, str] | None = None):
        researcher = self.node(researcher) if isinstance(researcher, str) else researcher
        record = self.env.commit_provenance(researcher.addr, research_id, metadata)
        self._log("provenance", node=researcher.node_id, research_id=research_id, tx=record.tx_id.hex())
        return record

    # ------------------------------------------------------------------ reporting

    def call_latency(self, tx_id: Digest | None, submitted_height: int) -> int | None:
        """Simulated confirmation latency in seconds: blocks waited times the block interval."""
        if tx_id is None or not self.chain.contains_tx(tx_id):
            return None
        _, height = self.chain.get_tx(tx_id)
        return (height - submitted_height) * self.block_interval
