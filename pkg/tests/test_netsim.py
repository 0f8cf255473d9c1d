import json

import pytest

from datashare.chain import ITEMS
from datashare.crypto import content_hash
from datashare.errors import (
    ChunkVerificationFailure,
    ContentGone,
    NonQuiescence,
    NotSubscribed,
    OversizePayload,
    Unauthorized,
    UnknownItem,
)
from datashare.escrow import Role, State
from datashare.netsim import NONCE_DERIVED_FIELDS, ItemCommitment, World

from conftest import RSA, TOY

DATA = bytes(range(256)) * 40  # 10240 bytes -> 3 chunks of 4096


def sale_world(seed=42, provider=TOY, interval=15, adversarial=False):
    world = World(seed=seed, provider=provider, block_interval=interval)
    world.add_node("alice", [Role.OWNER], 1000)
    world.add_node("bob", [Role.CONSUMER], 1000)
    if adversarial:
        world.add_node("mallory", [Role.CONSUMER], 0, adversarial=True)
    return world


def full_sale(world):
    item = world.publish_data("alice", DATA, {"topic": "sleep"}, deposit=1000)
    world.run_to_quiescence()
    world.purchase("bob", item)
    world.run_to_quiescence()
    plaintext = world.retrieve_and_confirm("bob", item)
    world.run_to_quiescence()
    return item, plaintext


def strip_nonce_fields(value):
    if isinstance(value, dict):
        return {k: strip_nonce_fields(v) for k, v in value.items() if k not in NONCE_DERIVED_FIELDS}
    return value


def scrub(lines):
    return [strip_nonce_fields(json.loads(line)) for line in lines]


def test_happy_path_three_chunks():
    world = sale_world()
    item, plaintext = full_sale(world)
    assert plaintext == DATA
    listing = world.listings()[0]
    assert len(listing.commitment.chunk_digests) == 3
    contract = world.env.contracts[listing.contract]
    assert contract.state is State.INACTIVE and contract.balance == 0
    assert (world.balance("alice"), world.balance("bob")) == (1500, 500)
    assert world.node("bob").store.is_live(item)
    assert world.chain.verify().ok


def test_happy_path_with_rsa_aes():
    world = sale_world(provider=RSA)
    _, plaintext = full_sale(world)
    assert plaintext == DATA
    assert world.chain.verify().ok


def test_empty_world_is_quiescent():
    world = World(seed=1, provider=TOY)
    world.run_to_quiescence()
    assert world.chain.height == 0 and world.listings() == []


def test_same_seed_same_log():
    a, b = sale_world(seed=5), sale_world(seed=5)
    full_sale(a)
    full_sale(b)
    assert a.log_lines() == b.log_lines()
    assert a.chain.head == b.chain.head


def test_seeds_differ_only_in_nonce_derived_fields():
    a, b = sale_world(seed=5), sale_world(seed=6)
    full_sale(a)
    full_sale(b)
    assert a.log_lines() != b.log_lines()
    assert scrub(a.log_lines()) == scrub(b.log_lines())


def test_block_timestamps_follow_interval():
    world = sale_world(interval=12)
    full_sale(world)
    for block in world.chain.blocks[1:]:
        assert (block.timestamp - world.genesis_time) % 12 == 0
    assert [b.timestamp for b in world.chain.blocks] == sorted(b.timestamp for b in world.chain.blocks)


def test_latency_is_blocks_times_interval():
    for interval in (1, 15, 13):
        world = sale_world(interval=interval)
        full_sale(world)
        for call in world.env.calls:
            _, height = world.chain.get_tx(call.tx_id)
            assert world.call_latency(call.tx_id, call.submitted_height) == (height - call.submitted_height) * interval


def test_search_filters_and_subscription():
    world = sale_world()
    world.publish_data("alice", b"a" * 100, {"topic": "sleep"}, deposit=10)
    world.publish_data("alice", b"b" * 100, {"topic": "diet"}, deposit=10)
    world.run_to_quiescence()
    assert [l.metadata["topic"] for l in world.search_items("bob", {"topic": "diet"})] == ["diet"]
    assert len(world.search_items("bob")) == 2
    world.add_node("carol", [Role.CONSUMER], 0, subscriptions=())
    with pytest.raises(NotSubscribed):
        world.search_items("carol")


def test_items_commit_digests_not_content():
    world = sale_world()
    item = world.publish_data("alice", DATA, deposit=1000)
    world.run_to_quiescence()
    (entry,) = world.chain.list_items(ITEMS)
    assert DATA[:64] not in entry.payload
    commitment = ItemCommitment.decode(entry.payload)
    assert commitment.item_id == item == content_hash(DATA)
    assert ItemCommitment.decode(commitment.encode()) == commitment


def test_oversize_commitment_rejected_before_side_effects():
    world = sale_world()
    world.run_to_quiescence()
    with pytest.raises(OversizePayload):
        world.publish_data("alice", b"x" * 5000, deposit=10, chunk_size=1)
    assert world.env.contracts == {} and world.balance("alice") == 1000
    assert not world.chain.pending


def test_no_access_before_payment():
    world = sale_world()
    item = world.publish_data("alice", DATA, deposit=1000)
    world.run_to_quiescence()
    assert world.node("bob").access_notices == {}
    with pytest.raises(Exception):
        world.retrieve_and_confirm("bob", item)
    assert world.balance("bob") == 1000


def test_only_buyer_may_retrieve():
    world = sale_world()
    world.add_node("carol", [Role.CONSUMER], 1000)
    item = world.publish_data("alice", DATA, deposit=1000)
    world.run_to_quiescence()
    world.purchase("bob", item)
    world.run_to_quiescence()
    with pytest.raises(Unauthorized):
        world.retrieve_and_confirm("carol", item)


def test_unknown_item():
    world = sale_world()
    with pytest.raises(UnknownItem):
        world.purchase("bob", content_hash(b"nothing"))


def test_adversary_chunks_rejected():
    world = sale_world(adversarial=True)
    _, plaintext = full_sale(world)
    assert plaintext == DATA
    kinds = [e["kind"] for e in world.log]
    assert "chunk_rejected" in kinds
    assert world.balance("mallory") == 0


def test_only_adversary_online_fails_verification():
    world = sale_world(adversarial=True)
    item = world.publish_data("alice", DATA, deposit=1000)
    world.run_to_quiescence()
    world.purchase("bob", item)
    world.run_to_quiescence()
    world.node("alice").online = False
    with pytest.raises(ChunkVerificationFailure):
        world.retrieve_and_confirm("bob", item)
    contract = world.env.contracts[world.contract_for(item)]
    assert contract.state is State.LOCKED
    assert contract.events[-1].name == "DeliveryFailed"


def test_delete_after_purchase():
    world = sale_world()
    item = world.publish_data("alice", DATA, deposit=1000)
    world.run_to_quiescence()
    world.purchase("bob", item)
    world.run_to_quiescence()
    receipt = world.delete_item("alice", item)
    assert receipt.deleted_chunk_count == 3
    with pytest.raises(ContentGone):
        world.retrieve_and_confirm("bob", item)
    world.run_to_quiescence()
    contract = world.env.contracts[world.contract_for(item)]
    assert contract.state is State.LOCKED and contract.balance == 2000
    names = [e.name for e in contract.events]
    assert names[:3] == ["Deployed", "Paid", "AccessGranted"]
    assert "DataDeleted" in names and names[-1] == "DeliveryFailed"
    assert world.chain.verify().ok
    assert len(world.chain.list_items(ITEMS)) == 1


def test_relist_sells_to_second_buyer():
    world = sale_world()
    world.add_node("carol", [Role.CONSUMER], 1000)
    item, _ = full_sale(world)
    world.relist("alice", item, 1000)
    world.run_to_quiescence()
    world.purchase("carol", item)
    world.run_to_quiescence()
    assert world.retrieve_and_confirm("carol", item) == DATA
    assert world.balance("alice") == 2000


def test_provenance_from_world():
    world = sale_world()
    record = world.commit_provenance("alice", "study-42", {"title": "pilot"})
    world.run_to_quiescence()
    assert world.chain.contains_tx(record.tx_id)


def test_nonquiescence_guard():
    world = sale_world()
    world.publish_data("alice", DATA, deposit=1000)
    with pytest.raises(NonQuiescence):
        world.run_to_quiescence(max_ticks=0)


def test_store_root_persists_chunks(tmp_path):
    world = World(seed=3, provider=TOY, store_root=tmp_path)
    world.add_node("alice", [Role.OWNER], 100)
    world.publish_data("alice", DATA, deposit=10)
    assert len(list((tmp_path / "alice").glob("*.chunk"))) == 3
