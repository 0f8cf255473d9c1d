"""Deterministic simulator of user data sharing over a permissioned ledger.

Owners keep encrypted chunks off-chain and commit their digests to ledger
streams; buyers pay into a double-deposit escrow that releases the data key
and settles once delivery is confirmed.
"""

from .chain import Block, Chain, StreamItem, Transaction, compute_merkle_root, tx_digest, verify_blocks
from .crypto import (
    AsymmetricKeypair,
    CipherChunk,
    RsaAesProvider,
    SymmetricKey,
    ToyProvider,
    WrappedKey,
    chunk_data,
    content_hash,
    decrypt_verified,
    generate_keypair,
    reassemble,
    sym_decrypt_chunk,
    sym_encrypt_chunk,
    unwrap_key,
    wrap_key,
)
from .encoding import Address, Digest
from .escrow import ContractEnv, EscrowContract, Event, ProvenanceRecord, Registry, Role, State
from .gas import GasReceipt, GasSchedule, fee_of, load_schedule, meter_gas
from .netsim import World
from .scenario import ScenarioReport, emit_gas_report, run_scenario
from .store import CONTENT_GONE, DeletionReceipt, LocalStore

__version__ = "0.1.0"

__all__ = [
    "Address",
    "AsymmetricKeypair",
    "Block",
    "CONTENT_GONE",
    "Chain",
    "CipherChunk",
    "ContractEnv",
    "DeletionReceipt",
    "Digest",
    "EscrowContract",
    "Event",
    "GasReceipt",
    "GasSchedule",
    "LocalStore",
    "ProvenanceRecord",
    "Registry",
    "Role",
    "RsaAesProvider",
    "ScenarioReport",
    "State",
    "StreamItem",
    "SymmetricKey",
    "ToyProvider",
    "Transaction",
    "World",
    "WrappedKey",
    "chunk_data",
    "compute_merkle_root",
    "content_hash",
    "decrypt_verified",
    "emit_gas_report",
    "fee_of",
    "generate_keypair",
    "load_schedule",
    "meter_gas",
    "reassemble",
    "run_scenario",
    "sym_decrypt_chunk",
    "sym_encrypt_chunk",
    "tx_digest",
    "unwrap_key",
    "verify_blocks",
    "wrap_key",
]
