import random
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from datashare.crypto import (
    CipherChunk,
    SymmetricKey,
    WrappedKey,
    chunk_data,
    content_hash,
    decrypt_item,
    decrypt_verified,
    encrypt_item,
    generate_keypair,
    get_provider,
    make_nonce,
    reassemble,
    sym_decrypt_chunk,
    sym_encrypt_chunk,
    unwrap_key,
    wrap_key,
)
from datashare.encoding import Address, Digest
from datashare.errors import AuthenticationFailure, BadChunkSize, ChunkVerificationFailure, NonceReuse, UnwrapFailure

from conftest import RSA, TOY, keypair, seed_for

PROVIDERS = pytest.mark.parametrize("provider", [TOY, RSA], ids=["toy", "rsa-aes"])

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def item_key(data: bytes, fill: int = 7) -> SymmetricKey:
    return SymmetricKey(bytes([fill]) * 32, content_hash(data))


def test_content_hash_of_empty_input():
    assert content_hash(b"").hex() == EMPTY_SHA256


def test_chunk_sizes():
    assert [len(c) for c in chunk_data(b"0123456789", 4)] == [4, 4, 2]
    assert chunk_data(b"", 4) == [b""]
    assert chunk_data(b"abcd", 4) == [b"abcd"]


@pytest.mark.parametrize("size", [0, -1])
def test_bad_chunk_size(size):
    with pytest.raises(BadChunkSize):
        chunk_data(b"abc", size)


@given(st.binary(max_size=2048), st.integers(1, 300))
def test_chunk_then_reassemble_is_identity(data, size):
    pieces = chunk_data(data, size)
    assert reassemble(pieces) == data
    assert all(len(p) == size for p in pieces[:-1])
    assert 0 < len(pieces[-1]) <= size or data == b""


def test_make_nonce_layout():
    assert make_nonce(b"ABCDEFGH", 258) == b"ABCDEFGH\x00\x00\x01\x02"
    with pytest.raises(ValueError):
        make_nonce(b"short", 0)


@PROVIDERS
def test_keypairs_are_deterministic(provider):
    a = generate_keypair(seed_for("det"), provider)
    b = generate_keypair(seed_for("det"), provider)
    c = generate_keypair(seed_for("other"), provider)
    assert a == b
    assert a.public_key != c.public_key
    assert a.owner_addr == Address.derive(a.public_key)


def test_keypair_seed_length_checked():
    with pytest.raises(ValueError):
        generate_keypair(b"short", TOY)


def test_repr_hides_key_material():
    key = item_key(b"x")
    assert key.key_bytes.hex() not in repr(key)
    assert "private" not in repr(keypair("someone"))


@PROVIDERS
def test_chunk_round_trip(provider):
    data = b"sensor,value\n" * 100
    key = item_key(data)
    chunk = sym_encrypt_chunk(data, key, 0, make_nonce(b"\x00" * 8, 0), provider=provider)
    assert chunk.digest_matches()
    assert sym_decrypt_chunk(chunk, key, provider) == data


@PROVIDERS
def test_wrong_key_fails_authentication(provider):
    data = b"private row"
    chunk = sym_encrypt_chunk(data, item_key(data), 0, make_nonce(b"\x00" * 8, 0), provider=provider)
    with pytest.raises(AuthenticationFailure):
        sym_decrypt_chunk(chunk, item_key(data, fill=8), provider)


@PROVIDERS
def test_tampered_ciphertext_fails_authentication(provider):
    data = b"private row"
    key = item_key(data)
    chunk = sym_encrypt_chunk(data, key, 0, make_nonce(b"\x00" * 8, 0), provider=provider)
    flipped = bytes([chunk.ciphertext[0] ^ 1]) + chunk.ciphertext[1:]
    with pytest.raises(AuthenticationFailure):
        sym_decrypt_chunk(replace(chunk, ciphertext=flipped), key, provider)


@PROVIDERS
def test_chunk_bound_to_its_index(provider):
    data = b"row"
    key = item_key(data)
    chunk = sym_encrypt_chunk(data, key, 0, make_nonce(b"\x00" * 8, 0), provider=provider)
    with pytest.raises(AuthenticationFailure):
        sym_decrypt_chunk(replace(chunk, index=1), key, provider)


def test_nonce_reuse_rejected():
    key = item_key(b"x")
    seen: set[bytes] = set()
    nonce = make_nonce(b"\x01" * 8, 0)
    sym_encrypt_chunk(b"a", key, 0, nonce, seen_nonces=seen, provider=TOY)
    with pytest.raises(NonceReuse):
        sym_encrypt_chunk(b"b", key, 1, nonce, seen_nonces=seen, provider=TOY)


def test_chunk_encoding_round_trip():
    data = b"x" * 50
    chunk = encrypt_item(data, item_key(data), b"\x02" * 8, 16, TOY)[2]
    decoded = CipherChunk.decode(chunk.encode())
    assert decoded == chunk
    assert decoded.chunk_digest == content_hash(chunk.encode())


def test_chunk_digest_golden_layout():
    # sha256(u64 index | u32 len | nonce | ciphertext), hand-built oracle
    chunk = CipherChunk.decode(
        (2).to_bytes(8, "big") + (12).to_bytes(4, "big") + b"\x00" * 8 + b"\x00\x00\x00\x02" + b"cipher"
    )
    assert chunk.chunk_digest.hex() == "e9d0a69b1446b1636bd11f3248364c94c34a970d4df1a6b155f49a33a2c3bc55"
    assert chunk.ciphertext == b"cipher" and chunk.digest_matches()


@PROVIDERS
def test_wrap_unwrap_round_trip(provider):
    recipient = keypair("recipient", provider)
    key = item_key(b"data")
    wrapped = wrap_key(key, recipient.public_key, recipient.owner_addr, rng=random.Random(3), provider=provider)
    assert unwrap_key(wrapped, recipient.private_key, provider) == key
    assert WrappedKey.decode(wrapped.encode()) == wrapped


@PROVIDERS
def test_bystander_cannot_unwrap(provider):
    recipient = keypair("recipient", provider)
    wrapped = wrap_key(item_key(b"d"), recipient.public_key, recipient.owner_addr, rng=random.Random(3), provider=provider)
    for i in range(8):
        with pytest.raises(UnwrapFailure):
            unwrap_key(wrapped, keypair(f"bystander-{i}", provider).private_key, provider)


@PROVIDERS
def test_wrapped_key_bound_to_item(provider):
    recipient = keypair("recipient", provider)
    wrapped = wrap_key(item_key(b"d"), recipient.public_key, recipient.owner_addr, rng=random.Random(3), provider=provider)
    moved = replace(wrapped, item_id=Digest(bytes(32)))
    with pytest.raises(UnwrapFailure):
        unwrap_key(moved, recipient.private_key, provider)


def test_wrap_is_deterministic_under_seeded_rng():
    recipient = keypair("recipient", RSA)
    key = item_key(b"d")
    a = wrap_key(key, recipient.public_key, recipient.owner_addr, rng=random.Random(5), provider=RSA)
    b = wrap_key(key, recipient.public_key, recipient.owner_addr, rng=random.Random(5), provider=RSA)
    assert a == b


@PROVIDERS
def test_signatures(provider):
    kp = keypair("signer", provider)
    sig = provider.sign(kp.private_key, b"message")
    assert provider.verify(kp.public_key, b"message", sig)
    assert not provider.verify(kp.public_key, b"messagE", sig)
    assert not provider.verify(keypair("other", provider).public_key, b"message", sig)
    assert not provider.verify(kp.public_key, b"message", b"\x00" * len(sig))


def test_unknown_provider():
    with pytest.raises(ValueError, match="rsa-aes"):
        get_provider("rot13")


@given(st.binary(max_size=4096), st.integers(1, 700), st.binary(min_size=8, max_size=8))
def test_item_round_trip_toy(data, chunk_size, nonce_seed):
    key = item_key(data)
    chunks = encrypt_item(data, key, nonce_seed, chunk_size, TOY)
    assert len({c.nonce for c in chunks}) == len(chunks)
    assert decrypt_item(list(reversed(chunks)), key, TOY) == data


@given(st.binary(max_size=3000), st.integers(1, 900))
def test_item_round_trip_rsa_aes(data, chunk_size):
    key = item_key(data)
    chunks = encrypt_item(data, key, b"\x09" * 8, chunk_size, RSA)
    assert decrypt_item(chunks, key, RSA) == data


class CountingProvider:
    """Wraps a provider and counts decryptions."""

    def __init__(self, inner):
        self.inner = inner
        self.opened = 0

    def open(self, *args):
        self.opened += 1
        return self.inner.open(*args)

    def __getattr__(self, name):
        return getattr(self.inner, name)


def test_decrypt_verified_round_trip():
    data = b"q" * 100
    key = item_key(data)
    chunks = encrypt_item(data, key, b"\x01" * 8, 30, TOY)
    assert decrypt_verified(chunks[::-1], [c.chunk_digest for c in chunks], key, TOY) == data


@pytest.mark.parametrize("damage", ["flip", "drop", "swap"])
def test_decrypt_verified_rejects_before_decrypting(damage):
    data = b"q" * 100
    key = item_key(data)
    chunks = encrypt_item(data, key, b"\x01" * 8, 30, TOY)
    committed = [c.chunk_digest for c in chunks]
    if damage == "flip":
        chunks[2] = replace(chunks[2], ciphertext=b"\x00" + chunks[2].ciphertext[1:])
    elif damage == "drop":
        chunks.pop()
    else:
        committed[0], committed[1] = committed[1], committed[0]
    counting = CountingProvider(TOY)
    with pytest.raises(ChunkVerificationFailure):
        decrypt_verified(chunks, committed, key, counting)
    assert counting.opened == 0
