"""Hybrid encryption: content hashing, chunking, chunk encryption and key wrapping.

Two interchangeable providers implement the primitives:

``RsaAesProvider``
    RSA-2048 keys derived deterministically from a 32-byte seed, AES-256-GCM
    for chunks, RSA-KEM with AES key wrap (RFC 5990 style) for per-recipient
    envelopes and RSASSA-PKCS1-v1_5/SHA-256 for signatures. All operations are
    deterministic once the caller supplies the randomness, which keeps
    simulation logs reproducible.

``ToyProvider``
    A fast stand-in built from SHA-256, HMAC, X25519 and Ed25519. Its symmetric
    cipher is a hash-counter keystream and is only meant for golden vectors and
    quick tests.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import os
import random
from dataclasses import dataclass
from typing import Protocol, Sequence

import gmpy2
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.keywrap import InvalidUnwrap, aes_key_unwrap, aes_key_wrap

from .encoding import Address, Digest, Reader, Writer, sha256, u64
from .errors import AuthenticationFailure, BadChunkSize, ChunkVerificationFailure, NonceReuse, UnwrapFailure

DEFAULT_CHUNK_SIZE = 4096
NONCE_SIZE = 12
KEY_SIZE = 32


@dataclass(frozen=True)
class AsymmetricKeypair:
    public_key: bytes
    private_key: bytes
    owner_addr: Address

    def __repr__(self) -> str:
        return f"AsymmetricKeypair(owner_addr={self.owner_addr})"


@dataclass(frozen=True)
class SymmetricKey:
    key_bytes: bytes
    item_id: Digest

    def __post_init__(self) -> None:
        if len(self.key_bytes) != KEY_SIZE:
            raise ValueError("symmetric keys are 32 bytes")

    def __repr__(self) -> str:
        return f"SymmetricKey(item_id={self.item_id.hex()[:16]}…)"


@dataclass(frozen=True)
class CipherChunk:
    index: int
    nonce: bytes
    ciphertext: bytes
    chunk_digest: Digest

    def encode(self) -> bytes:
        """Byte layout: u64 index, u32-prefixed nonce, then the ciphertext to the end."""
        return encode_chunk_body(self.index, self.nonce, self.ciphertext)

    @classmethod
    def decode(cls, data: bytes) -> "CipherChunk":
        reader = Reader(data)
        index = reader.uint()
        nonce = reader.blob()
        ciphertext = data[8 + 4 + len(nonce):]
        return cls(index, nonce, ciphertext, sha256(data))

    def digest_matches(self) -> bool:
        return chunk_digest(self.index, self.nonce, self.ciphertext) == self.chunk_digest


@dataclass(frozen=True)
class WrappedKey:
    recipient: Address
    envelope: bytes
    item_id: Digest

    def encode(self) -> bytes:
        return Writer().raw(self.recipient).raw(self.item_id).blob(self.envelope).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "WrappedKey":
        reader = Reader(data)
        recipient = Address(reader.raw(Address.SIZE))
        item_id = Digest(reader.raw(Digest.SIZE))
        envelope = reader.blob()
        reader.expect_end()
        return cls(recipient, envelope, item_id)


def encode_chunk_body(index: int, nonce: bytes, ciphertext: bytes) -> bytes:
    return Writer().uint(index).blob(nonce).raw(ciphertext).getvalue()


def chunk_digest(index: int, nonce: bytes, ciphertext: bytes) -> Digest:
    return sha256(encode_chunk_body(index, nonce, ciphertext))


def _aad(item_id: Digest, index: int) -> bytes:
    return bytes(item_id) + u64(index)


class CryptoProvider(Protocol):
    name: str

    def generate_keypair(self, seed: bytes) -> AsymmetricKeypair: ...

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes: ...

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes: ...

    def wrap(self, key: bytes, recipient_pub: bytes, context: bytes, entropy: bytes) -> bytes: ...

    def unwrap(self, envelope: bytes, private_key: bytes, context: bytes) -> bytes: ...

    def sign(self, private_key: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool: ...


# --------------------------------------------------------------------------- RSA / AES


_RSA_E = 65537
_RSA_BITS = 2048


def _seeded_prime(seed: bytes, label: bytes, bits: int) -> int:
    counter = 0
    while True:
        raw = hashlib.shake_256(b"datashare/rsa/" + label + seed + u64(counter)).digest(bits // 8)
        # top two bits set so that p*q has exactly 2*bits bits
        candidate = int.from_bytes(raw, "big") | (3 << (bits - 2)) | 1
        prime = int(gmpy2.next_prime(candidate))
        if prime.bit_length() == bits and gmpy2.gcd(prime - 1, _RSA_E) == 1:
            return prime
        counter += 1


@functools.lru_cache(maxsize=256)
def _rsa_keygen(seed: bytes) -> tuple[bytes, bytes]:
    half = _RSA_BITS // 2
    p = _seeded_prime(seed, b"p", half)
    q = _seeded_prime(seed, b"q", half)
    if p == q:  # pragma: no cover - astronomically unlikely
        q = int(gmpy2.next_prime(q))
    n = p * q
    d = pow(_RSA_E, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(_RSA_E, n),
    )
    key = numbers.private_key()
    private = key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    public = key.public_key().public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return public, private


@functools.lru_cache(maxsize=512)
def _load_rsa_private(private_der: bytes) -> rsa.RSAPrivateKey:
    key = serialization.load_der_private_key(private_der, password=None)
    if not isinstance(key, rsa.RSAPrivateKey):
        raise UnwrapFailure("not an RSA private key")
    return key


@functools.lru_cache(maxsize=512)
def _load_rsa_public(public_der: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_der_public_key(public_der)
    if not isinstance(key, rsa.RSAPublicKey):
        raise ValueError("not an RSA public key")
    return key


class RsaAesProvider:
    name = "rsa-aes"

    def generate_keypair(self, seed: bytes) -> AsymmetricKeypair:
        public, private = _rsa_keygen(bytes(seed))
        return AsymmetricKeypair(public, private, Address.derive(public))

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
        return AESGCM(key).encrypt(nonce, plaintext, aad)

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
        try:
            return AESGCM(key).decrypt(nonce, ciphertext, aad)
        except InvalidTag as exc:
            raise AuthenticationFailure("chunk failed authentication") from exc

    def wrap(self, key: bytes, recipient_pub: bytes, context: bytes, entropy: bytes) -> bytes:
        pub = _load_rsa_public(recipient_pub).public_numbers()
        size = (pub.n.bit_length() + 7) // 8
        # RSA-KEM: encapsulate a uniformly chosen r < n, derive the KEK from r
        stream = hashlib.shake_256(b"datashare/rsa-kem/r" + entropy)
        r = int.from_bytes(stream.digest(size + 16), "big") % (pub.n - 3) + 2
        c = pow(r, pub.e, pub.n)
        kek = sha256(b"datashare/rsa-kem/kek", r.to_bytes(size, "big"), context)
        return c.to_bytes(size, "big") + aes_key_wrap(kek, key)

    def unwrap(self, envelope: bytes, private_key: bytes, context: bytes) -> bytes:
        try:
            priv = _load_rsa_private(private_key).private_numbers()
        except (ValueError, TypeError) as exc:
            raise UnwrapFailure("unreadable private key") from exc
        n = priv.public_numbers.n
        size = (n.bit_length() + 7) // 8
        if len(envelope) != size + KEY_SIZE + 8:
            raise UnwrapFailure("envelope size does not match this key")
        c = int.from_bytes(envelope[:size], "big")
        if c >= n:
            raise UnwrapFailure("envelope not addressed to this key")
        r = int(gmpy2.powmod(c, priv.d, n))
        kek = sha256(b"datashare/rsa-kem/kek", r.to_bytes(size, "big"), context)
        try:
            return aes_key_unwrap(kek, envelope[size:])
        except InvalidUnwrap as exc:
            raise UnwrapFailure("envelope not addressed to this key") from exc

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        return _load_rsa_private(private_key).sign(message, padding.PKCS1v15(), hashes.SHA256())

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        try:
            _load_rsa_public(public_key).verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
        except (InvalidSignature, ValueError):
            return False
        return True


# --------------------------------------------------------------------------- toy


class ToyProvider:
    name = "toy"

    _TAG = 16

    @staticmethod
    def _keystream(key: bytes, nonce: bytes, length: int) -> bytes:
        blocks = []
        for counter in range((length + 31) // 32):
            blocks.append(hashlib.sha256(b"toy/ks" + key + nonce + u64(counter)).digest())
        return b"".join(blocks)[:length]

    def _tag(self, key: bytes, nonce: bytes, aad: bytes, body: bytes) -> bytes:
        mac_key = hashlib.sha256(b"toy/mac" + key).digest()
        msg = Writer().blob(nonce).blob(aad).blob(body).getvalue()
        return hmac.new(mac_key, msg, hashlib.sha256).digest()[: self._TAG]

    def generate_keypair(self, seed: bytes) -> AsymmetricKeypair:
        seed = bytes(seed)
        dh = x25519.X25519PrivateKey.from_private_bytes(seed)
        signer = ed25519.Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"toy/sign" + seed).digest())
        raw = serialization.Encoding.Raw, serialization.PublicFormat.Raw
        public = dh.public_key().public_bytes(*raw) + signer.public_key().public_bytes(*raw)
        return AsymmetricKeypair(public, seed, Address.derive(public))

    def seal(self, key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
        body = bytes(a ^ b for a, b in zip(plaintext, self._keystream(key, nonce, len(plaintext))))
        return body + self._tag(key, nonce, aad, body)

    def open(self, key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
        if len(ciphertext) < self._TAG:
            raise AuthenticationFailure("ciphertext shorter than tag")
        body, tag = ciphertext[: -self._TAG], ciphertext[-self._TAG:]
        if not hmac.compare_digest(tag, self._tag(key, nonce, aad, body)):
            raise AuthenticationFailure("chunk failed authentication")
        return bytes(a ^ b for a, b in zip(body, self._keystream(key, nonce, len(body))))

    def wrap(self, key: bytes, recipient_pub: bytes, context: bytes, entropy: bytes) -> bytes:
        eph = x25519.X25519PrivateKey.from_private_bytes(hashlib.sha256(b"toy/eph" + entropy).digest())
        eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(recipient_pub[:32]))
        kek = hashlib.sha256(b"toy/kek" + shared + eph_pub + context).digest()
        return eph_pub + self.seal(kek, bytes(NONCE_SIZE), key, context)

    def unwrap(self, envelope: bytes, private_key: bytes, context: bytes) -> bytes:
        if len(envelope) != 32 + KEY_SIZE + self._TAG or len(private_key) != 32:
            raise UnwrapFailure("malformed envelope or key")
        eph_pub = envelope[:32]
        priv = x25519.X25519PrivateKey.from_private_bytes(private_key)
        shared = priv.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pub))
        kek = hashlib.sha256(b"toy/kek" + shared + eph_pub + context).digest()
        try:
            return self.open(kek, bytes(NONCE_SIZE), envelope[32:], context)
        except AuthenticationFailure as exc:
            raise UnwrapFailure("envelope not addressed to this key") from exc

    def sign(self, private_key: bytes, message: bytes) -> bytes:
        signer = ed25519.Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"toy/sign" + private_key).digest())
        return signer.sign(message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        if len(public_key) != 64:
            return False
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public_key[32:]).verify(signature, message)
        except InvalidSignature:
            return False
        return True


PROVIDERS: dict[str, CryptoProvider] = {
    RsaAesProvider.name: RsaAesProvider(),
    ToyProvider.name: ToyProvider(),
}
DEFAULT_PROVIDER: CryptoProvider = PROVIDERS[RsaAesProvider.name]


def get_provider(name: str) -> CryptoProvider:
    try:
        return PROVIDERS[name]
    except KeyError:
        raise ValueError(f"unknown crypto provider {name!r}; choose from {sorted(PROVIDERS)}") from None


# --------------------------------------------------------------------------- operations


def generate_keypair(seed: bytes, provider: CryptoProvider = DEFAULT_PROVIDER) -> AsymmetricKeypair:
    if len(seed) != 32:
        raise ValueError("keypair seeds are 32 bytes")
    return provider.generate_keypair(seed)


def content_hash(data: bytes) -> Digest:
    return sha256(data)


def chunk_data(data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[bytes]:
    if chunk_size < 1:
        raise BadChunkSize(f"chunk size must be >= 1, got {chunk_size}")
    if not data:
        return [b""]
    return [data[i:i + chunk_size] for i in range(0, len(data), chunk_size)]


def make_nonce(nonce_seed: bytes, index: int) -> bytes:
    """Per-chunk nonce: 8-byte item seed followed by the 4-byte big-endian chunk index."""
    if len(nonce_seed) != 8:
        raise ValueError("nonce seed is 8 bytes")
    return nonce_seed + index.to_bytes(4, "big")


def sym_encrypt_chunk(
    segment: bytes,
    key: SymmetricKey,
    index: int,
    nonce: bytes,
    *,
    seen_nonces: set[bytes] | None = None,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> CipherChunk:
    if seen_nonces is not None:
        if nonce in seen_nonces:
            raise NonceReuse(f"nonce {nonce.hex()} already used with this key")
        seen_nonces.add(nonce)
    ciphertext = provider.seal(key.key_bytes, nonce, segment, _aad(key.item_id, index))
    return CipherChunk(index, nonce, ciphertext, chunk_digest(index, nonce, ciphertext))


def sym_decrypt_chunk(
    chunk: CipherChunk, key: SymmetricKey, provider: CryptoProvider = DEFAULT_PROVIDER
) -> bytes:
    return provider.open(key.key_bytes, chunk.nonce, chunk.ciphertext, _aad(key.item_id, chunk.index))


def wrap_key(
    key: SymmetricKey,
    recipient_pub: bytes,
    recipient: Address,
    *,
    rng: random.Random | None = None,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> WrappedKey:
    entropy = rng.randbytes(32) if rng is not None else os.urandom(32)
    envelope = provider.wrap(key.key_bytes, recipient_pub, bytes(key.item_id), entropy)
    return WrappedKey(recipient, envelope, key.item_id)


def unwrap_key(
    wrapped: WrappedKey, private_key: bytes, provider: CryptoProvider = DEFAULT_PROVIDER
) -> SymmetricKey:
    key_bytes = provider.unwrap(wrapped.envelope, private_key, bytes(wrapped.item_id))
    return SymmetricKey(key_bytes, wrapped.item_id)


def reassemble(segments: Sequence[bytes]) -> bytes:
    return b"".join(segments)


def encrypt_item(
    data: bytes,
    key: SymmetricKey,
    nonce_seed: bytes,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> list[CipherChunk]:
    """Chunk and encrypt a whole item with nonces derived from ``nonce_seed``."""
    seen: set[bytes] = set()
    return [
        sym_encrypt_chunk(segment, key, i, make_nonce(nonce_seed, i), seen_nonces=seen, provider=provider)
        for i, segment in enumerate(chunk_data(data, chunk_size))
    ]


def decrypt_item(
    chunks: Sequence[CipherChunk], key: SymmetricKey, provider: CryptoProvider = DEFAULT_PROVIDER
) -> bytes:
    ordered = sorted(chunks, key=lambda c: c.index)
    return reassemble([sym_decrypt_chunk(c, key, provider) for c in ordered])


def decrypt_verified(
    chunks: Sequence[CipherChunk],
    committed: Sequence[Digest],
    key: SymmetricKey,
    provider: CryptoProvider = DEFAULT_PROVIDER,
) -> bytes:
    """Decrypt an item only after every chunk matches its committed digest.

    ``committed`` lists the chunk digests in index order. Nothing is
    decrypted if any chunk is missing, misplaced or altered.
    """
    if len(chunks) != len(committed):
        raise ChunkVerificationFailure(f"expected {len(committed)} chunks, got {len(chunks)}")
    ordered = sorted(chunks, key=lambda c: c.index)
    for position, (chunk, digest) in enumerate(zip(ordered, committed)):
        if chunk.index != position or sha256(chunk.encode()) != digest:
            raise ChunkVerificationFailure(f"chunk {position} does not match its committed digest")
    return reassemble([sym_decrypt_chunk(c, key, provider) for c in ordered])
