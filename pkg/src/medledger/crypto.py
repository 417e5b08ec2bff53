"""Hashing, authenticated symmetric encryption and secp256k1 signatures.

All entropy is drawn through an injectable ``Entropy`` callable (``n -> n
random bytes``) so simulations can be replayed bit-for-bit from a seed.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

Entropy = Callable[[int], bytes]

# secp256k1 group order
CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
HALF_ORDER = CURVE_ORDER // 2

DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 33
SIGNATURE_SIZE = 64
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16

_CURVE = ec.SECP256K1()
_DETERMINISTIC = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
_VERIFY = ec.ECDSA(hashes.SHA256())


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext failed authentication: tampered data or wrong key."""


def default_entropy(n: int) -> bytes:
    return os.urandom(n)


class Digest(bytes):
    """A 32-byte SHA-256 value."""

    def __new__(cls, value: bytes) -> "Digest":
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}…)"

    def __str__(self) -> str:
        return self.hex()


ZERO_DIGEST = Digest(bytes(DIGEST_SIZE))


class Signature(bytes):
    """Compact ``r || s`` ECDSA signature, 64 bytes."""

    def __new__(cls, value: bytes) -> "Signature":
        if len(value) != SIGNATURE_SIZE:
            raise ValueError(f"signature must be {SIGNATURE_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "Signature":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"Signature({self.hex()[:16]}…)"


class SymmetricKey(bytes):
    def __new__(cls, value: bytes) -> "SymmetricKey":
        if len(value) != KEY_SIZE:
            raise ValueError(f"symmetric key must be {KEY_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "SymmetricKey":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        # never print key material
        return "SymmetricKey(<redacted>)"


@dataclass(frozen=True)
class Ciphertext:
    """AES-256-GCM output. Serialized as ``nonce || body || tag``."""

    nonce: bytes
    body: bytes
    auth_tag: bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_SIZE:
            raise ValueError("nonce must be 12 bytes")
        if len(self.auth_tag) != TAG_SIZE:
            raise ValueError("auth tag must be 16 bytes")

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        if len(data) < NONCE_SIZE + TAG_SIZE:
            raise ValueError("ciphertext too short")
        return cls(
            nonce=bytes(data[:NONCE_SIZE]),
            body=bytes(data[NONCE_SIZE:-TAG_SIZE]),
            auth_tag=bytes(data[-TAG_SIZE:]),
        )

    def digest(self) -> Digest:
        return hash(self.to_bytes())


def hash(data: bytes) -> Digest:  # noqa: A001 - deliberate domain name
    """SHA-256 of ``data``."""
    return Digest(hashlib.sha256(data).digest())


class SigningIdentity:
    """A secp256k1 key pair. The compressed public key is the network address."""

    __slots__ = ("_private", "public_key")

    def __init__(self, secret_key: bytes) -> None:
        scalar = int.from_bytes(secret_key, "big")
        if len(secret_key) != 32 or not 1 <= scalar < CURVE_ORDER:
            raise ValueError("secret key must be a 32-byte scalar in [1, n-1]")
        self._private = ec.derive_private_key(scalar, _CURVE)
        self.public_key: bytes = self._private.public_key().public_bytes(
            Encoding.X962, PublicFormat.CompressedPoint
        )

    @property
    def secret_key(self) -> bytes:
        return self._private.private_numbers().private_value.to_bytes(32, "big")

    @property
    def address(self) -> bytes:
        return self.public_key

    def __repr__(self) -> str:
        return f"SigningIdentity({self.public_key.hex()[:16]}…)"


def gen_signing_identity(entropy: Entropy = default_entropy) -> SigningIdentity:
    while True:
        candidate = entropy(32)
        if 1 <= int.from_bytes(candidate, "big") < CURVE_ORDER:
            return SigningIdentity(candidate)


def sign(identity: SigningIdentity, message: bytes) -> Signature:
    """Deterministic (RFC 6979) ECDSA over SHA-256(message), low-s normalized."""
    der = identity._private.sign(message, _DETERMINISTIC)
    r, s = decode_dss_signature(der)
    if s > HALF_ORDER:
        s = CURVE_ORDER - s
    return Signature(r.to_bytes(32, "big") + s.to_bytes(32, "big"))


@lru_cache(maxsize=4096)
def _load_public_key(public_key: bytes) -> ec.EllipticCurvePublicKey | None:
    if len(public_key) != PUBLIC_KEY_SIZE or public_key[0] not in (2, 3):
        return None
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, public_key)
    except ValueError:
        return None


def is_valid_public_key(public_key: bytes) -> bool:
    return _load_public_key(bytes(public_key)) is not None


# Verification is pure, so replicas sharing a process reuse each other's work.
@lru_cache(maxsize=1 << 16)
def _verify_cached(public_key: bytes, message: bytes, sig: bytes) -> bool:
    key = _load_public_key(public_key)
    if key is None or len(sig) != SIGNATURE_SIZE:
        return False
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if not (1 <= r < CURVE_ORDER and 1 <= s <= HALF_ORDER):
        return False
    try:
        key.verify(encode_dss_signature(r, s), message, _VERIFY)
    except InvalidSignature:
        return False
    return True


def verify(public_key: bytes, message: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a canonical signature of ``message`` under ``public_key``.

    Malformed keys or signatures yield ``False``; this never raises.
    """
    try:
        return _verify_cached(bytes(public_key), bytes(message), bytes(sig))
    except TypeError:
        return False


def gen_symmetric_key(entropy: Entropy = default_entropy) -> SymmetricKey:
    return SymmetricKey(entropy(KEY_SIZE))


def encrypt(key: SymmetricKey, plaintext: bytes, nonce: bytes) -> Ciphertext:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 bytes")
    sealed = AESGCM(bytes(key)).encrypt(nonce, plaintext, None)
    return Ciphertext(nonce=bytes(nonce), body=sealed[:-TAG_SIZE], auth_tag=sealed[-TAG_SIZE:])


def decrypt(key: SymmetricKey, ct: Ciphertext) -> bytes:
    try:
        return AESGCM(bytes(key)).decrypt(ct.nonce, ct.body + ct.auth_tag, None)
    except InvalidTag:
        raise AuthenticationError("ciphertext failed authentication") from None
