"""Concrete cryptographic suite used by every party.

Contracts, not constructions: a collision-resistant hash, an unforgeable
signature, and a public-key envelope whose decryption fails on any
tampering. The concrete suite is SHA-256, Ed25519, and
X25519 + HKDF-SHA256 + AES-256-GCM; raw 32-byte keys throughout so key
material round-trips through flat files and wire messages unchanged.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptionError

DIGEST_LEN = 32
SIGNATURE_LEN = 64
KEY_LEN = 32
NONCE_LEN = 12
SALT_LEN = 16

_ENVELOPE_INFO = b"psfe envelope v1"


def hash_bytes(data: bytes) -> bytes:
    """32-byte SHA-256 digest."""
    return hashlib.sha256(data).digest()


def fingerprint(verification_key: bytes) -> str:
    """Stable hex identifier for a party's verification key."""
    return hash_bytes(verification_key).hex()


@dataclass(frozen=True)
class SigningKeyPair:
    signing_key: bytes  # 32-byte Ed25519 seed, secret
    verification_key: bytes  # 32-byte public


@dataclass(frozen=True)
class EncryptionKeyPair:
    decryption_key: bytes  # 32-byte X25519 scalar, secret
    public_key: bytes  # 32-byte public


def gen_party_keys(rng=None) -> tuple[EncryptionKeyPair, SigningKeyPair]:
    """Fresh encryption and signing key pairs for one party.

    An explicit rng yields deterministic keys for tests; the default draws
    from the OS entropy source.
    """
    if rng is None:
        enc_seed = secrets.token_bytes(KEY_LEN)
        sig_seed = secrets.token_bytes(KEY_LEN)
    else:
        enc_seed = rng.randbytes(KEY_LEN)
        sig_seed = rng.randbytes(KEY_LEN)
    enc_priv = X25519PrivateKey.from_private_bytes(enc_seed)
    sig_priv = Ed25519PrivateKey.from_private_bytes(sig_seed)
    return (
        EncryptionKeyPair(enc_seed, enc_priv.public_key().public_bytes_raw()),
        SigningKeyPair(sig_seed, sig_priv.public_key().public_bytes_raw()),
    )


def sign(signing_key: bytes, data: bytes) -> bytes:
    """Ed25519 signature (64 bytes) over data."""
    return Ed25519PrivateKey.from_private_bytes(signing_key).sign(data)


def verify(verification_key: bytes, data: bytes, signature: bytes) -> bool:
    """True iff signature was produced over exactly data by the matching key."""
    try:
        Ed25519PublicKey.from_public_bytes(verification_key).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class Envelope:
    """Hybrid public-key ciphertext: any bit flip makes decryption fail."""

    ephemeral_public: bytes  # 32
    nonce: bytes  # 12
    ciphertext: bytes  # payload + 16-byte GCM tag

    def to_bytes(self) -> bytes:
        return self.ephemeral_public + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        if len(data) < KEY_LEN + NONCE_LEN + 16:
            raise DecryptionError("envelope too short")
        return cls(
            ephemeral_public=data[:KEY_LEN],
            nonce=data[KEY_LEN : KEY_LEN + NONCE_LEN],
            ciphertext=data[KEY_LEN + NONCE_LEN :],
        )


def _envelope_key(shared: bytes, ephemeral_public: bytes, recipient_public: bytes) -> bytes:
    return HKDF(
        algorithm=SHA256(),
        length=32,
        salt=None,
        info=_ENVELOPE_INFO + ephemeral_public + recipient_public,
    ).derive(shared)


def pk_encrypt(recipient_public: bytes, data: bytes) -> Envelope:
    """Encrypt to the holder of the matching decryption key."""
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_public))
    key = _envelope_key(shared, eph_pub, recipient_public)
    nonce = secrets.token_bytes(NONCE_LEN)
    ciphertext = AESGCM(key).encrypt(nonce, data, None)
    return Envelope(eph_pub, nonce, ciphertext)


def pk_decrypt(decryption_key: bytes, envelope: Envelope) -> bytes:
    """Open an envelope; raises DecryptionError on any tampering or wrong key."""
    try:
        own = X25519PrivateKey.from_private_bytes(decryption_key)
        shared = own.exchange(
            X25519PublicKey.from_public_bytes(envelope.ephemeral_public)
        )
        recipient_public = own.public_key().public_bytes_raw()
        key = _envelope_key(shared, envelope.ephemeral_public, recipient_public)
        return AESGCM(key).decrypt(envelope.nonce, envelope.ciphertext, None)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionError(f"envelope failed to open: {exc}") from exc
