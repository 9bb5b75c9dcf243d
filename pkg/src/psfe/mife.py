"""Symmetric multi-input functional encryption for sums.

Encryption is additive masking in Z_q with q = 2**64: every slot i holds
an independent uniform key k_i, a ciphertext is x_i + k_i (mod q), and the
functional key for a slot subset is the sum of its keys, so decryption
reveals the plaintext sum and nothing else. Each key must mask at most one
ciphertext; the dataset layer enforces this by drawing a fresh key per cell.

Plaintexts are contract-bounded to |x| < 2**32 and subsets to at most 2**16
slots so true sums never wrap under the centered interpretation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

Q = 1 << 64
_MASK = Q - 1
_HALF = 1 << 63

PLAINTEXT_BOUND = 1 << 32
MAX_SLOTS = 1 << 16


def wrap(value: int) -> int:
    """Reduce an integer into [0, 2**64)."""
    return value & _MASK


def centered(value: int) -> int:
    """Signed interpretation of a group element, in [-2**63, 2**63)."""
    value &= _MASK
    return value - Q if value >= _HALF else value


def encode_u64(value: int) -> bytes:
    """Group element as 8 bytes little-endian."""
    return struct.pack("<Q", value & _MASK)


def decode_u64(data: bytes) -> int:
    if len(data) != 8:
        raise ValueError(f"expected 8 bytes, got {len(data)}")
    return struct.unpack("<Q", data)[0]


@dataclass(frozen=True)
class KeyVector:
    """Master key: one uniform group element per slot, fixed length."""

    keys: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.keys)

    def key(self, i: int) -> int:
        """Key at 1-based slot i."""
        if not 1 <= i <= len(self.keys):
            raise IndexError(f"slot {i} out of range 1..{len(self.keys)}")
        return self.keys[i - 1]

    def to_bytes(self) -> bytes:
        return struct.pack("<I", len(self.keys)) + b"".join(
            encode_u64(k) for k in self.keys
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyVector":
        if len(data) < 4:
            raise ValueError("truncated key vector")
        (n,) = struct.unpack("<I", data[:4])
        if len(data) != 4 + 8 * n:
            raise ValueError("key vector length mismatch")
        return cls(tuple(decode_u64(data[4 + 8 * i : 12 + 8 * i]) for i in range(n)))


@dataclass(frozen=True)
class Ciphertext:
    """Masked value for one slot: body = x_i + k_i (mod q)."""

    index: int
    body: int


@dataclass(frozen=True)
class FunctionalKey:
    """Sum of the keys over ``covered_indices`` (mod q)."""

    body: int
    covered_indices: frozenset[int]


def setup(n: int, rng) -> KeyVector:
    """Sample a fresh n-slot master key, each slot uniform in Z_q."""
    if n < 1:
        raise ValueError(f"slot count must be >= 1, got {n}")
    return KeyVector(tuple(rng.getrandbits(64) for _ in range(n)))


def encrypt(master: KeyVector, i: int, x: int) -> Ciphertext:
    """Mask plaintext x into slot i: body = x + k_i (mod q)."""
    return Ciphertext(index=i, body=wrap(x + master.key(i)))


def keygen(master: KeyVector, subset: Iterable[int]) -> FunctionalKey:
    """Functional key for the sum over a nonempty slot subset."""
    covered = frozenset(subset)
    if not covered:
        raise ValueError("key subset must be nonempty")
    body = 0
    for i in covered:
        body += master.key(i)
    return FunctionalKey(body=wrap(body), covered_indices=covered)


def combine_keys(keys: Iterable[int]) -> int:
    """Sum of arbitrary key material (mod q): the per-query functional key body."""
    return wrap(sum(keys))


def decrypt(fk: FunctionalKey, ciphertexts: Sequence[Ciphertext]) -> int:
    """Recover the centered plaintext sum over the covered slots.

    The ciphertext index set must equal the key's covered set, with no
    duplicates: reusing a slot would reuse its key.
    """
    indices = [ct.index for ct in ciphertexts]
    if len(set(indices)) != len(indices) or set(indices) != fk.covered_indices:
        raise KeyCiphertextMismatch(
            f"ciphertext slots {sorted(indices)} do not match "
            f"key coverage {sorted(fk.covered_indices)}"
        )
    total = 0
    for ct in ciphertexts:
        total += ct.body
    return centered(total - fk.body)


class KeyCiphertextMismatch(ValueError):
    """Ciphertext slots do not match the functional key's coverage."""
