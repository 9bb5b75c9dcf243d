"""Canonical message encoding, signing and verification.

Every protocol message is (kind, timestamp, payload fields, signature).
The canonical byte form is: 1 kind byte, 8-byte little-endian millisecond
timestamp, then each payload field as a 4-byte little-endian length prefix
plus raw bytes, in declared order. The signature is Ed25519 over the
SHA-256 digest of exactly those bytes and travels appended to them, so two
structurally equal messages are byte-identical and any single-byte change
anywhere is detectable.

Verification enforces, in order: expected kind, freshness within the
window, signature under the declared sender's key, payload well-formedness,
and no signature reuse within twice the window.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Sequence, Union

from .crypto import SIGNATURE_LEN, hash_bytes, sign, verify
from .dataset import NumericCell
from .errors import (
    BadSignatureError,
    EncodingError,
    KindMismatchError,
    ReplayError,
    StaleTimestampError,
)
from .mife import decode_u64, encode_u64

DEFAULT_WINDOW_MS = 30_000
QUERY_ID_LEN = 16
_HEADER_LEN = 9  # kind byte + timestamp

Clock = Callable[[], int]  # milliseconds since the Unix epoch


def system_clock() -> int:
    import time

    return time.time_ns() // 1_000_000


class MessageKind(IntEnum):
    SETUP_DATASET = 1  # curator -> storage: encrypted dataset envelope
    SETUP_LISTS = 2  # curator -> authority: salt/key map bundle envelope
    SETUP_DATASET_ACK = 3  # storage -> curator: digest of stored dataset
    SETUP_LISTS_ACK = 4  # authority -> curator: digest of stored bundle
    QUERY_TOKEN = 5  # analyst -> authority: hashed search terms + function
    SALTED_TERMS = 6  # authority -> storage: resolved salted digests
    QUERY_RESULT = 7  # storage -> analyst: matching masked cells
    KEY_INDICES = 8  # storage -> authority: key indices of the result
    NOISY_KEY = 9  # authority -> analyst: noise-blinded functional key
    ERROR_NOTICE = 10  # signed refusal / no-results notice


class FnKind(IntEnum):
    SUM = 1
    AVG = 2


class ErrorCode(IntEnum):
    NO_RESULTS = 1
    BUDGET_EXHAUSTED = 2
    PROTOCOL_STATE = 3
    DUPLICATE_SETUP = 4
    VERIFICATION_FAILED = 5
    DECRYPTION_FAILED = 6


def _require(condition: bool, what: str) -> None:
    if not condition:
        raise EncodingError(what)


@dataclass(frozen=True)
class DatasetSetup:
    kind = MessageKind.SETUP_DATASET
    envelope: bytes

    def fields(self) -> list[bytes]:
        _require(len(self.envelope) > 0, "empty dataset envelope")
        return [self.envelope]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "DatasetSetup":
        _require(len(fields) == 1, "dataset setup takes one field")
        return cls(envelope=fields[0])


@dataclass(frozen=True)
class ListsSetup:
    kind = MessageKind.SETUP_LISTS
    envelope: bytes

    def fields(self) -> list[bytes]:
        _require(len(self.envelope) > 0, "empty lists envelope")
        return [self.envelope]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "ListsSetup":
        _require(len(fields) == 1, "lists setup takes one field")
        return cls(envelope=fields[0])


@dataclass(frozen=True)
class DatasetAck:
    kind = MessageKind.SETUP_DATASET_ACK
    digest: bytes

    def fields(self) -> list[bytes]:
        _require(len(self.digest) == 32, "ack digest must be 32 bytes")
        return [self.digest]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "DatasetAck":
        _require(len(fields) == 1 and len(fields[0]) == 32, "bad dataset ack")
        return cls(digest=fields[0])


@dataclass(frozen=True)
class ListsAck:
    kind = MessageKind.SETUP_LISTS_ACK
    digest: bytes

    def fields(self) -> list[bytes]:
        _require(len(self.digest) == 32, "ack digest must be 32 bytes")
        return [self.digest]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "ListsAck":
        _require(len(fields) == 1 and len(fields[0]) == 32, "bad lists ack")
        return cls(digest=fields[0])


@dataclass(frozen=True)
class SearchToken:
    """Unsalted digests of the value and variable terms plus the function."""

    value_digest: bytes
    variable_digest: bytes
    fn: FnKind


@dataclass(frozen=True)
class TokenSubmit:
    kind = MessageKind.QUERY_TOKEN
    token: SearchToken

    def fields(self) -> list[bytes]:
        t = self.token
        _require(len(t.value_digest) == 32, "value digest must be 32 bytes")
        _require(len(t.variable_digest) == 32, "variable digest must be 32 bytes")
        _require(t.fn in (FnKind.SUM, FnKind.AVG), "missing function descriptor")
        return [t.value_digest, t.variable_digest, bytes([t.fn])]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "TokenSubmit":
        _require(len(fields) == 3, "token takes three fields")
        _require(len(fields[0]) == 32 and len(fields[1]) == 32, "bad term digest")
        _require(len(fields[2]) == 1, "bad function field")
        try:
            fn = FnKind(fields[2][0])
        except ValueError:
            raise EncodingError(f"unknown function {fields[2][0]}") from None
        return cls(token=SearchToken(fields[0], fields[1], fn))


def _digest_set_bytes(digests: Sequence[bytes]) -> bytes:
    for d in digests:
        _require(len(d) == 32, "digest must be 32 bytes")
    return b"".join(sorted(digests))


def _split_digests(data: bytes) -> tuple[bytes, ...]:
    _require(len(data) % 32 == 0, "digest set not a multiple of 32 bytes")
    return tuple(data[i : i + 32] for i in range(0, len(data), 32))


@dataclass(frozen=True)
class SaltedTerms:
    kind = MessageKind.SALTED_TERMS
    query_id: bytes
    analyst_id: bytes  # verification-key fingerprint, routes the result
    fn: FnKind  # forwarded so the storage server can sign it with the indices
    value_digests: tuple[bytes, ...]
    variable_digests: tuple[bytes, ...]

    def fields(self) -> list[bytes]:
        _require(len(self.query_id) == QUERY_ID_LEN, "bad query id")
        _require(len(self.analyst_id) == 32, "bad analyst id")
        _require(self.fn in (FnKind.SUM, FnKind.AVG), "missing function descriptor")
        return [
            self.query_id,
            self.analyst_id,
            bytes([self.fn]),
            _digest_set_bytes(self.value_digests),
            _digest_set_bytes(self.variable_digests),
        ]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "SaltedTerms":
        _require(len(fields) == 5, "salted terms take five fields")
        _require(len(fields[0]) == QUERY_ID_LEN, "bad query id")
        _require(len(fields[1]) == 32, "bad analyst id")
        _require(len(fields[2]) == 1, "bad function field")
        try:
            fn = FnKind(fields[2][0])
        except ValueError:
            raise EncodingError(f"unknown function {fields[2][0]}") from None
        return cls(
            query_id=fields[0],
            analyst_id=fields[1],
            fn=fn,
            value_digests=_split_digests(fields[3]),
            variable_digests=_split_digests(fields[4]),
        )


@dataclass(frozen=True)
class QueryResult:
    kind = MessageKind.QUERY_RESULT
    query_id: bytes
    cells: tuple[NumericCell, ...]  # masked value + key index, in row order

    def fields(self) -> list[bytes]:
        _require(len(self.query_id) == QUERY_ID_LEN, "bad query id")
        _require(len(self.cells) > 0, "result list must be nonempty")
        body = b"".join(
            encode_u64(c.masked) + c.key_index for c in self.cells
        )
        _require(all(len(c.key_index) == 32 for c in self.cells), "bad key index")
        return [self.query_id, body]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "QueryResult":
        _require(len(fields) == 2, "result takes two fields")
        _require(len(fields[0]) == QUERY_ID_LEN, "bad query id")
        data = fields[1]
        _require(len(data) > 0 and len(data) % 40 == 0, "bad result cells")
        cells = tuple(
            NumericCell(decode_u64(data[i : i + 8]), data[i + 8 : i + 40])
            for i in range(0, len(data), 40)
        )
        return cls(query_id=fields[0], cells=cells)


@dataclass(frozen=True)
class KeyIndices:
    kind = MessageKind.KEY_INDICES
    query_id: bytes
    indices: tuple[bytes, ...]  # same order as the result cells
    fn: FnKind

    def fields(self) -> list[bytes]:
        _require(len(self.query_id) == QUERY_ID_LEN, "bad query id")
        _require(len(self.indices) > 0, "index list must be nonempty")
        for d in self.indices:
            _require(len(d) == 32, "bad key index digest")
        _require(self.fn in (FnKind.SUM, FnKind.AVG), "missing function descriptor")
        return [self.query_id, b"".join(self.indices), bytes([self.fn])]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "KeyIndices":
        _require(len(fields) == 3, "key indices take three fields")
        _require(len(fields[0]) == QUERY_ID_LEN, "bad query id")
        _require(len(fields[1]) > 0 and len(fields[1]) % 32 == 0, "bad index list")
        _require(len(fields[2]) == 1, "bad function field")
        try:
            fn = FnKind(fields[2][0])
        except ValueError:
            raise EncodingError(f"unknown function {fields[2][0]}") from None
        indices = tuple(
            fields[1][i : i + 32] for i in range(0, len(fields[1]), 32)
        )
        return cls(query_id=fields[0], indices=indices, fn=fn)


@dataclass(frozen=True)
class NoisyKey:
    kind = MessageKind.NOISY_KEY
    query_id: bytes
    envelope: bytes  # encrypted (key body, epsilon, sensitivity) for the analyst

    def fields(self) -> list[bytes]:
        _require(len(self.query_id) == QUERY_ID_LEN, "bad query id")
        _require(len(self.envelope) > 0, "empty key envelope")
        return [self.query_id, self.envelope]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "NoisyKey":
        _require(len(fields) == 2, "noisy key takes two fields")
        _require(len(fields[0]) == QUERY_ID_LEN, "bad query id")
        return cls(query_id=fields[0], envelope=fields[1])


@dataclass(frozen=True)
class ErrorNotice:
    kind = MessageKind.ERROR_NOTICE
    query_id: bytes  # zeros when no query was registered
    code: ErrorCode
    detail: str = ""

    def fields(self) -> list[bytes]:
        _require(len(self.query_id) == QUERY_ID_LEN, "bad query id")
        return [self.query_id, bytes([self.code]), self.detail.encode("utf-8")]

    @classmethod
    def from_fields(cls, fields: list[bytes]) -> "ErrorNotice":
        _require(len(fields) == 3, "error notice takes three fields")
        _require(len(fields[0]) == QUERY_ID_LEN, "bad query id")
        _require(len(fields[1]) == 1, "bad error code")
        try:
            code = ErrorCode(fields[1][0])
        except ValueError:
            raise EncodingError(f"unknown error code {fields[1][0]}") from None
        try:
            detail = fields[2].decode("utf-8")
        except UnicodeDecodeError:
            raise EncodingError("error detail is not UTF-8") from None
        return cls(query_id=fields[0], code=code, detail=detail)


Payload = Union[
    DatasetSetup,
    ListsSetup,
    DatasetAck,
    ListsAck,
    TokenSubmit,
    SaltedTerms,
    QueryResult,
    KeyIndices,
    NoisyKey,
    ErrorNotice,
]

_PAYLOAD_TYPES = {
    MessageKind.SETUP_DATASET: DatasetSetup,
    MessageKind.SETUP_LISTS: ListsSetup,
    MessageKind.SETUP_DATASET_ACK: DatasetAck,
    MessageKind.SETUP_LISTS_ACK: ListsAck,
    MessageKind.QUERY_TOKEN: TokenSubmit,
    MessageKind.SALTED_TERMS: SaltedTerms,
    MessageKind.QUERY_RESULT: QueryResult,
    MessageKind.KEY_INDICES: KeyIndices,
    MessageKind.NOISY_KEY: NoisyKey,
    MessageKind.ERROR_NOTICE: ErrorNotice,
}


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    timestamp_ms: int
    payload: Payload
    signature: bytes


def encode_noisy_key(body: int, epsilon: float, sensitivity: float) -> bytes:
    """Plaintext carried inside the noisy-key envelope."""
    return struct.pack("<Qdd", body, epsilon, sensitivity)


def decode_noisy_key(data: bytes) -> tuple[int, float, float]:
    if len(data) != 24:
        raise EncodingError("bad noisy key payload")
    return struct.unpack("<Qdd", data)


def canonical_encode(kind: MessageKind, timestamp_ms: int, payload: Payload) -> bytes:
    """Deterministic unsigned byte form of a message."""
    if payload.kind != kind:
        raise EncodingError(f"payload is for kind {payload.kind}, not {kind}")
    if not 0 <= timestamp_ms < 1 << 64:
        raise EncodingError(f"timestamp {timestamp_ms} out of range")
    out = [bytes([kind]), struct.pack("<Q", timestamp_ms)]
    for field in payload.fields():
        out.append(struct.pack("<I", len(field)))
        out.append(field)
    return b"".join(out)


def _split_fields(data: bytes) -> list[bytes]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise EncodingError("truncated field length")
        (n,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        if pos + n > len(data):
            raise EncodingError("field runs past end of message")
        fields.append(data[pos : pos + n])
        pos += n
    return fields


def field_spans(frame_body: bytes) -> list[tuple[int, int]]:
    """(start, end) offsets of each payload field within a frame body.

    Layout knowledge only; anyone holding the bytes can compute this.
    """
    data = frame_body[_HEADER_LEN : len(frame_body) - SIGNATURE_LEN]
    spans = []
    pos = 0
    while pos < len(data):
        (n,) = struct.unpack("<I", data[pos : pos + 4])
        start = _HEADER_LEN + pos + 4
        spans.append((start, start + n))
        pos += 4 + n
    return spans


def decode_message(frame_body: bytes) -> ProtocolMessage:
    """Parse and structurally validate a signed frame body."""
    if len(frame_body) < _HEADER_LEN + SIGNATURE_LEN:
        raise EncodingError("frame too short")
    try:
        kind = MessageKind(frame_body[0])
    except ValueError:
        raise EncodingError(f"unknown message kind {frame_body[0]}") from None
    (timestamp_ms,) = struct.unpack("<Q", frame_body[1:_HEADER_LEN])
    signature = frame_body[-SIGNATURE_LEN:]
    fields = _split_fields(frame_body[_HEADER_LEN:-SIGNATURE_LEN])
    payload = _PAYLOAD_TYPES[kind].from_fields(fields)
    return ProtocolMessage(kind, timestamp_ms, payload, signature)


class ReplayCache:
    """Remembers accepted (sender, signature) pairs for twice the window."""

    def __init__(self, retention_ms: int = 2 * DEFAULT_WINDOW_MS):
        self.retention_ms = retention_ms
        self._seen: dict[bytes, int] = {}
        self._lock = threading.Lock()
        self._prune_floor = 1024

    def insert_if_absent(self, sender_vk: bytes, signature: bytes, now_ms: int) -> bool:
        """Record the pair; False if it was already recorded (a replay)."""
        key = sender_vk + signature
        with self._lock:
            if len(self._seen) >= self._prune_floor:
                cutoff = now_ms - self.retention_ms
                self._seen = {k: t for k, t in self._seen.items() if t >= cutoff}
                self._prune_floor = max(1024, 2 * len(self._seen))
            if key in self._seen:
                return False
            self._seen[key] = now_ms
            return True


class MessageBuilder:
    """Signs outgoing messages with a monotone per-sender timestamp."""

    def __init__(self, signing_key: bytes, clock: Clock = system_clock):
        self._signing_key = signing_key
        self._clock = clock
        self._last_ts = 0
        self._lock = threading.Lock()

    def build(self, payload: Payload) -> bytes:
        """Signed frame body for a payload, timestamped now."""
        with self._lock:
            ts = max(self._clock(), self._last_ts)
            self._last_ts = ts
        canonical = canonical_encode(payload.kind, ts, payload)
        signature = sign(self._signing_key, hash_bytes(canonical))
        return canonical + signature


def verify_frame(
    frame_body: bytes,
    expected_kind: MessageKind,
    sender_vks: Sequence[bytes],
    window_ms: int,
    cache: ReplayCache,
    now_ms: int,
) -> tuple[ProtocolMessage, bytes]:
    """Full inbound check; returns the message and the matching sender key.

    Raises KindMismatchError, StaleTimestampError, BadSignatureError,
    EncodingError or ReplayError; the caller logs the class and drops the
    message. Only fully accepted messages enter the replay cache.
    """
    if len(frame_body) < _HEADER_LEN + SIGNATURE_LEN:
        raise EncodingError("frame too short")
    if frame_body[0] != expected_kind:
        raise KindMismatchError(
            f"expected kind {int(expected_kind)}, got {frame_body[0]}"
        )
    (timestamp_ms,) = struct.unpack("<Q", frame_body[1:_HEADER_LEN])
    if abs(now_ms - timestamp_ms) > window_ms:
        raise StaleTimestampError(
            f"timestamp {timestamp_ms} outside ±{window_ms}ms of {now_ms}"
        )
    signature = frame_body[-SIGNATURE_LEN:]
    digest = hash_bytes(frame_body[:-SIGNATURE_LEN])
    matched = None
    for vk in sender_vks:
        if verify(vk, digest, signature):
            matched = vk
            break
    if matched is None:
        raise BadSignatureError("signature does not verify under any expected sender")
    message = decode_message(frame_body)
    if not cache.insert_if_absent(matched, signature, now_ms):
        raise ReplayError("signature already accepted within the replay window")
    return message, matched
