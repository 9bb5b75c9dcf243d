"""Structured datasets and their cell-level encryption.

A dataset is a rectangular grid of categorical/ordinal strings and bounded
integers. Encryption walks the grid row-major: every text cell is replaced
by a salted hash (fresh 16-byte salt per occurrence, so equal values are
unlinkable in the output), every numeric cell is masked with a fresh
one-time key whose hash becomes the cell's key index. Header names are
salted like categorical values so the storage server learns no schema
vocabulary either.

Two side tables come out of the walk and go to the authority, never to the
storage server: the salt map (unsalted digest -> salted digests, used to
resolve search terms) and the key map (key index -> key, used to build
functional keys).
"""

from __future__ import annotations

import csv
import struct
import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

from . import mife
from .crypto import SALT_LEN, hash_bytes
from .errors import UnknownKeyIndexError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EDS_MAGIC = b"PSFE1"
BUNDLE_MAGIC = b"PSFEL1"
_TAG_HASHED = 0x01
_TAG_NUMERIC = 0x02


class VariableKind(str, Enum):
    CATEGORICAL = "categorical"
    ORDINAL = "ordinal"
    NUMERICAL = "numerical"


@dataclass(frozen=True)
class Variable:
    """One column of the schema; numerical columns declare their value range."""

    name: str
    kind: VariableKind
    lo: int | None = None
    hi: int | None = None

    def __post_init__(self):
        if self.kind is VariableKind.NUMERICAL:
            if self.lo is None or self.hi is None:
                raise ValueError(f"numerical variable {self.name!r} needs a range")
            if self.lo > self.hi:
                raise ValueError(f"empty range for {self.name!r}")
            if self.hi - self.lo >= mife.PLAINTEXT_BOUND:
                raise ValueError(f"range of {self.name!r} too wide (>= 2**32)")
        elif self.lo is not None or self.hi is not None:
            raise ValueError(f"non-numerical variable {self.name!r} takes no range")


@dataclass(frozen=True)
class PlainDataset:
    schema: tuple[Variable, ...]
    rows: tuple[tuple[Union[str, int], ...], ...]

    def __post_init__(self):
        names = [v.name for v in self.schema]
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")
        for r, row in enumerate(self.rows):
            if len(row) != len(self.schema):
                raise ValueError(f"row {r} has {len(row)} cells, expected {len(self.schema)}")
            for var, value in zip(self.schema, row):
                if var.kind is VariableKind.NUMERICAL:
                    if not isinstance(value, int) or isinstance(value, bool):
                        raise ValueError(f"{var.name!r} cell {value!r} is not an integer")
                    if not var.lo <= value <= var.hi:
                        raise ValueError(
                            f"{var.name!r} cell {value} outside [{var.lo}, {var.hi}]"
                        )
                elif not isinstance(value, str):
                    raise ValueError(f"{var.name!r} cell {value!r} is not a string")


@dataclass(frozen=True)
class HashedCell:
    digest: bytes  # hash(value_utf8 || salt)


@dataclass(frozen=True)
class NumericCell:
    masked: int  # x + k (mod q)
    key_index: bytes  # hash(key bytes)


Cell = Union[HashedCell, NumericCell]


@dataclass(frozen=True)
class EncryptedDataset:
    header: tuple[bytes, ...]  # salted header digests, one per column
    rows: tuple[tuple[Cell, ...], ...]

    def to_bytes(self) -> bytes:
        """Canonical byte stream; signatures and setup digests cover exactly this."""
        out = [EDS_MAGIC, struct.pack("<I", len(self.header))]
        out.extend(self.header)
        for row in self.rows:
            for cell in row:
                if isinstance(cell, HashedCell):
                    out.append(bytes([_TAG_HASHED]) + cell.digest)
                else:
                    out.append(
                        bytes([_TAG_NUMERIC])
                        + mife.encode_u64(cell.masked)
                        + cell.key_index
                    )
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedDataset":
        if data[: len(EDS_MAGIC)] != EDS_MAGIC:
            raise ValueError("not an encrypted dataset: bad magic")
        pos = len(EDS_MAGIC)
        (arity,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        if arity == 0:
            raise ValueError("zero-column dataset")
        header = []
        for _ in range(arity):
            header.append(data[pos : pos + 32])
            pos += 32
        if len(header[-1]) != 32:
            raise ValueError("truncated header")
        cells: list[Cell] = []
        while pos < len(data):
            tag = data[pos]
            pos += 1
            if tag == _TAG_HASHED:
                digest = data[pos : pos + 32]
                pos += 32
                if len(digest) != 32:
                    raise ValueError("truncated hashed cell")
                cells.append(HashedCell(digest))
            elif tag == _TAG_NUMERIC:
                chunk = data[pos : pos + 40]
                pos += 40
                if len(chunk) != 40:
                    raise ValueError("truncated numeric cell")
                cells.append(NumericCell(mife.decode_u64(chunk[:8]), chunk[8:]))
            else:
                raise ValueError(f"unknown cell tag {tag:#x}")
        if len(cells) % arity != 0:
            raise ValueError("cell count not a multiple of arity")
        rows = tuple(
            tuple(cells[i : i + arity]) for i in range(0, len(cells), arity)
        )
        return cls(header=tuple(header), rows=rows)


@dataclass
class SaltMap:
    """Unsalted digest -> set of salted digests (one per occurrence)."""

    entries: dict[bytes, frozenset[bytes]] = field(default_factory=dict)

    def lookup_salted(self, unsalted: bytes) -> frozenset[bytes]:
        return self.entries.get(unsalted, frozenset())

    def occurrence_count(self) -> int:
        return sum(len(s) for s in self.entries.values())

    def to_bytes(self) -> bytes:
        out = [struct.pack("<I", len(self.entries))]
        for unsalted in sorted(self.entries):
            salted = sorted(self.entries[unsalted])
            out.append(unsalted + struct.pack("<I", len(salted)))
            out.extend(salted)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SaltMap":
        (count,) = struct.unpack("<I", data[:4])
        pos = 4
        entries: dict[bytes, frozenset[bytes]] = {}
        for _ in range(count):
            unsalted = data[pos : pos + 32]
            (n,) = struct.unpack("<I", data[pos + 32 : pos + 36])
            pos += 36
            salted = []
            for _ in range(n):
                salted.append(data[pos : pos + 32])
                pos += 32
            entries[unsalted] = frozenset(salted)
        if pos != len(data):
            raise ValueError("trailing bytes after salt map")
        return cls(entries)


@dataclass
class KeyMap:
    """Key index digest -> masking key; one entry per numeric cell."""

    entries: dict[bytes, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def keys_for_indices(self, indices: Iterable[bytes]) -> list[int]:
        """Keys in the order of ``indices``; a missing index is a tamper signal."""
        keys = []
        for index in indices:
            try:
                keys.append(self.entries[index])
            except KeyError:
                raise UnknownKeyIndexError(
                    f"no key recorded for index {index.hex()[:16]}..."
                ) from None
        return keys

    def to_bytes(self) -> bytes:
        out = [struct.pack("<I", len(self.entries))]
        for index in sorted(self.entries):
            out.append(index + mife.encode_u64(self.entries[index]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyMap":
        (count,) = struct.unpack("<I", data[:4])
        pos = 4
        entries = {}
        for _ in range(count):
            entries[data[pos : pos + 32]] = mife.decode_u64(data[pos + 32 : pos + 40])
            pos += 40
        if pos != len(data):
            raise ValueError("trailing bytes after key map")
        return cls(entries)


def _salted(value: str, salt: bytes) -> bytes:
    return hash_bytes(value.encode("utf-8") + salt)


def unsalted_digest(term: str) -> bytes:
    """Digest analysts put in search tokens; the authority resolves it."""
    return hash_bytes(term.encode("utf-8"))


def encrypt_dataset(
    ds: PlainDataset, rng
) -> tuple[EncryptedDataset, SaltMap, KeyMap]:
    """Encrypt a dataset cell by cell.

    Deterministic for a fixed entropy stream: headers first, then cells in
    row-major order, one salt or one key drawn per cell.
    """
    salt_entries: dict[bytes, set[bytes]] = {}
    key_entries: dict[bytes, int] = {}

    def record_salted(value: str) -> bytes:
        salt = rng.randbytes(SALT_LEN)
        digest = _salted(value, salt)
        salt_entries.setdefault(unsalted_digest(value), set()).add(digest)
        return digest

    header = tuple(record_salted(var.name) for var in ds.schema)
    rows: list[tuple[Cell, ...]] = []
    for row in ds.rows:
        cells: list[Cell] = []
        for var, value in zip(ds.schema, row):
            if var.kind is VariableKind.NUMERICAL:
                key = rng.getrandbits(64)
                key_index = hash_bytes(mife.encode_u64(key))
                key_entries[key_index] = key
                cells.append(NumericCell(mife.wrap(value + key), key_index))
            else:
                cells.append(HashedCell(record_salted(value)))
        rows.append(tuple(cells))

    eds = EncryptedDataset(header=header, rows=tuple(rows))
    salt_map = SaltMap({k: frozenset(v) for k, v in salt_entries.items()})
    return eds, salt_map, KeyMap(key_entries)


def sensitivity_table(schema: Iterable[Variable]) -> dict[bytes, tuple[int, int]]:
    """Declared range of each numerical variable, keyed by unsalted name digest.

    The authority derives query sensitivity from this: hi - lo for a sum.
    """
    return {
        unsalted_digest(var.name): (var.lo, var.hi)
        for var in schema
        if var.kind is VariableKind.NUMERICAL
    }


@dataclass
class SetupBundle:
    """Everything the authority stores at setup: both maps plus sensitivities."""

    key_map: KeyMap
    salt_map: SaltMap
    sensitivities: dict[bytes, tuple[int, int]]

    def to_bytes(self) -> bytes:
        key_bytes = self.key_map.to_bytes()
        salt_bytes = self.salt_map.to_bytes()
        sens = [struct.pack("<I", len(self.sensitivities))]
        for digest in sorted(self.sensitivities):
            lo, hi = self.sensitivities[digest]
            sens.append(digest + struct.pack("<qq", lo, hi))
        sens_bytes = b"".join(sens)
        return BUNDLE_MAGIC + b"".join(
            struct.pack("<I", len(part)) + part
            for part in (key_bytes, salt_bytes, sens_bytes)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SetupBundle":
        if data[: len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
            raise ValueError("not a setup bundle: bad magic")
        pos = len(BUNDLE_MAGIC)
        parts = []
        for _ in range(3):
            (n,) = struct.unpack("<I", data[pos : pos + 4])
            parts.append(data[pos + 4 : pos + 4 + n])
            pos += 4 + n
        if pos != len(data):
            raise ValueError("trailing bytes after setup bundle")
        key_map = KeyMap.from_bytes(parts[0])
        salt_map = SaltMap.from_bytes(parts[1])
        sens_bytes = parts[2]
        (count,) = struct.unpack("<I", sens_bytes[:4])
        sensitivities = {}
        p = 4
        for _ in range(count):
            digest = sens_bytes[p : p + 32]
            lo, hi = struct.unpack("<qq", sens_bytes[p + 32 : p + 48])
            sensitivities[digest] = (lo, hi)
            p += 48
        return cls(key_map, salt_map, sensitivities)


def load_schema(path: str) -> tuple[Variable, ...]:
    """Schema sidecar: a TOML file with one [[variable]] table per column."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    variables = []
    for entry in doc.get("variable", []):
        kind = VariableKind(entry["kind"])
        lo = hi = None
        if "range" in entry:
            lo, hi = entry["range"]
        variables.append(Variable(entry["name"], kind, lo, hi))
    if not variables:
        raise ValueError(f"no variables declared in {path}")
    return tuple(variables)


def load_csv(data_path: str, schema_path: str) -> PlainDataset:
    """Dataset from a CSV whose header must match the schema sidecar."""
    schema = load_schema(schema_path)
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{data_path} is empty")
        expected = [v.name for v in schema]
        if header != expected:
            raise ValueError(f"CSV header {header} != schema {expected}")
        rows = []
        for raw in reader:
            row: list[Union[str, int]] = []
            for var, text in zip(schema, raw):
                row.append(int(text) if var.kind is VariableKind.NUMERICAL else text)
            rows.append(tuple(row))
    return PlainDataset(schema=schema, rows=tuple(rows))
