"""The two long-running parties: the storage server and the key authority.

The storage server (CSP) keeps only the encrypted dataset. It accepts one
setup message, answers salted-term searches with the matching masked cells,
and forwards the cells' key indices to the authority. It never sees a
plaintext, an unsalted digest, a masking key, or a noise value.

The authority (MA) keeps the salt and key maps, the per-variable
sensitivities, and the analysts' privacy budgets. It resolves search
tokens to salted digests, and turns key-index lists into noise-blinded
functional keys. It never sees a ciphertext or a query result.

Both parties verify every inbound message (kind, freshness, signature,
replay) and reject without state changes on any failure; rejections are
logged with their error class and kept for inspection.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
from dataclasses import dataclass, field

from . import dp, mife
from .crypto import (
    EncryptionKeyPair,
    Envelope,
    SigningKeyPair,
    fingerprint,
    hash_bytes,
    pk_decrypt,
    pk_encrypt,
)
from .dataset import EncryptedDataset, HashedCell, NumericCell, SetupBundle
from .errors import (
    DecryptionError,
    DuplicateSetupError,
    ProtocolStateError,
    PsfeError,
    UnknownKeyIndexError,
)
from .transport import Transport
from .wire import (
    DEFAULT_WINDOW_MS,
    QUERY_ID_LEN,
    Clock,
    DatasetAck,
    ErrorCode,
    ErrorNotice,
    KeyIndices,
    ListsAck,
    MessageBuilder,
    MessageKind,
    NoisyKey,
    QueryResult,
    ReplayCache,
    SaltedTerms,
    TokenSubmit,
    encode_noisy_key,
    system_clock,
    verify_frame,
)

EDS_FILENAME = "eds.psfe"
BUNDLE_FILENAME = "bundle.psfel"
BUDGET_JOURNAL = "budget.jsonl"

_ZERO_QUERY_ID = bytes(QUERY_ID_LEN)


@dataclass(frozen=True)
class AnalystInfo:
    """What the services need to know about one authorized analyst."""

    verification_key: bytes
    address: str
    encryption_public: bytes | None = None  # required at the authority only

    @property
    def analyst_id(self) -> bytes:
        return hash_bytes(self.verification_key)


@dataclass(frozen=True)
class Rejection:
    """One dropped inbound message, kept for logs and the attack harness."""

    kind: int
    error_class: str
    detail: str
    at_ms: int


class _PartyBase:
    def __init__(
        self,
        name: str,
        signing: SigningKeyPair,
        clock: Clock,
        window_ms: int,
    ):
        self._log = logging.getLogger(f"psfe.{name}")
        self._clock = clock
        self._window_ms = window_ms
        self._builder = MessageBuilder(signing.signing_key, clock)
        self._cache = ReplayCache(retention_ms=2 * window_ms)
        self.rejections: list[Rejection] = []
        self._rejections_lock = threading.Lock()

    def _verify(self, body: bytes, kind: MessageKind, sender_vks):
        return verify_frame(
            body, kind, sender_vks, self._window_ms, self._cache, self._clock()
        )

    def _reject(self, body: bytes, exc: PsfeError) -> Rejection:
        rec = Rejection(
            kind=body[0] if body else 0,
            error_class=exc.error_class,
            detail=exc.detail,
            at_ms=self._clock(),
        )
        with self._rejections_lock:
            self.rejections.append(rec)
        self._log.warning(
            "rejected kind=%d class=%s detail=%s", rec.kind, rec.error_class, rec.detail
        )
        return rec

    def _accept_log(self, kind: MessageKind) -> None:
        self._log.info("verified kind=%d", int(kind))


@dataclass
class CspConfig:
    curator_vk: bytes
    ma_vk: bytes
    ma_address: str
    analysts: dict[bytes, AnalystInfo]  # keyed by analyst id
    window_ms: int = DEFAULT_WINDOW_MS


class CspService(_PartyBase):
    """Storage server: holds the encrypted dataset, executes searches."""

    def __init__(
        self,
        encryption: EncryptionKeyPair,
        signing: SigningKeyPair,
        config: CspConfig,
        transport: Transport,
        storage_dir: str | None = None,
        clock: Clock = system_clock,
    ):
        super().__init__("csp", signing, clock, config.window_ms)
        self._encryption = encryption
        self._config = config
        self._transport = transport
        self._storage_dir = storage_dir
        self._eds_bytes: bytes | None = None
        self._eds: EncryptedDataset | None = None
        self._setup_lock = threading.Lock()
        if storage_dir:
            os.makedirs(storage_dir, exist_ok=True)
            path = os.path.join(storage_dir, EDS_FILENAME)
            if os.path.exists(path):
                with open(path, "rb") as fh:
                    self._eds_bytes = fh.read()
                self._eds = EncryptedDataset.from_bytes(self._eds_bytes)
                self._log.info("reloaded dataset (%d bytes)", len(self._eds_bytes))

    @property
    def has_dataset(self) -> bool:
        return self._eds is not None

    def state_digest(self) -> bytes:
        """Digest of the service's logical state (anti-replay bookkeeping excluded)."""
        return hash_bytes(self._eds_bytes or b"")

    def handle_frame(self, body: bytes) -> list[bytes]:
        kind = body[0] if body else 0
        if kind == MessageKind.SETUP_DATASET:
            return self._handle_setup(body)
        if kind == MessageKind.SALTED_TERMS:
            return self._handle_search(body)
        self._reject(body, ProtocolStateError(f"unexpected kind {kind} at storage server"))
        return []

    def _error_reply(self, code: ErrorCode, detail: str) -> list[bytes]:
        return [self._builder.build(ErrorNotice(_ZERO_QUERY_ID, code, detail))]

    def _handle_setup(self, body: bytes) -> list[bytes]:
        try:
            msg, _ = self._verify(body, MessageKind.SETUP_DATASET, [self._config.curator_vk])
        except PsfeError as exc:
            self._reject(body, exc)
            return self._error_reply(ErrorCode.VERIFICATION_FAILED, exc.error_class)
        with self._setup_lock:
            if self._eds is not None:
                exc = DuplicateSetupError("a dataset is already stored")
                self._reject(body, exc)
                return self._error_reply(ErrorCode.DUPLICATE_SETUP, exc.error_class)
            try:
                eds_bytes = pk_decrypt(
                    self._encryption.decryption_key,
                    Envelope.from_bytes(msg.payload.envelope),
                )
                eds = EncryptedDataset.from_bytes(eds_bytes)
            except (DecryptionError, ValueError) as exc:
                err = exc if isinstance(exc, PsfeError) else DecryptionError(str(exc))
                self._reject(body, err)
                return self._error_reply(ErrorCode.DECRYPTION_FAILED, err.error_class)
            if self._storage_dir:
                with open(os.path.join(self._storage_dir, EDS_FILENAME), "wb") as fh:
                    fh.write(eds_bytes)
            self._eds_bytes = eds_bytes
            self._eds = eds
        self._accept_log(MessageKind.SETUP_DATASET)
        return [self._builder.build(DatasetAck(hash_bytes(eds_bytes)))]

    def _handle_search(self, body: bytes) -> list[bytes]:
        try:
            msg, _ = self._verify(body, MessageKind.SALTED_TERMS, [self._config.ma_vk])
        except PsfeError as exc:
            self._reject(body, exc)
            return []
        terms: SaltedTerms = msg.payload
        if self._eds is None:
            self._reject(body, ProtocolStateError("no dataset stored yet"))
            return []
        analyst = self._config.analysts.get(terms.analyst_id)
        if analyst is None:
            self._reject(body, ProtocolStateError("unknown analyst id"))
            return []
        self._accept_log(MessageKind.SALTED_TERMS)

        value_set = set(terms.value_digests)
        variable_set = set(terms.variable_digests)
        column = next(
            (j for j, h in enumerate(self._eds.header) if h in variable_set), None
        )
        cells: list[NumericCell] = []
        if column is not None and value_set:
            for row in self._eds.rows:
                if any(
                    isinstance(c, HashedCell) and c.digest in value_set for c in row
                ):
                    cell = row[column]
                    if isinstance(cell, NumericCell):
                        cells.append(cell)

        if not cells:
            notice = ErrorNotice(
                terms.query_id, ErrorCode.NO_RESULTS, "no matching rows or column"
            )
            self._transport.send(analyst.address, self._builder.build(notice))
            return []

        result = QueryResult(terms.query_id, tuple(cells))
        indices = KeyIndices(
            terms.query_id, tuple(c.key_index for c in cells), terms.fn
        )
        self._transport.send(analyst.address, self._builder.build(result))
        self._transport.send(self._config.ma_address, self._builder.build(indices))
        return []


@dataclass
class MaConfig:
    curator_vk: bytes
    csp_vk: bytes
    csp_address: str
    analysts: dict[bytes, AnalystInfo]
    default_epsilon: float = 1.0
    budget_cap: float | None = None  # None = unlimited
    window_ms: int = DEFAULT_WINDOW_MS
    noise_enabled: bool = True  # test hook: False forces e = 0


@dataclass
class _PendingQuery:
    analyst_id: bytes
    variable_digest: bytes
    fn: int
    epsilon: float
    created_ms: int


@dataclass
class TamperAlarm:
    query_id: bytes
    detail: str
    at_ms: int


class MaService(_PartyBase):
    """Key authority: resolves tokens, issues noise-blinded functional keys."""

    def __init__(
        self,
        encryption: EncryptionKeyPair,
        signing: SigningKeyPair,
        config: MaConfig,
        transport: Transport,
        storage_dir: str | None = None,
        clock: Clock = system_clock,
        rng: random.Random | None = None,
    ):
        super().__init__("ma", signing, clock, config.window_ms)
        self._encryption = encryption
        self._config = config
        self._transport = transport
        self._storage_dir = storage_dir
        self._rng = rng if rng is not None else random.SystemRandom()
        self._bundle: SetupBundle | None = None
        self._bundle_bytes: bytes | None = None
        self._pending: dict[bytes, _PendingQuery] = {}
        self._state_lock = threading.Lock()
        self._budgets: dict[str, dp.BudgetAccount] = {}
        self.alarms: list[TamperAlarm] = []
        if storage_dir:
            os.makedirs(storage_dir, exist_ok=True)
            self._reload(storage_dir)

    def _reload(self, storage_dir: str) -> None:
        bundle_path = os.path.join(storage_dir, BUNDLE_FILENAME)
        if os.path.exists(bundle_path):
            with open(bundle_path, "rb") as fh:
                self._bundle_bytes = fh.read()
            self._bundle = SetupBundle.from_bytes(self._bundle_bytes)
            self._log.info("reloaded setup bundle (%d bytes)", len(self._bundle_bytes))
        journal = os.path.join(storage_dir, BUDGET_JOURNAL)
        if os.path.exists(journal):
            with open(journal, encoding="utf-8") as fh:
                for line in fh:
                    entry = json.loads(line)
                    account = self._account(entry["analyst"])
                    account.spent += entry["epsilon"]

    @property
    def has_lists(self) -> bool:
        return self._bundle is not None

    def budget_spent(self, analyst_id: bytes) -> float:
        account = self._budgets.get(analyst_id.hex())
        return account.spent if account else 0.0

    def state_digest(self) -> bytes:
        with self._state_lock:
            budget_part = json.dumps(
                {k: v.spent for k, v in sorted(self._budgets.items())}
            ).encode()
            pending_part = b"".join(sorted(self._pending))
        return hash_bytes((self._bundle_bytes or b"") + budget_part + pending_part)

    def _account(self, analyst_hex: str) -> dp.BudgetAccount:
        account = self._budgets.get(analyst_hex)
        if account is None:
            account = dp.BudgetAccount(analyst_hex, cap=self._config.budget_cap)
            self._budgets[analyst_hex] = account
        return account

    def _journal_charge(self, analyst_hex: str, epsilon: float) -> None:
        if self._storage_dir:
            path = os.path.join(self._storage_dir, BUDGET_JOURNAL)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"analyst": analyst_hex, "epsilon": epsilon}) + "\n")

    def handle_frame(self, body: bytes) -> list[bytes]:
        kind = body[0] if body else 0
        if kind == MessageKind.SETUP_LISTS:
            return self._handle_setup(body)
        if kind == MessageKind.QUERY_TOKEN:
            return self._handle_token(body)
        if kind == MessageKind.KEY_INDICES:
            return self._handle_indices(body)
        self._reject(body, ProtocolStateError(f"unexpected kind {kind} at authority"))
        return []

    def _error_reply(self, code: ErrorCode, detail: str) -> list[bytes]:
        return [self._builder.build(ErrorNotice(_ZERO_QUERY_ID, code, detail))]

    def _handle_setup(self, body: bytes) -> list[bytes]:
        try:
            msg, _ = self._verify(body, MessageKind.SETUP_LISTS, [self._config.curator_vk])
        except PsfeError as exc:
            self._reject(body, exc)
            return self._error_reply(ErrorCode.VERIFICATION_FAILED, exc.error_class)
        with self._state_lock:
            if self._bundle is not None:
                exc = DuplicateSetupError("lists already stored")
                self._reject(body, exc)
                return self._error_reply(ErrorCode.DUPLICATE_SETUP, exc.error_class)
            try:
                bundle_bytes = pk_decrypt(
                    self._encryption.decryption_key,
                    Envelope.from_bytes(msg.payload.envelope),
                )
                bundle = SetupBundle.from_bytes(bundle_bytes)
            except (DecryptionError, ValueError) as exc:
                err = exc if isinstance(exc, PsfeError) else DecryptionError(str(exc))
                self._reject(body, err)
                return self._error_reply(ErrorCode.DECRYPTION_FAILED, err.error_class)
            if self._storage_dir:
                with open(os.path.join(self._storage_dir, BUNDLE_FILENAME), "wb") as fh:
                    fh.write(bundle_bytes)
            self._bundle_bytes = bundle_bytes
            self._bundle = bundle
        self._accept_log(MessageKind.SETUP_LISTS)
        return [self._builder.build(ListsAck(hash_bytes(bundle_bytes)))]

    def _handle_token(self, body: bytes) -> list[bytes]:
        analyst_vks = [a.verification_key for a in self._config.analysts.values()]
        try:
            msg, matched_vk = self._verify(body, MessageKind.QUERY_TOKEN, analyst_vks)
        except PsfeError as exc:
            self._reject(body, exc)
            return []
        submit: TokenSubmit = msg.payload
        analyst_id = hash_bytes(matched_vk)
        analyst = self._config.analysts[analyst_id]
        if self._bundle is None:
            self._reject(body, ProtocolStateError("no lists stored yet"))
            return []
        self._accept_log(MessageKind.QUERY_TOKEN)

        epsilon = self._config.default_epsilon
        account = self._account(analyst_id.hex())
        if not account.charge(epsilon):
            self._log.warning(
                "budget exhausted for analyst=%s spent=%.3f cap=%s",
                fingerprint(matched_vk)[:12],
                account.spent,
                account.cap,
            )
            notice = ErrorNotice(
                _ZERO_QUERY_ID, ErrorCode.BUDGET_EXHAUSTED, "privacy budget exhausted"
            )
            self._transport.send(analyst.address, self._builder.build(notice))
            return []
        self._journal_charge(analyst_id.hex(), epsilon)

        query_id = self._rng.randbytes(QUERY_ID_LEN)
        token = submit.token
        with self._state_lock:
            self._pending[query_id] = _PendingQuery(
                analyst_id=analyst_id,
                variable_digest=token.variable_digest,
                fn=token.fn,
                epsilon=epsilon,
                created_ms=self._clock(),
            )
        terms = SaltedTerms(
            query_id=query_id,
            analyst_id=analyst_id,
            fn=token.fn,
            value_digests=tuple(self._bundle.salt_map.lookup_salted(token.value_digest)),
            variable_digests=tuple(
                self._bundle.salt_map.lookup_salted(token.variable_digest)
            ),
        )
        self._transport.send(self._config.csp_address, self._builder.build(terms))
        return []

    def _handle_indices(self, body: bytes) -> list[bytes]:
        try:
            msg, _ = self._verify(body, MessageKind.KEY_INDICES, [self._config.csp_vk])
        except PsfeError as exc:
            self._reject(body, exc)
            return []
        indices: KeyIndices = msg.payload
        with self._state_lock:
            pending = self._pending.get(indices.query_id)
        if pending is None:
            self._reject(body, ProtocolStateError("no pending query for this id"))
            return []
        if indices.fn != pending.fn:
            self._reject(body, ProtocolStateError("function does not match the token"))
            return []
        if self._bundle is None:
            self._reject(body, ProtocolStateError("no lists stored yet"))
            return []
        try:
            keys = self._bundle.key_map.keys_for_indices(indices.indices)
        except UnknownKeyIndexError as exc:
            self._reject(body, exc)
            alarm = TamperAlarm(indices.query_id, exc.detail, self._clock())
            with self._state_lock:
                self.alarms.append(alarm)
                self._pending.pop(indices.query_id, None)
            self._log.error("tamper alarm: %s", exc.detail)
            return []
        self._accept_log(MessageKind.KEY_INDICES)

        sensitivity = self._sensitivity_for(pending.variable_digest)
        if sensitivity is None:
            self._reject(body, ProtocolStateError("no sensitivity for queried variable"))
            return []
        key_body = mife.combine_keys(keys)
        params = dp.PrivacyParams(epsilon=pending.epsilon, sensitivity=sensitivity)
        if self._config.noise_enabled:
            noisy = dp.apply_noise(
                mife.FunctionalKey(key_body, frozenset(range(1, len(keys) + 1))),
                params,
                self._rng,
            ).body
        else:
            noisy = key_body
        analyst = self._config.analysts[pending.analyst_id]
        envelope = pk_encrypt(
            analyst.encryption_public,
            encode_noisy_key(noisy, params.epsilon, params.sensitivity),
        )
        delivery = NoisyKey(indices.query_id, envelope.to_bytes())
        with self._state_lock:
            self._pending.pop(indices.query_id, None)
        self._transport.send(analyst.address, self._builder.build(delivery))
        return []

    def _sensitivity_for(self, variable_digest: bytes) -> float | None:
        entry = self._bundle.sensitivities.get(variable_digest)
        if entry is None:
            return None
        lo, hi = entry
        return float(max(hi - lo, 1))
