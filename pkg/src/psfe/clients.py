"""Client-side sessions: the curator who outsources a dataset and the
analyst who queries it.

The curator encrypts locally, ships the dataset to the storage server and
the maps to the authority, and only declares setup complete once both
acknowledgement digests match its own. The analyst hashes its two search
terms, submits the token, then waits for two independently routed pieces:
the masked result cells from the storage server and the noise-blinded
functional key from the authority. Subtracting the key from the cell sum
yields the noisy aggregate; an average is the noisy sum over the
(exact) match count.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field

from . import mife
from .crypto import (
    EncryptionKeyPair,
    Envelope,
    SigningKeyPair,
    hash_bytes,
    pk_decrypt,
    pk_encrypt,
)
from .dataset import (
    NumericCell,
    PlainDataset,
    SetupBundle,
    encrypt_dataset,
    sensitivity_table,
    unsalted_digest,
)
from .errors import DecryptionError, PsfeError, TransportError
from .services import Rejection
from .transport import Transport
from .wire import (
    DEFAULT_WINDOW_MS,
    Clock,
    DatasetSetup,
    ErrorCode,
    FnKind,
    ListsSetup,
    MessageBuilder,
    MessageKind,
    ReplayCache,
    SearchToken,
    TokenSubmit,
    decode_noisy_key,
    system_clock,
    verify_frame,
)

log = logging.getLogger("psfe.clients")


@dataclass
class SetupReport:
    eds_digest: bytes
    bundle_digest: bytes
    dataset_ok: bool = False
    lists_ok: bool = False
    dataset_error: str | None = None
    lists_error: str | None = None

    @property
    def complete(self) -> bool:
        return self.dataset_ok and self.lists_ok


class CuratorSession:
    """Single-flight setup initiator."""

    def __init__(
        self,
        encryption: EncryptionKeyPair,
        signing: SigningKeyPair,
        csp_address: str,
        csp_vk: bytes,
        csp_encryption_public: bytes,
        ma_address: str,
        ma_vk: bytes,
        ma_encryption_public: bytes,
        transport: Transport,
        clock: Clock = system_clock,
        window_ms: int = DEFAULT_WINDOW_MS,
        rng: random.Random | None = None,
    ):
        self._encryption = encryption
        self._builder = MessageBuilder(signing.signing_key, clock)
        self._clock = clock
        self._window_ms = window_ms
        self._cache = ReplayCache(retention_ms=2 * window_ms)
        self._csp = (csp_address, csp_vk, csp_encryption_public)
        self._ma = (ma_address, ma_vk, ma_encryption_public)
        self._transport = transport
        self._rng = rng if rng is not None else random.SystemRandom()

    def setup(self, ds: PlainDataset) -> SetupReport:
        """Encrypt, outsource, and check both acknowledgements."""
        eds, salt_map, key_map = encrypt_dataset(ds, self._rng)
        eds_bytes = eds.to_bytes()
        bundle = SetupBundle(key_map, salt_map, sensitivity_table(ds.schema))
        bundle_bytes = bundle.to_bytes()
        report = SetupReport(
            eds_digest=hash_bytes(eds_bytes), bundle_digest=hash_bytes(bundle_bytes)
        )

        csp_addr, csp_vk, csp_pub = self._csp
        m1 = self._builder.build(
            DatasetSetup(pk_encrypt(csp_pub, eds_bytes).to_bytes())
        )
        report.dataset_ok, report.dataset_error = self._deliver_and_check(
            csp_addr, m1, MessageKind.SETUP_DATASET_ACK, csp_vk, report.eds_digest
        )

        ma_addr, ma_vk, ma_pub = self._ma
        m2 = self._builder.build(
            ListsSetup(pk_encrypt(ma_pub, bundle_bytes).to_bytes())
        )
        report.lists_ok, report.lists_error = self._deliver_and_check(
            ma_addr, m2, MessageKind.SETUP_LISTS_ACK, ma_vk, report.bundle_digest
        )
        return report

    def _deliver_and_check(
        self,
        address: str,
        frame: bytes,
        ack_kind: MessageKind,
        sender_vk: bytes,
        expected_digest: bytes,
    ) -> tuple[bool, str | None]:
        try:
            reply = self._transport.request(address, frame)
        except TransportError as exc:
            return False, exc.error_class
        try:
            if reply and reply[0] == MessageKind.ERROR_NOTICE:
                msg, _ = verify_frame(
                    reply,
                    MessageKind.ERROR_NOTICE,
                    [sender_vk],
                    self._window_ms,
                    self._cache,
                    self._clock(),
                )
                return False, f"peer refused: {msg.payload.detail}"
            msg, _ = verify_frame(
                reply, ack_kind, [sender_vk], self._window_ms, self._cache, self._clock()
            )
        except PsfeError as exc:
            return False, exc.error_class
        if msg.payload.digest != expected_digest:
            return False, "setup-failed: acknowledgement digest mismatch"
        return True, None


@dataclass
class QueryOutcome:
    status: str  # ok | no-results | budget-exhausted | rejected | timeout
    value: float | None = None
    count: int | None = None
    epsilon: float | None = None
    sensitivity: float | None = None
    error_class: str | None = None
    detail: str = ""


def analyst_decrypt(cells, functional_key: mife.FunctionalKey) -> int:
    """Noisy aggregate from result cells: centered sum of masks minus the key."""
    if not cells:
        raise ValueError("result list must be nonempty")
    cts = [mife.Ciphertext(i + 1, cell.masked) for i, cell in enumerate(cells)]
    return mife.decrypt(functional_key, cts)


@dataclass
class _PendingQuery:
    fn: FnKind
    query_id: bytes | None = None
    cells: tuple[NumericCell, ...] | None = None
    key: tuple[int, float, float] | None = None  # body, epsilon, sensitivity
    notice: tuple[ErrorCode, str] | None = None
    failure: PsfeError | None = None
    done: threading.Event = field(default_factory=threading.Event)

    def ready(self) -> bool:
        return (
            self.failure is not None
            or self.notice is not None
            or (self.cells is not None and self.key is not None)
        )


class AnalystSession:
    """Queries the deployment; one query in flight at a time.

    Responses arrive as one-way frames at this session's listen address.
    Run several sessions for concurrent queries.
    """

    def __init__(
        self,
        encryption: EncryptionKeyPair,
        signing: SigningKeyPair,
        ma_address: str,
        ma_vk: bytes,
        csp_vk: bytes,
        transport: Transport,
        clock: Clock = system_clock,
        window_ms: int = DEFAULT_WINDOW_MS,
        timeout_s: float = 10.0,
    ):
        self._encryption = encryption
        self._builder = MessageBuilder(signing.signing_key, clock)
        self._clock = clock
        self._window_ms = window_ms
        self._cache = ReplayCache(retention_ms=2 * window_ms)
        self._ma_address = ma_address
        self._ma_vk = ma_vk
        self._csp_vk = csp_vk
        self._transport = transport
        self._timeout_s = timeout_s
        self._query_lock = threading.Lock()
        self._pending: _PendingQuery | None = None
        self._pending_guard = threading.Lock()
        self.rejections: list[Rejection] = []

    # -- inbound ---------------------------------------------------------

    def handle_frame(self, body: bytes) -> list[bytes]:
        """Listener entry point for result, key and notice frames."""
        kind = body[0] if body else 0
        try:
            if kind == MessageKind.QUERY_RESULT:
                msg, _ = self._verify(body, MessageKind.QUERY_RESULT, [self._csp_vk])
                self._attach(msg.payload.query_id, cells=msg.payload.cells)
            elif kind == MessageKind.NOISY_KEY:
                msg, _ = self._verify(body, MessageKind.NOISY_KEY, [self._ma_vk])
                plain = pk_decrypt(
                    self._encryption.decryption_key,
                    Envelope.from_bytes(msg.payload.envelope),
                )
                self._attach(msg.payload.query_id, key=decode_noisy_key(plain))
            elif kind == MessageKind.ERROR_NOTICE:
                msg, _ = self._verify(
                    body, MessageKind.ERROR_NOTICE, [self._csp_vk, self._ma_vk]
                )
                self._attach(
                    msg.payload.query_id,
                    notice=(msg.payload.code, msg.payload.detail),
                    any_query=True,
                )
            else:
                raise PsfeError(f"unexpected kind {kind} at analyst")
        except PsfeError as exc:
            self._record_rejection(body, exc)
        return []

    def _verify(self, body: bytes, kind: MessageKind, vks):
        return verify_frame(
            body, kind, vks, self._window_ms, self._cache, self._clock()
        )

    def _record_rejection(self, body: bytes, exc: PsfeError) -> None:
        rec = Rejection(
            kind=body[0] if body else 0,
            error_class=exc.error_class,
            detail=exc.detail,
            at_ms=self._clock(),
        )
        self.rejections.append(rec)
        log.warning(
            "analyst rejected kind=%d class=%s detail=%s",
            rec.kind,
            rec.error_class,
            rec.detail,
        )
        # A tampered frame aborts the in-flight query rather than letting
        # it run into the timeout; the outcome carries the error class.
        with self._pending_guard:
            pending = self._pending
            if pending is not None and pending.failure is None:
                pending.failure = exc
                pending.done.set()

    def _attach(
        self,
        query_id: bytes,
        cells=None,
        key=None,
        notice=None,
        any_query: bool = False,
    ) -> None:
        with self._pending_guard:
            pending = self._pending
            if pending is None:
                log.warning("dropping frame for %s: no query in flight", query_id.hex())
                return
            if pending.query_id is None:
                pending.query_id = query_id
            elif pending.query_id != query_id and not any_query:
                log.warning("dropping frame for foreign query %s", query_id.hex())
                return
            if cells is not None:
                pending.cells = cells
            if key is not None:
                pending.key = key
            if notice is not None:
                pending.notice = notice
            if pending.ready():
                pending.done.set()

    # -- outbound --------------------------------------------------------

    def query(self, value_term: str, variable_term: str, fn: FnKind) -> QueryOutcome:
        """Submit a token and assemble the noisy aggregate."""
        token = SearchToken(
            value_digest=unsalted_digest(value_term),
            variable_digest=unsalted_digest(variable_term),
            fn=fn,
        )
        with self._query_lock:
            pending = _PendingQuery(fn=fn)
            with self._pending_guard:
                self._pending = pending
            try:
                self._transport.send(
                    self._ma_address, self._builder.build(TokenSubmit(token))
                )
                pending.done.wait(self._timeout_s)
                return self._resolve(pending)
            finally:
                with self._pending_guard:
                    self._pending = None

    def _resolve(self, pending: _PendingQuery) -> QueryOutcome:
        if pending.failure is not None:
            return QueryOutcome(
                status="rejected",
                error_class=pending.failure.error_class,
                detail=pending.failure.detail,
            )
        if pending.notice is not None:
            code, detail = pending.notice
            status = {
                ErrorCode.NO_RESULTS: "no-results",
                ErrorCode.BUDGET_EXHAUSTED: "budget-exhausted",
            }.get(code, "rejected")
            return QueryOutcome(status=status, detail=detail)
        if pending.cells is None or pending.key is None:
            return QueryOutcome(status="timeout", detail="missing result or key")
        body, epsilon, sensitivity = pending.key
        count = len(pending.cells)
        functional_key = mife.FunctionalKey(body, frozenset(range(1, count + 1)))
        noisy_sum = analyst_decrypt(pending.cells, functional_key)
        value = noisy_sum / count if pending.fn == FnKind.AVG else float(noisy_sum)
        return QueryOutcome(
            status="ok",
            value=value,
            count=count,
            epsilon=epsilon,
            sensitivity=sensitivity,
        )
