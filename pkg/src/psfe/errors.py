"""Error types shared across the protocol stack.

Every rejection a party can produce carries a stable ``error_class``
string so logs, error notices and the attack harness can agree on what
was detected without parsing prose.
"""


class PsfeError(Exception):
    """Base class for all protocol-level failures."""

    error_class = "error"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.error_class)
        self.detail = detail


class EncodingError(PsfeError):
    """Message or payload bytes are malformed."""

    error_class = "encoding-error"


class KindMismatchError(PsfeError):
    """A message of an unexpected kind arrived."""

    error_class = "kind-mismatch"


class StaleTimestampError(PsfeError):
    """Timestamp outside the freshness window."""

    error_class = "stale-timestamp"


class BadSignatureError(PsfeError):
    """Signature does not verify under the expected sender key."""

    error_class = "bad-signature"


class ReplayError(PsfeError):
    """A previously accepted signature was seen again."""

    error_class = "replay-detected"


class DecryptionError(PsfeError):
    """Envelope failed to open (tampered or wrong key)."""

    error_class = "decryption-error"


class UnknownKeyIndexError(PsfeError):
    """A key index has no entry in the key map (tampered or stale index list)."""

    error_class = "unknown-key-index"


class ProtocolStateError(PsfeError):
    """Message valid in itself but inconsistent with session state."""

    error_class = "protocol-state"


class DuplicateSetupError(PsfeError):
    """A second dataset setup was attempted."""

    error_class = "duplicate-setup"


class BudgetExhaustedError(PsfeError):
    """The analyst's privacy budget cannot cover the query."""

    error_class = "budget-exhausted"


class TransportError(PsfeError):
    """Peer unreachable or connection failed mid-message."""

    error_class = "transport-error"


class SetupFailedError(PsfeError):
    """Acknowledgement digests did not match the locally computed ones."""

    error_class = "setup-failed"
