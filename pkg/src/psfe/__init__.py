"""Privacy-preserving aggregate queries over an outsourced encrypted dataset.

Four parties: a curator encrypts and outsources, a storage server holds
only masked cells and salted hashes, a key authority holds the salt and
key maps and adds calibrated noise to every functional key it issues, and
analysts receive differentially private sums and averages. All messages
are signed, timestamped and replay-protected.
"""

from .clients import AnalystSession, CuratorSession, QueryOutcome, SetupReport
from .crypto import gen_party_keys
from .dataset import PlainDataset, Variable, VariableKind, encrypt_dataset
from .dp import BudgetAccount, PrivacyParams
from .mife import FunctionalKey, KeyVector
from .services import AnalystInfo, CspConfig, CspService, MaConfig, MaService
from .wire import FnKind, MessageKind

__all__ = [
    "AnalystInfo",
    "AnalystSession",
    "BudgetAccount",
    "CspConfig",
    "CspService",
    "CuratorSession",
    "FnKind",
    "FunctionalKey",
    "KeyVector",
    "MaConfig",
    "MaService",
    "MessageKind",
    "PlainDataset",
    "PrivacyParams",
    "QueryOutcome",
    "SetupReport",
    "Variable",
    "VariableKind",
    "encrypt_dataset",
    "gen_party_keys",
]

__version__ = "0.1.0"
