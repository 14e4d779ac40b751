"""Byzantine fault-tolerant consensus library with a blockchain-oriented
application contract, a reference block-ordering application, a
deterministic fault-injecting network simulator, and a scenario CLI."""

from .contract import Application, NullApplication, VerifyError
from .engine import ConsensusEngine
from .pool import EnqueueResult, RequestPool
from .types import (
    Configuration,
    ConfigurationError,
    Decision,
    Proposal,
    ProposalMeta,
    Reconfig,
    Request,
    Signature,
    compute_quorum,
)
from .wal import FileWal, MemoryWal, WalRecord

__version__ = "0.1.0"

__all__ = [
    "Application",
    "Configuration",
    "ConfigurationError",
    "ConsensusEngine",
    "Decision",
    "EnqueueResult",
    "FileWal",
    "MemoryWal",
    "NullApplication",
    "Proposal",
    "ProposalMeta",
    "Reconfig",
    "Request",
    "RequestPool",
    "Signature",
    "VerifyError",
    "WalRecord",
    "compute_quorum",
    "__version__",
]
