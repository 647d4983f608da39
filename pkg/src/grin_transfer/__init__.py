"""Mirror a GRIN-style digitized-book collection into durable storage."""

from .config import ConfigError, RunConfig, SecretRef, StorageRef, load_config
from .orchestrator import (
    EXIT_CONFIG,
    EXIT_LOCKED,
    EXIT_OK,
    EXIT_SOFTWARE,
    QueueSpec,
    Session,
    run_collect,
    run_enrich,
    run_export,
    run_sync,
    status,
    sync_one_volume,
)
from .retrieval import Outcome, SyncResult

__all__ = [
    "EXIT_CONFIG",
    "EXIT_LOCKED",
    "EXIT_OK",
    "EXIT_SOFTWARE",
    "ConfigError",
    "Outcome",
    "QueueSpec",
    "RunConfig",
    "SecretRef",
    "Session",
    "StorageRef",
    "SyncResult",
    "load_config",
    "run_collect",
    "run_enrich",
    "run_export",
    "run_sync",
    "status",
    "sync_one_volume",
]
