"""Domain types, dataset persistence, and deterministic RNG plumbing."""

from .types import (
    ACTION_DIM,
    SCHEMA_VERSION,
    Action,
    ActionChunk,
    EngineConfig,
    Observation,
    Trajectory,
    ValidationError,
    Verdict,
    trajectory_id,
)
from .rng import derive_seed, split_rng
from .store import (
    VIEWS,
    DatasetManifest,
    DatasetStore,
    ManifestEntry,
    StoreError,
    make_manifest,
    open_store,
)

__all__ = [
    "ACTION_DIM",
    "SCHEMA_VERSION",
    "Action",
    "ActionChunk",
    "DatasetManifest",
    "DatasetStore",
    "EngineConfig",
    "ManifestEntry",
    "Observation",
    "StoreError",
    "Trajectory",
    "ValidationError",
    "Verdict",
    "VIEWS",
    "derive_seed",
    "make_manifest",
    "open_store",
    "split_rng",
    "trajectory_id",
]
