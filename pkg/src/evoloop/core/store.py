"""Append-only trajectory store and manifest views.

On-disk layout of a store directory:

    manifest.jsonl        one JSON object per log line
    episodes/<id>.json    one file per trajectory

Manifest lines are an append-only log. The first line for an id creates the
entry; later lines for the same id may add view tags and a verdict score but
never remove anything. Episode files are immutable once written.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

from .types import SCHEMA_VERSION, Trajectory, Verdict

VIEWS = ("seed", "raw", "silver", "union")


class StoreError(RuntimeError):
    """Store cannot be opened or is internally inconsistent."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    file: str  # absolute path to the episode file
    offset: int
    views: tuple[str, ...]
    verdict_score: float | None
    oracle_success: bool
    task_id: int
    iteration: int

    def load(self) -> Trajectory:
        with open(self.file, "r", encoding="utf-8") as fh:
            return Trajectory.from_dict(json.load(fh))


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable, ordered list of trajectory references."""

    name: str
    view: str
    entries: tuple[ManifestEntry, ...]
    parent: "DatasetManifest | None" = None

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise StoreError(f"duplicate ids in manifest {self.name!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def load_all(self) -> list[Trajectory]:
        return [e.load() for e in self.entries]

    def union(self, other: "DatasetManifest", name: str) -> "DatasetManifest":
        """Parent entries followed by the other's entries; duplicates rejected."""
        return DatasetManifest(
            name=name, view="union", entries=self.entries + other.entries, parent=self
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                rel = os.path.relpath(e.file, path.parent)
                fh.write(
                    json.dumps(
                        {
                            "schema_version": SCHEMA_VERSION,
                            "id": e.id,
                            "file": rel,
                            "offset": e.offset,
                            "views": list(e.views),
                            "verdict_score": e.verdict_score,
                            "oracle_success": e.oracle_success,
                            "task_id": e.task_id,
                            "iteration": e.iteration,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load_file(cls, path: str | os.PathLike, name: str | None = None, view: str = "union") -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise StoreError(f"missing manifest file: {path}")
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                if d.get("schema_version") != SCHEMA_VERSION:
                    raise StoreError(f"schema-version mismatch in {path}")
                entries.append(
                    ManifestEntry(
                        id=d["id"],
                        file=str((path.parent / d["file"]).resolve()),
                        offset=int(d["offset"]),
                        views=tuple(d["views"]),
                        verdict_score=d["verdict_score"],
                        oracle_success=bool(d["oracle_success"]),
                        task_id=int(d["task_id"]),
                        iteration=int(d["iteration"]),
                    )
                )
        return cls(name=name or str(path), view=view, entries=tuple(entries))


class DatasetStore:
    """Single-writer append-only store; reads are lock-free snapshots."""

    def __init__(self, path: str | os.PathLike, mode: str = "read"):
        self.path = Path(path)
        self._manifest_path = self.path / "manifest.jsonl"
        self._episodes_dir = self.path / "episodes"
        self._lock = threading.Lock()
        self._entries: dict[str, ManifestEntry] = {}
        if mode == "create":
            if self._manifest_path.exists():
                raise StoreError(f"store already exists at {self.path}")
            self._episodes_dir.mkdir(parents=True, exist_ok=True)
            self._manifest_path.touch()
        elif mode == "read":
            if not self._manifest_path.exists():
                raise StoreError(f"no store at {self.path}")
            self._load_index()
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def _load_index(self) -> None:
        with open(self._manifest_path, "r", encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"corrupt index at {self._manifest_path}:{n}") from exc
                if d.get("schema_version") != SCHEMA_VERSION:
                    raise StoreError(f"schema-version mismatch at {self._manifest_path}:{n}")
                file = (self.path / d["file"]).resolve()
                entry = ManifestEntry(
                    id=d["id"],
                    file=str(file),
                    offset=int(d["offset"]),
                    views=tuple(d["views"]),
                    verdict_score=d["verdict_score"],
                    oracle_success=bool(d["oracle_success"]),
                    task_id=int(d["task_id"]),
                    iteration=int(d["iteration"]),
                )
                prev = self._entries.get(entry.id)
                if prev is not None:
                    merged_views = prev.views + tuple(v for v in entry.views if v not in prev.views)
                    score = entry.verdict_score if entry.verdict_score is not None else prev.verdict_score
                    entry = replace(prev, views=merged_views, verdict_score=score)
                else:
                    if not file.exists():
                        raise StoreError(f"missing episode file {file}")
                self._entries[entry.id] = entry

    def _write_line(self, entry: ManifestEntry) -> None:
        rel = os.path.relpath(entry.file, self.path)
        line = json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "id": entry.id,
                "file": rel,
                "offset": entry.offset,
                "views": list(entry.views),
                "verdict_score": entry.verdict_score,
                "oracle_success": entry.oracle_success,
                "task_id": entry.task_id,
                "iteration": entry.iteration,
            }
        )
        with open(self._manifest_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def append(self, traj: Trajectory, views: tuple[str, ...] = ("raw",)) -> ManifestEntry:
        for v in views:
            if v not in VIEWS:
                raise StoreError(f"unknown view name {v!r}")
        with self._lock:
            if traj.id in self._entries:
                raise StoreError(f"duplicate trajectory id {traj.id}")
            file = self._episodes_dir / f"{traj.id}.json"
            with open(file, "w", encoding="utf-8") as fh:
                json.dump(traj.to_dict(), fh)
            entry = ManifestEntry(
                id=traj.id,
                file=str(file.resolve()),
                offset=0,
                views=tuple(views),
                verdict_score=traj.verdict.score if traj.verdict else None,
                oracle_success=traj.oracle_success,
                task_id=traj.task_id,
                iteration=traj.iteration,
            )
            self._write_line(entry)
            self._entries[traj.id] = entry
            return entry

    def attach_verdict(self, traj_id: str, verdict: Verdict, extra_views: tuple[str, ...] = ()) -> ManifestEntry:
        """Record a verdict (and optional new view tags) for an existing entry.

        The episode file is rewritten with the verdict embedded; manifest history
        is preserved by appending an update line rather than editing old ones.
        """
        for v in extra_views:
            if v not in VIEWS:
                raise StoreError(f"unknown view name {v!r}")
        with self._lock:
            entry = self._entries.get(traj_id)
            if entry is None:
                raise StoreError(f"unknown trajectory id {traj_id}")
            traj = entry.load()
            traj.verdict = verdict
            with open(entry.file, "w", encoding="utf-8") as fh:
                json.dump(traj.to_dict(), fh)
            views = entry.views + tuple(v for v in extra_views if v not in entry.views)
            updated = replace(entry, views=views, verdict_score=verdict.score)
            self._write_line(updated)
            self._entries[traj_id] = updated
            return updated

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list[str]:
        return list(self._entries)

    def get(self, traj_id: str) -> Trajectory:
        entry = self._entries.get(traj_id)
        if entry is None:
            raise StoreError(f"unknown trajectory id {traj_id}")
        return entry.load()

    def entries(self) -> list[ManifestEntry]:
        return list(self._entries.values())

    def __iter__(self) -> Iterator[Trajectory]:
        for entry in self._entries.values():
            yield entry.load()


def open_store(path: str | os.PathLike, mode: str = "read") -> DatasetStore:
    return DatasetStore(path, mode=mode)


def make_manifest(
    store: DatasetStore,
    view: str = "union",
    predicate: Callable[[ManifestEntry], bool] | None = None,
    name: str | None = None,
) -> DatasetManifest:
    """Manifest of store entries matching the view tag and predicate, in insertion order.

    The "union" view selects every entry regardless of tags.
    """
    if view not in VIEWS:
        raise StoreError(f"unknown view name {view!r}")
    selected = []
    for entry in store.entries():
        if view != "union" and view not in entry.views:
            continue
        if predicate is not None and not predicate(entry):
            continue
        selected.append(entry)
    return DatasetManifest(name=name or f"{store.path.name}:{view}", view=view, entries=tuple(selected))
