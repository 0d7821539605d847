"""Immutable, content-addressed codebase snapshots."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional

from .errors import SnapshotMissing

SKIP_DIRS = {".git", "__pycache__", ".venv", "node_modules", ".mypy_cache", ".pytest_cache"}


def blob_digest(content: str) -> str:
    return hashlib.sha256(content.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CodebaseSnapshot:
    """A frozen mapping of path -> file text plus provenance.

    ``lineage`` lists the change descriptions applied since the baseline, in
    order; derived snapshots extend their parent's lineage.
    """

    files: Mapping[str, str]
    base_iteration: int = 0
    lineage: tuple[str, ...] = ()
    snapshot_id: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "files", MappingProxyType(dict(sorted(self.files.items()))))
        object.__setattr__(self, "lineage", tuple(self.lineage))
        object.__setattr__(self, "snapshot_id", self.compute_id())

    def compute_id(self) -> str:
        manifest = {"files": {p: blob_digest(c) for p, c in self.files.items()},
                    "base_iteration": self.base_iteration, "lineage": list(self.lineage)}
        return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:24]

    def read(self, path: str) -> str:
        return self.files[path]

    def derive(self, changes: Mapping[str, str], base_iteration: int, descriptions=()) -> "CodebaseSnapshot":
        files = dict(self.files)
        files.update(changes)
        return CodebaseSnapshot(files, base_iteration, self.lineage + tuple(descriptions))

    def diff_paths(self, other: "CodebaseSnapshot") -> set[str]:
        paths = set(self.files) | set(other.files)
        return {p for p in paths if self.files.get(p) != other.files.get(p)}

    @classmethod
    def from_directory(cls, root: Path, suffixes: Optional[tuple[str, ...]] = None,
                       max_file_bytes: int = 1_000_000) -> "CodebaseSnapshot":
        root = Path(root)
        files = {}
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames[:] = sorted(d for d in dirnames if d not in SKIP_DIRS and not d.startswith("."))
            for name in sorted(filenames):
                path = Path(dirpath) / name
                if suffixes and path.suffix not in suffixes:
                    continue
                if path.stat().st_size > max_file_bytes:
                    continue
                try:
                    text = path.read_text(encoding="utf-8")
                except UnicodeDecodeError:
                    continue
                files[path.relative_to(root).as_posix()] = text
        return cls(files)

    def materialize(self, target: Path) -> Path:
        target = Path(target)
        for rel, content in self.files.items():
            dest = target / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_text(content, encoding="utf-8")
        return target


class SnapshotStore:
    """Snapshots by id, optionally persisted as ``blobs/<digest>`` + ``<id>.json`` manifests."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, CodebaseSnapshot] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            (self.directory / "blobs").mkdir(parents=True, exist_ok=True)

    def put(self, snap: CodebaseSnapshot) -> str:
        with self._lock:
            self._mem[snap.snapshot_id] = snap
        if self.directory is not None:
            manifest_path = self.directory / f"{snap.snapshot_id}.json"
            if not manifest_path.exists():
                files = {}
                for path, content in snap.files.items():
                    digest = blob_digest(content)
                    blob = self.directory / "blobs" / digest
                    if not blob.exists():
                        blob.write_text(content, encoding="utf-8")
                    files[path] = digest
                manifest = {"files": files, "base_iteration": snap.base_iteration, "lineage": list(snap.lineage)}
                tmp = manifest_path.with_suffix(".tmp")
                tmp.write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")
                os.replace(tmp, manifest_path)
        return snap.snapshot_id

    def get(self, snapshot_id: str) -> CodebaseSnapshot:
        with self._lock:
            if snapshot_id in self._mem:
                return self._mem[snapshot_id]
        if self.directory is not None:
            manifest_path = self.directory / f"{snapshot_id}.json"
            if manifest_path.exists():
                manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
                files = {p: (self.directory / "blobs" / d).read_text(encoding="utf-8")
                         for p, d in manifest["files"].items()}
                snap = CodebaseSnapshot(files, manifest["base_iteration"], tuple(manifest["lineage"]))
                if snap.snapshot_id != snapshot_id:
                    raise SnapshotMissing(f"snapshot {snapshot_id} is corrupt")
                with self._lock:
                    self._mem[snapshot_id] = snap
                return snap
        raise SnapshotMissing(f"snapshot {snapshot_id} not found")

    def __contains__(self, snapshot_id: str) -> bool:
        try:
            self.get(snapshot_id)
        except SnapshotMissing:
            return False
        return True
