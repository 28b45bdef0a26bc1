"""Event-sourced project persistence and the content-addressed asset store.

One directory per project:

    <data_dir>/<project_id>/
        project.json            identity header (id, name, created wall time)
        events.ndjson           append-only log, one UTF-8 JSON event per line
        writer.lock             current writer lease {token, acquired_at, expires_at}
        assets/<sha256>         asset bytes, keyed by content hash
        assets/<sha256>.json    provenance sidecar
        sessions/<id>.ndjson    telemetry log (see metrics module)
        exports/                assembly manifests and concat lists

A project is fully portable by copying its directory. The event log is the
source of truth: ``load_project`` folds it from scratch, so replay equals the
live snapshot by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import shutil
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

from . import errors
from .model import Modality, ProjectState, canonical_json, replay

_SLUG_RE = re.compile(r"[^a-z0-9]+")

LEASE_TTL_SECONDS = 300.0


def slugify(name: str) -> str:
    slug = _SLUG_RE.sub("-", name.strip().lower()).strip("-")
    return slug or "project"


@dataclass
class Asset:
    """Immutable content-addressed media artifact with producer provenance."""

    asset_id: str  # sha256 of bytes, lowercase hex
    modality: Modality
    media_locator: str  # path relative to the project directory
    metadata: dict[str, Any]
    producer_node_id: str
    producer_batch_id: str
    created_at: str

    @property
    def display_id(self) -> str:
        return self.asset_id[:16]

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "modality": self.modality.value,
            "media_locator": self.media_locator,
            "metadata": dict(self.metadata),
            "producer_node_id": self.producer_node_id,
            "producer_batch_id": self.producer_batch_id,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Asset":
        return cls(
            asset_id=data["asset_id"],
            modality=Modality(data["modality"]),
            media_locator=data["media_locator"],
            metadata=dict(data["metadata"]),
            producer_node_id=data["producer_node_id"],
            producer_batch_id=data["producer_batch_id"],
            created_at=data["created_at"],
        )


@dataclass
class WriterLease:
    project_id: str
    token: str
    path: Path

    def is_current(self) -> bool:
        try:
            data = json.loads(self.path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        return data.get("token") == self.token


@dataclass
class EventLog:
    path: Path
    fsync: bool = True
    next_seq: int = 1

    def append(self, kind: str, payload: dict, ts: Optional[str] = None) -> int:
        record = {
            "seq": self.next_seq,
            "ts": ts if ts is not None else _now_iso(),
            "kind": kind,
            "payload": payload,
        }
        line = canonical_json(record) + "\n"
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        except OSError as exc:
            raise errors.StorageFailure(f"cannot append to {self.path}: {exc}")
        seq = self.next_seq
        self.next_seq += 1
        return seq


def _now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + f".{int(time.time_ns() // 1_000_000) % 1000:03d}Z"


def read_events(path: Path) -> Iterator[dict]:
    if not path.exists():
        return
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise errors.StorageFailure(f"{path}:{line_no}: corrupt event record: {exc}")
            yield record


class ProjectStore:
    """Filesystem persistence rooted at ``data_dir``. One writer per project."""

    def __init__(self, data_dir: str | Path, *, fsync: bool = True):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync

    # -- paths ----------------------------------------------------------------

    def project_dir(self, project_id: str) -> Path:
        return self.data_dir / project_id

    def _header_path(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "project.json"

    def _events_path(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "events.ndjson"

    def _lease_path(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "writer.lock"

    def assets_dir(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "assets"

    def sessions_dir(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "sessions"

    def exports_dir(self, project_id: str) -> Path:
        return self.project_dir(project_id) / "exports"

    # -- project lifecycle ------------------------------------------------------

    def project_exists(self, project_id: str) -> bool:
        return self._header_path(project_id).exists()

    def list_projects(self) -> list[dict]:
        out = []
        if not self.data_dir.exists():
            return out
        for child in sorted(self.data_dir.iterdir()):
            header = child / "project.json"
            if header.exists():
                out.append(json.loads(header.read_text("utf-8")))
        return out

    def create_project_dir(self, project_id: str, name: str) -> None:
        pdir = self.project_dir(project_id)
        if self._header_path(project_id).exists():
            raise errors.ProjectExists(f"project {project_id} already exists")
        pdir.mkdir(parents=True, exist_ok=True)
        self.assets_dir(project_id).mkdir(exist_ok=True)
        self.sessions_dir(project_id).mkdir(exist_ok=True)
        self.exports_dir(project_id).mkdir(exist_ok=True)
        header = {"project_id": project_id, "name": name, "created_at": _now_iso()}
        self._header_path(project_id).write_text(canonical_json(header) + "\n", "utf-8")

    def delete_project(self, project_id: str) -> dict:
        """Remove the whole project directory; other projects are untouched."""
        if not self.project_exists(project_id):
            raise errors.UnknownProject(f"no project {project_id}")
        state = self.load_state(project_id)
        counts = {
            "nodes": len(state.nodes),
            "events": sum(1 for _ in read_events(self._events_path(project_id))),
            "assets": len(list(self.iter_asset_ids(project_id))),
        }
        shutil.rmtree(self.project_dir(project_id))
        return counts

    # -- writer lease -------------------------------------------------------------

    def acquire_writer(self, project_id: str, *, steal: bool = False) -> WriterLease:
        """Take the single writer lease. ``steal`` forcibly reissues it, which
        invalidates any holder of the previous token (they fail StaleWriter)."""
        if not self.project_exists(project_id):
            raise errors.UnknownProject(f"no project {project_id}")
        path = self._lease_path(project_id)
        now = time.time()
        if path.exists() and not steal:
            try:
                current = json.loads(path.read_text("utf-8"))
            except (OSError, json.JSONDecodeError):
                current = {}
            if current.get("expires_at", 0) > now:
                raise errors.LeaseHeld(f"project {project_id} writer lease is held")
        token = uuid.uuid4().hex
        path.write_text(canonical_json({
            "token": token,
            "acquired_at": now,
            "expires_at": now + LEASE_TTL_SECONDS,
        }) + "\n", "utf-8")
        return WriterLease(project_id=project_id, token=token, path=path)

    def release_writer(self, lease: WriterLease) -> None:
        if lease.is_current():
            lease.path.unlink(missing_ok=True)

    # -- events ---------------------------------------------------------------------

    def open_log(self, project_id: str) -> EventLog:
        path = self._events_path(project_id)
        last_seq = 0
        for record in read_events(path):
            last_seq = record["seq"]
        return EventLog(path=path, fsync=self.fsync, next_seq=last_seq + 1)

    def append_event(self, project_id: str, lease: WriterLease, log: EventLog,
                     kind: str, payload: dict) -> int:
        """Durably append one event. The lease must still be current."""
        if not lease.is_current():
            raise errors.StaleWriter(f"writer lease for {project_id} was superseded")
        expected = log.next_seq
        seq = log.append(kind, payload)
        if seq != expected:  # defensive; EventLog is the only appender
            raise errors.StorageFailure(f"event seq skew: wrote {seq}, expected {expected}")
        return seq

    def load_state(self, project_id: str) -> ProjectState:
        """Fold the full event log from empty state. Read-only and repeatable."""
        if not self.project_exists(project_id):
            raise errors.UnknownProject(f"no project {project_id}")
        seq = 0
        def stream():
            nonlocal seq
            for record in read_events(self._events_path(project_id)):
                if record["seq"] != seq + 1:
                    raise errors.StorageFailure(
                        f"event log gap in {project_id}: {seq} -> {record['seq']}")
                seq = record["seq"]
                yield record["kind"], record["payload"]
        return replay(project_id, stream())

    def load_project(self, project_id: str) -> tuple[dict, ProjectState]:
        state = self.load_state(project_id)
        header = json.loads(self._header_path(project_id).read_text("utf-8"))
        return header, state

    # -- assets ---------------------------------------------------------------------

    def put_asset(self, project_id: str, data: bytes, modality: Modality,
                  metadata: dict, producer_node_id: str, producer_batch_id: str) -> Asset:
        """Idempotent by content. Same bytes from a different producer is a
        provenance conflict (executors salt outputs to avoid honest collisions)."""
        if not data:
            raise errors.EmptyPayload("asset bytes must be non-empty")
        asset_id = hashlib.sha256(data).hexdigest()
        adir = self.assets_dir(project_id)
        blob_path = adir / asset_id
        sidecar_path = adir / f"{asset_id}.json"
        if sidecar_path.exists():
            existing = Asset.from_dict(json.loads(sidecar_path.read_text("utf-8")))
            if existing.producer_node_id != producer_node_id:
                raise errors.ProvenanceConflict(
                    f"asset {asset_id[:16]} already produced by node {existing.producer_node_id}",
                    asset_id=asset_id, existing_producer=existing.producer_node_id,
                    new_producer=producer_node_id)
            return existing
        asset = Asset(
            asset_id=asset_id,
            modality=modality,
            media_locator=f"assets/{asset_id}",
            metadata=dict(metadata),
            producer_node_id=producer_node_id,
            producer_batch_id=producer_batch_id,
            created_at=_now_iso(),
        )
        tmp = blob_path.with_suffix(".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, blob_path)
        sidecar_path.write_text(canonical_json(asset.to_dict()) + "\n", "utf-8")
        return asset

    def get_asset(self, project_id: str, asset_id: str) -> Asset:
        sidecar = self.assets_dir(project_id) / f"{asset_id}.json"
        if not sidecar.exists():
            raise errors.UnknownAsset(f"no asset {asset_id} in project {project_id}")
        return Asset.from_dict(json.loads(sidecar.read_text("utf-8")))

    def read_asset_bytes(self, project_id: str, asset_id: str) -> bytes:
        blob = self.assets_dir(project_id) / asset_id
        if not blob.exists():
            raise errors.UnknownAsset(f"no asset bytes for {asset_id}")
        return blob.read_bytes()

    def iter_asset_ids(self, project_id: str) -> Iterator[str]:
        adir = self.assets_dir(project_id)
        if not adir.exists():
            return
        for sidecar in sorted(adir.glob("*.json")):
            yield sidecar.name[: -len(".json")]

    def verify_asset(self, project_id: str, asset_id: str) -> bool:
        data = self.read_asset_bytes(project_id, asset_id)
        return hashlib.sha256(data).hexdigest() == asset_id

    def gc_assets(self, project_id: str, referenced: set[str]) -> list[str]:
        """Explicitly delete assets not in ``referenced``. Never automatic."""
        removed = []
        for asset_id in list(self.iter_asset_ids(project_id)):
            if asset_id not in referenced:
                (self.assets_dir(project_id) / asset_id).unlink(missing_ok=True)
                (self.assets_dir(project_id) / f"{asset_id}.json").unlink(missing_ok=True)
                removed.append(asset_id)
        return removed


# ---------------------------------------------------------------------------
# Normalized directory fingerprints, for replay- and API-equivalence checks.
# Wall-clock fields are replaced with a fixed sentinel; everything else must
# match byte-for-byte.
# ---------------------------------------------------------------------------

_TS_KEYS = {"ts", "ts_ms", "created_at", "acquired_at", "expires_at", "started_at", "finished_at"}
_TS_SENTINEL = "<ts>"


def _normalize_json_value(value: Any) -> Any:
    if isinstance(value, dict):
        return {
            k: (_TS_SENTINEL if k in _TS_KEYS else _normalize_json_value(v))
            for k, v in value.items()
        }
    if isinstance(value, list):
        return [_normalize_json_value(v) for v in value]
    return value


def normalize_jsonl_bytes(data: bytes) -> bytes:
    out_lines = []
    for line in data.decode("utf-8").splitlines():
        if not line.strip():
            continue
        out_lines.append(canonical_json(_normalize_json_value(json.loads(line))))
    return ("\n".join(out_lines) + "\n").encode("utf-8")


def normalized_fingerprint(project_dir: str | Path) -> dict[str, str]:
    """Map of relative path -> sha256 of timestamp-normalized content.

    The writer lease is runtime-only and excluded.
    """
    root = Path(project_dir)
    out: dict[str, str] = {}
    for path in sorted(root.rglob("*")):
        if path.is_dir():
            continue
        rel = path.relative_to(root).as_posix()
        if rel == "writer.lock" or rel.endswith(".tmp"):
            continue
        data = path.read_bytes()
        if rel.endswith(".ndjson") or rel.endswith(".json"):
            data = normalize_jsonl_bytes(data)
        out[rel] = hashlib.sha256(data).hexdigest()
    return out
