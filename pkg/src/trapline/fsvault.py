"""Content-addressed filesystem history.

Mutation notifications from a session's environment become an append-only,
linear chain of commits rooted at a baseline commit, so any historical state
can be listed, diffed, or materialized again later (including files the
attacker deleted).

On-disk layout (documented so external readers can verify):

    objects/<2-hex-prefix>/<remaining 62 hex>   raw blob bytes, named by digest
    commits/<session_id>/<seq, 6 digits>-<commit_id>   one JSON doc per commit

Object ids are SHA-512 truncated to 256 bits (64 hex chars). The store is
append-only and deduplicated by digest; a digest collision (same id,
different bytes) aborts rather than overwriting.

Commit document: {"commit_id", "parent_id", "session_id", "ts", "message",
"tree": {path: blob digest}}. The commit_id is the digest of the canonical
JSON of (parent_id, session_id, ts, message, tree), so ids are content
addresses too.
"""
from __future__ import annotations

import hashlib
import json
import posixpath
import threading
from dataclasses import dataclass, field
from pathlib import Path


class VaultError(Exception):
    pass


class CollisionError(VaultError):
    """Two different byte strings produced the same object id."""


def object_digest(data: bytes) -> str:
    return hashlib.sha512(data).digest()[:32].hex()


def tree_digest(tree: dict[str, str]) -> str:
    """Deterministic digest of a path -> blob-digest map (sorted path order)."""
    acc = hashlib.sha512()
    for path in sorted(tree):
        acc.update(path.encode("utf-8") + b"\x00" + tree[path].encode("ascii") + b"\x01")
    return acc.digest()[:32].hex()


def normalize_path(path: str) -> str:
    """Environment-relative path, normalized: leading slash, no "..", no
    duplicate separators."""
    if not path:
        raise VaultError("empty path")
    norm = posixpath.normpath("/" + path.replace("\\", "/").lstrip("/"))
    if norm.startswith("/..") or "/../" in norm or norm == "/":
        raise VaultError(f"path escapes environment root: {path!r}")
    return norm


@dataclass(frozen=True)
class FsEvent:
    session_id: str
    kind: str  # create | modify | delete
    path: str
    timestamp: float
    content_digest: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("create", "modify", "delete"):
            raise VaultError(f"bad fs event kind: {self.kind!r}")
        object.__setattr__(self, "path", normalize_path(self.path))
        if self.kind == "delete" and self.content_digest is not None:
            raise VaultError("delete events carry no content digest")


@dataclass(frozen=True)
class Commit:
    commit_id: str
    parent_id: str | None
    session_id: str
    ts: float
    message: str
    tree: dict[str, str]

    def to_doc(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "parent_id": self.parent_id,
            "session_id": self.session_id,
            "ts": self.ts,
            "message": self.message,
            "tree": self.tree,
        }


def _commit_id(parent_id: str | None, session_id: str, ts: float, message: str,
               tree: dict[str, str]) -> str:
    canonical = json.dumps(
        {"parent_id": parent_id, "session_id": session_id, "ts": ts,
         "message": message, "tree": tree},
        separators=(",", ":"), sort_keys=True)
    return object_digest(canonical.encode("utf-8"))


@dataclass(frozen=True)
class ChangeSet:
    added: frozenset[str] = frozenset()
    modified: frozenset[str] = frozenset()
    deleted: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if (self.added & self.modified) or (self.added & self.deleted) or (
                self.modified & self.deleted):
            raise VaultError("change sets must be pairwise disjoint")

    @property
    def empty(self) -> bool:
        return not (self.added or self.modified or self.deleted)


class BlobStore:
    """Append-only blob storage under objects/, deduplicated by digest."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest[2:]

    def put(self, data: bytes) -> str:
        digest = object_digest(data)
        with self._lock:
            existing = self._cache.get(digest)
            path = self._path(digest)
            if existing is None and path.exists():
                existing = path.read_bytes()
                self._cache[digest] = existing
            if existing is not None:
                if existing != data:
                    raise CollisionError(f"object id collision on {digest}")
                return digest
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            self._cache[digest] = data
        return digest

    def get(self, digest: str) -> bytes:
        with self._lock:
            if digest in self._cache:
                return self._cache[digest]
        path = self._path(digest)
        if not path.exists():
            raise VaultError(f"unknown object: {digest}")
        data = path.read_bytes()
        with self._lock:
            self._cache[digest] = data
        return data

    def has(self, digest: str) -> bool:
        with self._lock:
            if digest in self._cache:
                return True
        return self._path(digest).exists()


class Vault:
    """Per-session commit chains over a shared blob store."""

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self.blobs = BlobStore(self.root / "objects")
        self.commits_root = self.root / "commits"
        self.commits_root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._commits: dict[str, Commit] = {}
        self._chains: dict[str, list[str]] = {}  # session_id -> commit ids, baseline first
        self._load()

    def _load(self) -> None:
        for session_dir in sorted(self.commits_root.iterdir()) if self.commits_root.exists() else []:
            if not session_dir.is_dir():
                continue
            chain = []
            for rec in sorted(session_dir.iterdir()):
                doc = json.loads(rec.read_text(encoding="utf-8"))
                commit = Commit(**doc)
                self._commits[commit.commit_id] = commit
                chain.append(commit.commit_id)
            if chain:
                self._chains[session_dir.name] = chain

    def _persist(self, commit: Commit, seq: int) -> None:
        session_dir = self.commits_root / commit.session_id
        session_dir.mkdir(parents=True, exist_ok=True)
        rec = session_dir / f"{seq:06d}-{commit.commit_id}"
        rec.write_text(json.dumps(commit.to_doc(), sort_keys=True), encoding="utf-8")

    # -- operations ----------------------------------------------------

    def record_baseline(self, session_id: str, tree_bytes: dict[str, bytes],
                        ts: float) -> Commit:
        """Parentless commit anchoring the session's history at the pristine
        environment state."""
        with self._lock:
            if session_id in self._chains:
                raise VaultError(f"session {session_id} already has a baseline")
            tree = {normalize_path(p): self.blobs.put(data)
                    for p, data in tree_bytes.items()}
            cid = _commit_id(None, session_id, ts, "baseline", tree)
            commit = Commit(cid, None, session_id, ts, "baseline", tree)
            self._commits[cid] = commit
            self._chains[session_id] = [cid]
            self._persist(commit, 0)
            return commit

    def record_event(self, event: FsEvent, data: bytes | None = None):
        """Apply one mutation event on top of the session head.

        Returns (commit | None, status) where status is one of "committed",
        "unchanged" (content identical to parent, commit suppressed) or
        "absent" (delete of a path the parent tree does not contain,
        suppressed; caller should emit a warning event).
        """
        with self._lock:
            chain = self._chains.get(event.session_id)
            if not chain:
                raise VaultError(f"no baseline for session {event.session_id}")
            parent = self._commits[chain[-1]]
            tree = dict(parent.tree)
            if event.kind == "delete":
                if event.path not in tree:
                    return None, "absent"
                del tree[event.path]
            else:
                if data is None:
                    raise VaultError("create/modify events need content bytes")
                digest = self.blobs.put(data)
                if event.content_digest is not None and event.content_digest != digest:
                    raise VaultError("event digest does not match content")
                if tree.get(event.path) == digest:
                    return None, "unchanged"
                tree[event.path] = digest
            message = f"{event.kind} {event.path}"
            cid = _commit_id(parent.commit_id, event.session_id, event.timestamp,
                             message, tree)
            commit = Commit(cid, parent.commit_id, event.session_id,
                            event.timestamp, message, tree)
            self._commits[cid] = commit
            chain.append(cid)
            self._persist(commit, len(chain) - 1)
            return commit, "committed"

    def history(self, session_id: str) -> list[Commit]:
        with self._lock:
            chain = self._chains.get(session_id, [])
            return [self._commits[cid] for cid in chain]

    def get_commit(self, commit_id: str) -> Commit:
        with self._lock:
            commit = self._commits.get(commit_id)
            if commit is None and len(commit_id) >= 8:
                hits = [c for cid, c in self._commits.items()
                        if cid.startswith(commit_id)]
                if len(hits) == 1:
                    return hits[0]
                if len(hits) > 1:
                    raise VaultError(f"ambiguous commit prefix: {commit_id}")
        if commit is None:
            raise VaultError(f"unknown commit: {commit_id}")
        return commit

    def load_tree(self, commit_id: str) -> dict[str, bytes]:
        """The commit's tree as an in-memory path -> content map."""
        commit = self.get_commit(commit_id)
        return {path: self.blobs.get(digest) for path, digest in commit.tree.items()}

    def checkout(self, commit_id: str, destination: Path | str) -> Path:
        """Materialize the commit's tree byte-for-byte under `destination`."""
        dest = Path(destination)
        dest.mkdir(parents=True, exist_ok=True)
        for path, data in self.load_tree(commit_id).items():
            target = dest / path.lstrip("/")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        return dest

    def diff(self, a: str, b: str) -> ChangeSet:
        """Path-level change set such that applying it to a's tree (removing
        deleted paths, taking b's content for added and modified ones) yields
        b's tree."""
        tree_a = self.get_commit(a).tree
        tree_b = self.get_commit(b).tree
        added = {p for p in tree_b if p not in tree_a}
        deleted = {p for p in tree_a if p not in tree_b}
        modified = {p for p in tree_b if p in tree_a and tree_a[p] != tree_b[p]}
        return ChangeSet(frozenset(added), frozenset(modified), frozenset(deleted))


@dataclass
class _Pending:
    event: FsEvent
    data: bytes | None
    last_ts: float


class Watcher:
    """Debouncing adapter between raw mutation notifications and the vault.

    Holds at most one pending event per path; a modify arriving within the
    window after a pending create/modify of the same path coalesces into it
    (final content wins, original kind is kept). Deletes and re-creates never
    coalesce. Events settle — i.e. become commits — once their window expires
    (checked lazily on later notifications) or on flush; settle order is by
    each event's final mutation time.
    """

    def __init__(self, session_id: str, vault: Vault, clock,
                 window: float = 0.05, on_commit=None, on_suppressed=None) -> None:
        self.session_id = session_id
        self.vault = vault
        self.clock = clock
        self.window = window
        self.on_commit = on_commit
        self.on_suppressed = on_suppressed
        self._pending: dict[str, _Pending] = {}
        self._lock = threading.Lock()
        self.closed = False

    def notify(self, kind: str, path: str, data: bytes | None = None) -> None:
        if self.closed:
            raise VaultError("watcher is closed")
        now = self.clock.now()
        with self._lock:
            self._expire(now)
            path = normalize_path(path)
            pending = self._pending.get(path)
            if (pending is not None and kind == "modify"
                    and pending.event.kind in ("create", "modify")):
                digest = object_digest(data) if data is not None else None
                pending.event = FsEvent(self.session_id, pending.event.kind, path,
                                        now, digest)
                pending.data = data
                pending.last_ts = now
                return
            if pending is not None:
                self._settle(path)
            digest = object_digest(data) if kind != "delete" and data is not None else None
            event = FsEvent(self.session_id, kind, path, now, digest)
            self._pending[path] = _Pending(event, data, now)

    def _expire(self, now: float) -> None:
        ripe = [p for p, pend in self._pending.items()
                if pend.last_ts + self.window <= now]
        for path in sorted(ripe, key=lambda p: self._pending[p].last_ts):
            self._settle(path)

    def _settle(self, path: str) -> None:
        pend = self._pending.pop(path)
        commit, status = self.vault.record_event(pend.event, pend.data)
        if status == "committed" and self.on_commit is not None:
            self.on_commit(commit, pend.event)
        elif status != "committed" and self.on_suppressed is not None:
            self.on_suppressed(pend.event, status)

    def flush(self) -> None:
        """Settle everything still pending, in final-mutation order."""
        with self._lock:
            for path in sorted(self._pending, key=lambda p: self._pending[p].last_ts):
                self._settle(path)

    def close(self) -> None:
        self.flush()
        self.closed = True
