"""Shared blob store with atomic-commit visibility and a round directory layout.

Two backends: an in-memory store for tests and single-process runs, and a
local-directory store whose commits go through write-temp-then-link so a
listing never observes a half-written blob. Committed blobs are immutable;
a second put to the same key is rejected, which keeps task retries
idempotent and prevents double-counting of client updates.

Round layout:

    rounds/<r>/updates/<client_id>.fau
    rounds/<r>/global.fau
    rounds/<r>/manifest.json
"""

from __future__ import annotations

import os
import re
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

from . import codec
from .errors import (
    CodecError,
    DuplicateKey,
    DuplicateUpdate,
    NotYetPublished,
    StoreReadError,
    StoreUnavailable,
    ValidationFailed,
)
from .model import GlobalModel

_CLIENT_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")


def validate_key(key: str) -> str:
    if not key:
        raise ValidationFailed("empty store key")
    parts = key.split("/")
    if any(p in ("", ".", "..") for p in parts):
        raise ValidationFailed(f"malformed store key {key!r}")
    return key


class BlobStore(Protocol):
    def put_atomic(self, key: str, data: bytes) -> None: ...
    def get(self, key: str) -> bytes: ...
    def list(self, prefix: str) -> list[tuple[str, int]]: ...
    def exists(self, key: str) -> bool: ...
    def delete(self, key: str) -> None: ...


@dataclass
class StoreHooks:
    """Test injection points; production code leaves these as None."""

    before_commit: Callable[[str], None] | None = None


class MemoryStore:
    """Dict-backed store; volatile, but honors the same commit semantics."""

    def __init__(self, hooks: StoreHooks | None = None):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.hooks = hooks or StoreHooks()

    def put_atomic(self, key: str, data: bytes) -> None:
        validate_key(key)
        staged = bytes(data)
        if self.hooks.before_commit:
            self.hooks.before_commit(key)
        with self._lock:
            if key in self._blobs:
                raise DuplicateKey(key)
            self._blobs[key] = staged

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._blobs[key]
            except KeyError:
                raise StoreReadError(key) from None

    def list(self, prefix: str) -> list[tuple[str, int]]:
        with self._lock:
            return sorted(
                (k, len(v)) for k, v in self._blobs.items() if k.startswith(prefix)
            )

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self._blobs

    def delete(self, key: str) -> None:
        with self._lock:
            self._blobs.pop(key, None)


class LocalDirStore:
    """Filesystem store: blobs are files under root, commits are atomic links.

    A put writes to root/.tmp/<uuid> and hard-links it to the final path;
    the link either fully succeeds or fails with EEXIST, so readers see
    only complete blobs and duplicate commits lose the race cleanly.
    Committed blobs survive process restarts.
    """

    TMP_DIR = ".tmp"

    def __init__(self, root: str | Path, hooks: StoreHooks | None = None):
        self.root = Path(root)
        self.hooks = hooks or StoreHooks()
        try:
            (self.root / self.TMP_DIR).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StoreUnavailable(f"cannot initialize store root {self.root}: {e}") from e

    def _path(self, key: str) -> Path:
        validate_key(key)
        return self.root / key

    def put_atomic(self, key: str, data: bytes) -> None:
        final = self._path(key)
        tmp = self.root / self.TMP_DIR / uuid.uuid4().hex
        try:
            final.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(data)
            if self.hooks.before_commit:
                self.hooks.before_commit(key)
            try:
                os.link(tmp, final)
            except FileExistsError:
                raise DuplicateKey(key) from None
            finally:
                tmp.unlink(missing_ok=True)
        except OSError as e:
            raise StoreUnavailable(f"store write failed for {key!r}: {e}") from e

    def get(self, key: str) -> bytes:
        try:
            return self._path(key).read_bytes()
        except FileNotFoundError:
            raise StoreReadError(key) from None
        except OSError as e:
            raise StoreUnavailable(f"store read failed for {key!r}: {e}") from e

    def list(self, prefix: str) -> list[tuple[str, int]]:
        validate_key(prefix.rstrip("/") or "x")
        out = []
        try:
            for path in self.root.rglob("*"):
                if not path.is_file():
                    continue
                rel = path.relative_to(self.root).as_posix()
                if rel.startswith(self.TMP_DIR + "/"):
                    continue
                if rel.startswith(prefix):
                    out.append((rel, path.stat().st_size))
        except OSError as e:
            raise StoreUnavailable(f"store listing failed: {e}") from e
        return sorted(out)

    def exists(self, key: str) -> bool:
        return self._path(key).is_file()

    def delete(self, key: str) -> None:
        try:
            self._path(key).unlink(missing_ok=True)
        except OSError as e:
            raise StoreUnavailable(f"store delete failed for {key!r}: {e}") from e


# --- round layout --------------------------------------------------------------

@dataclass(frozen=True)
class RoundPaths:
    round: int

    @property
    def prefix(self) -> str:
        return f"rounds/{self.round}/"

    @property
    def updates_prefix(self) -> str:
        return f"rounds/{self.round}/updates/"

    def update_key(self, client_id: str) -> str:
        if not _CLIENT_ID_RE.match(client_id):
            raise ValidationFailed(
                f"client id {client_id!r} must match [A-Za-z0-9_-]+ for store submission"
            )
        return f"{self.updates_prefix}{client_id}{codec.FILE_EXTENSION}"

    @property
    def result_key(self) -> str:
        return f"rounds/{self.round}/global{codec.FILE_EXTENSION}"

    @property
    def manifest_key(self) -> str:
        return f"rounds/{self.round}/manifest.json"


def put_update(store: BlobStore, round_no: int, client_id: str, data: bytes) -> None:
    """Validate and commit one client update for the round.

    The blob must decode as a FAUF record whose client_id and round match
    the submission; this is what keeps a corrupt or misdirected upload out
    of the fusion set.
    """
    paths = RoundPaths(round_no)
    key = paths.update_key(client_id)
    try:
        u = codec.decode_update(data)
    except CodecError as e:
        raise ValidationFailed(f"update for {client_id!r} does not decode: {e}") from e
    if u.client_id != client_id:
        raise ValidationFailed(
            f"record client_id {u.client_id!r} does not match submission {client_id!r}"
        )
    if u.round != round_no:
        raise ValidationFailed(f"record round {u.round} does not match submission round {round_no}")
    try:
        store.put_atomic(key, data)
    except DuplicateKey:
        raise DuplicateUpdate(round_no, client_id) from None


def count_updates(store: BlobStore, round_no: int) -> int:
    """Number of committed updates for the round (the monitor's M_r)."""
    return len(store.list(RoundPaths(round_no).updates_prefix))


def list_update_keys(store: BlobStore, round_no: int) -> list[tuple[str, int]]:
    return store.list(RoundPaths(round_no).updates_prefix)


def publish_global(store: BlobStore, round_no: int, model: GlobalModel) -> None:
    try:
        store.put_atomic(RoundPaths(round_no).result_key, codec.encode_global(model))
    except DuplicateKey:
        raise DuplicateKey(RoundPaths(round_no).result_key) from None


def fetch_global(store: BlobStore, round_no: int) -> GlobalModel:
    key = RoundPaths(round_no).result_key
    try:
        data = store.get(key)
    except StoreReadError:
        raise NotYetPublished(round_no) from None
    return codec.decode_global(data)


def fetch_global_bytes(store: BlobStore, round_no: int) -> bytes:
    try:
        return store.get(RoundPaths(round_no).result_key)
    except StoreReadError:
        raise NotYetPublished(round_no) from None
