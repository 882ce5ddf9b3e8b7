"""Shared-buffer fabric: handle registry plus publish/acquire visibility.

Models a unified memory pool mapped to every backend without copies.  The
registry stores references only.  Coherence is one-way: a writer's changes
become visible to consumers only at an explicit ``publish``; a consumer that
polls without ``acquire`` is permitted to observe stale content.  Staleness
is modeled logically through per-buffer version counters rather than by
emulating caches, which keeps the bug class deterministic and testable.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .buffers import MatrixBuffer
from .errors import (CapacityError, DuplicateRegistrationError,
                     InvalidHandleError)


def payload_checksum(buffer: MatrixBuffer) -> int:
    return zlib.crc32(np.ascontiguousarray(buffer.data).view(np.uint8))


@dataclass
class SharedBuffer:
    handle: int
    buffer: MatrixBuffer
    version: int = 0
    publish_stamp: int = 0
    seen_versions: dict = field(default_factory=dict)  # consumer -> version
    lock: threading.Lock = field(default_factory=threading.Lock)


class Fabric:
    """Thread-safe handle registry with explicit publish/acquire."""

    def __init__(self, max_handles: int = 1 << 20):
        self._lock = threading.Lock()
        self._entries: dict[int, SharedBuffer] = {}
        self._by_identity: dict[int, int] = {}
        self._next_handle = 1
        self._max_handles = max_handles

    def register(self, buffer: MatrixBuffer) -> int:
        """Map a buffer into the fabric; stores a reference, never a copy."""
        with self._lock:
            if id(buffer) in self._by_identity:
                raise DuplicateRegistrationError(
                    f"buffer already registered as handle {self._by_identity[id(buffer)]}")
            if len(self._entries) >= self._max_handles:
                raise CapacityError(f"registry full ({self._max_handles} handles)")
            handle = self._next_handle
            self._next_handle += 1
            self._entries[handle] = SharedBuffer(handle, buffer)
            self._by_identity[id(buffer)] = handle
            return handle

    def unmap(self, handle: int):
        with self._lock:
            entry = self._entries.pop(handle, None)
            if entry is None:
                raise InvalidHandleError(f"handle {handle} is not mapped")
            self._by_identity.pop(id(entry.buffer), None)

    def _entry(self, handle: int) -> SharedBuffer:
        with self._lock:
            entry = self._entries.get(handle)
            if entry is None:
                raise InvalidHandleError(f"handle {handle} is not mapped")
            return entry

    def get(self, handle: int) -> MatrixBuffer:
        """Poll the buffer without acquiring (may observe unpublished state)."""
        return self._entry(handle).buffer

    def publish(self, handle: int) -> int:
        """Make all prior writes visible; returns the new version."""
        entry = self._entry(handle)
        with entry.lock:
            entry.version += 1
            entry.publish_stamp = payload_checksum(entry.buffer)
            return entry.version

    def acquire(self, handle: int, consumer: str = "default") -> int:
        """Latest published version; records this consumer's visibility."""
        entry = self._entry(handle)
        with entry.lock:
            entry.seen_versions[consumer] = entry.version
            return entry.version

    def seen_version(self, handle: int, consumer: str = "default") -> int:
        entry = self._entry(handle)
        with entry.lock:
            return entry.seen_versions.get(consumer, 0)

    def read_stamped(self, handle: int) -> tuple[int, int, int]:
        """(version, publish stamp, live checksum) under the buffer lock.

        Because the lock excludes publishers for the duration of the read,
        the live checksum of a published buffer always matches its stamp:
        an acquire-then-read can never see a torn mix of two versions.
        """
        entry = self._entry(handle)
        with entry.lock:
            return entry.version, entry.publish_stamp, payload_checksum(entry.buffer)

    def write_locked(self, handle: int):
        """Context manager granting exclusive write access to the payload."""
        entry = self._entry(handle)

        class _Guard:
            def __enter__(self_guard):
                entry.lock.acquire()
                return entry.buffer

            def __exit__(self_guard, *exc):
                entry.lock.release()
                return False

        return _Guard()

    def registered_count(self) -> int:
        with self._lock:
            return len(self._entries)
