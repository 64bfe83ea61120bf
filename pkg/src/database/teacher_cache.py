"""Append-only record file of precomputed teacher distributions."""

import json
import os
import struct
import threading
import zlib
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from loguru import logger

from ..utils.errors import CacheCorruptionError, CacheError
from ..utils.logger import log_cache_operation

try:  # pragma: no cover - POSIX only
    import fcntl
except ImportError:  # pragma: no cover
    fcntl = None

MAGIC = b"KDPLTC01"
DIGEST_SIZE = 32
_FOOTER_TAIL = struct.Struct("<Q")


@contextmanager
def _file_lock(path: Path, exclusive: bool):
    """Cross-process advisory lock; a no-op where fcntl is unavailable."""
    if fcntl is None:
        yield
        return
    with open(path, "a+") as lock_file:
        fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
        try:
            yield
        finally:
            fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)


def _index_key(image_id: str, digest: bytes) -> str:
    return f"{image_id}\t{digest.hex()}"


def encode_record(image_id: str, digest: bytes, probs: np.ndarray) -> bytes:
    """(u16 id length, id, 32-byte digest, u32 C, C float64, u32 crc32)."""
    if len(digest) != DIGEST_SIZE:
        raise CacheError(f"Class-set digest must be {DIGEST_SIZE} bytes")
    raw_id = image_id.encode("utf-8")
    values = np.ascontiguousarray(probs, dtype="<f8")
    body = (
        struct.pack("<H", len(raw_id))
        + raw_id
        + digest
        + struct.pack("<I", values.size)
        + values.tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode_record(buffer: bytes, offset: int) -> tuple[str, bytes, np.ndarray]:
    """Parse the record at `offset`, verifying its checksum."""
    try:
        (id_len,) = struct.unpack_from("<H", buffer, offset)
        pos = offset + 2
        image_id = buffer[pos : pos + id_len].decode("utf-8")
        pos += id_len
        digest = buffer[pos : pos + DIGEST_SIZE]
        pos += DIGEST_SIZE
        (count,) = struct.unpack_from("<I", buffer, pos)
        pos += 4
        probs = np.frombuffer(buffer, dtype="<f8", count=count, offset=pos).copy()
        pos += 8 * count
        (crc,) = struct.unpack_from("<I", buffer, pos)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CacheCorruptionError(f"Truncated cache record at offset {offset}: {e}")
    if zlib.crc32(buffer[offset:pos]) != crc:
        raise CacheCorruptionError(f"Checksum mismatch for record at offset {offset}")
    return image_id, digest, probs


def _footer_bytes(index: dict[str, int]) -> bytes:
    payload = json.dumps(index, sort_keys=True).encode("utf-8")
    return payload + _FOOTER_TAIL.pack(len(payload)) + MAGIC


def _read_record_bytes(f, offset: int) -> bytes:
    """Read one whole record starting at `offset` from an open file."""
    f.seek(offset)
    head = f.read(2)
    if len(head) < 2:
        raise CacheCorruptionError(f"Cache record offset {offset} is past the end")
    (id_len,) = struct.unpack("<H", head)
    middle = f.read(id_len + DIGEST_SIZE + 4)
    if len(middle) < id_len + DIGEST_SIZE + 4:
        raise CacheCorruptionError(f"Truncated cache record at offset {offset}")
    (count,) = struct.unpack_from("<I", middle, id_len + DIGEST_SIZE)
    tail = f.read(8 * count + 4)
    return head + middle + tail


class TeacherPredictionCache:
    """
    Teacher distributions keyed by (image id, class-set digest).

    Layout: magic header, records, then an index footer
    (JSON index, u64 index length, magic). New entries are buffered and
    appended on `flush`, which rewrites the footer under an exclusive lock.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock_path = self.path.with_suffix(self.path.suffix + ".lock")
        self._mutex = threading.RLock()
        self._index: dict[str, int] = {}
        self._pending: dict[str, tuple[str, bytes, np.ndarray]] = {}
        self._records_end = len(MAGIC)
        self.hits = 0
        self.misses = 0

        if self.path.exists():
            self._load()
        else:
            with _file_lock(self._lock_path, exclusive=True):
                self._write_footer(create=True)
            log_cache_operation("create", str(self.path))

    @classmethod
    def open_or_reset(cls, path: str | Path) -> "TeacherPredictionCache":
        """Open a cache, moving a corrupt file aside and starting fresh."""
        try:
            return cls(path)
        except CacheCorruptionError as e:
            path = Path(path)
            logger.error(f"Teacher cache {path} is corrupt ({e}); rebuilding")
            log_cache_operation("open", str(path), success=False, error=str(e))
            os.replace(path, path.with_suffix(path.suffix + ".corrupt"))
            return cls(path)

    # -- file layout --------------------------------------------------------

    def _read_footer(self, data: bytes) -> tuple[dict[str, int], int]:
        tail = _FOOTER_TAIL.size + len(MAGIC)
        if not data.startswith(MAGIC) or len(data) < len(MAGIC) + tail:
            raise CacheCorruptionError(f"{self.path} is not a teacher cache file")
        if data[-len(MAGIC) :] != MAGIC:
            raise CacheCorruptionError(f"{self.path} has no index footer")
        (length,) = _FOOTER_TAIL.unpack_from(data, len(data) - tail)
        start = len(data) - tail - length
        if start < len(MAGIC):
            raise CacheCorruptionError(f"{self.path} has a truncated index footer")
        try:
            index = json.loads(data[start : len(data) - tail].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CacheCorruptionError(f"Unreadable cache index in {self.path}: {e}")
        return {key: int(offset) for key, offset in index.items()}, start

    def _load(self) -> None:
        with _file_lock(self._lock_path, exclusive=False):
            data = self.path.read_bytes()
        self._index, self._records_end = self._read_footer(data)
        log_cache_operation("open", str(self.path))
        logger.debug(f"Opened teacher cache {self.path} with {len(self._index)} entries")

    def _write_footer(self, create: bool = False) -> None:
        mode = "wb" if create else "r+b"
        with open(self.path, mode) as f:
            if create:
                f.write(MAGIC)
            f.seek(self._records_end)
            f.truncate()
            f.write(_footer_bytes(self._index))

    # -- public API ---------------------------------------------------------

    def __len__(self) -> int:
        with self._mutex:
            return len(set(self._index) | set(self._pending))

    def __contains__(self, key: tuple[str, bytes]) -> bool:
        index_key = _index_key(*key)
        with self._mutex:
            return index_key in self._index or index_key in self._pending

    def get(self, image_id: str, digest: bytes) -> np.ndarray | None:
        """Stored probabilities, or None on a miss; corrupt records raise."""
        key = _index_key(image_id, digest)
        with self._mutex:
            if key in self._pending:
                self.hits += 1
                return self._pending[key][2].copy()
            offset = self._index.get(key)
            if offset is None:
                self.misses += 1
                return None
        with _file_lock(self._lock_path, exclusive=False):
            with open(self.path, "rb") as f:
                record = _read_record_bytes(f, offset)
        stored_id, stored_digest, probs = decode_record(record, 0)
        if stored_id != image_id or stored_digest != digest:
            raise CacheCorruptionError(f"Index entry for {image_id} points at another record")
        with self._mutex:
            self.hits += 1
        return probs

    def put(self, image_id: str, digest: bytes, probs: np.ndarray) -> None:
        values = np.asarray(probs, dtype=np.float64).reshape(-1)
        with self._mutex:
            self._pending[_index_key(image_id, digest)] = (image_id, digest, values)

    def flush(self) -> int:
        """
        Append buffered entries; returns how many were written.

        Entries stay buffered until the records and the new footer are on
        disk, so a failed write can be retried.

        Raises:
            CacheError: If the append fails; the previous footer is restored
        """
        with self._mutex:
            if not self._pending:
                return 0
            count = len(self._pending)
            with _file_lock(self._lock_path, exclusive=True):
                # Another process may have appended since we opened the file.
                index, end = self._read_footer(self.path.read_bytes())
                self._index, self._records_end = index, end
                merged = dict(index)
                records = []
                offset = end
                for key, (image_id, digest, values) in self._pending.items():
                    record = encode_record(image_id, digest, values)
                    merged[key] = offset
                    records.append(record)
                    offset += len(record)
                try:
                    self._append(end, b"".join(records) + _footer_bytes(merged))
                except OSError as e:
                    logger.error(f"Failed to flush {count} entries to {self.path}: {e}")
                    log_cache_operation("flush", str(self.path), success=False, error=str(e))
                    self._restore_footer(index, end)
                    raise CacheError(f"Could not append to teacher cache {self.path}: {e}") from e
                self._index, self._records_end = merged, offset
                self._pending = {}
        log_cache_operation("flush", str(self.path), hits=self.hits, misses=self.misses)
        return count

    def _append(self, offset: int, blob: bytes) -> None:
        with open(self.path, "r+b") as f:
            f.seek(offset)
            f.truncate()
            f.write(blob)

    def _restore_footer(self, index: dict[str, int], end: int) -> None:
        try:
            self._append(end, _footer_bytes(index))
        except OSError as e:
            logger.error(f"Could not restore the index footer of {self.path}: {e}")

    def stats(self) -> dict[str, int]:
        with self._mutex:
            entries = len(set(self._index) | set(self._pending))
            return {"entries": entries, "hits": self.hits, "misses": self.misses}
