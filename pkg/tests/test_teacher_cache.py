import hashlib

import numpy as np
import pytest

from src.database.teacher_cache import (
    MAGIC,
    TeacherPredictionCache,
    decode_record,
    encode_record,
)
from src.utils.errors import CacheCorruptionError, CacheError

DIGEST = hashlib.sha256(b"cat\ndog\ncar").digest()
OTHER = hashlib.sha256(b"cat\ndog").digest()


@pytest.fixture
def cache_path(tmp_path):
    return tmp_path / "cache" / "teacher.kdpc"


class TestRecords:
    def test_record_checksum(self):
        probs = np.array([0.25, 0.5, 0.25])
        record = encode_record("synthetic://synthetic/train/00001", DIGEST, probs)
        image_id, digest, values = decode_record(record, 0)
        assert image_id == "synthetic://synthetic/train/00001"
        assert digest == DIGEST
        np.testing.assert_array_equal(values, probs)

        corrupted = bytearray(record)
        corrupted[-6] ^= 0x01
        with pytest.raises(CacheCorruptionError):
            decode_record(bytes(corrupted), 0)

    def test_truncated_record(self):
        record = encode_record("a", DIGEST, np.ones(4) / 4)
        with pytest.raises(CacheCorruptionError):
            decode_record(record[:20], 0)

    def test_digest_size(self):
        with pytest.raises(CacheError):
            encode_record("a", b"short", np.ones(2))


class TestTeacherPredictionCache:
    def test_new_file_is_an_empty_cache(self, cache_path):
        cache = TeacherPredictionCache(cache_path)
        assert cache_path.read_bytes().startswith(MAGIC)
        assert len(cache) == 0
        assert cache.get("a", DIGEST) is None
        assert cache.stats() == {"entries": 0, "hits": 0, "misses": 1}

    def test_entries_survive_reopening(self, cache_path):
        probs = np.array([0.1, 0.2, 0.7])
        cache = TeacherPredictionCache(cache_path)
        cache.put("img-1", DIGEST, probs)
        np.testing.assert_array_equal(cache.get("img-1", DIGEST), probs)
        assert cache.flush() == 1
        assert cache.flush() == 0

        reopened = TeacherPredictionCache(cache_path)
        assert ("img-1", DIGEST) in reopened
        np.testing.assert_array_equal(reopened.get("img-1", DIGEST), probs)
        assert reopened.get("img-1", OTHER) is None

    def test_float32_predictions_round_trip_exactly(self, cache_path):
        probs32 = np.array([0.3, 0.3, 0.4], dtype=np.float32)
        cache = TeacherPredictionCache(cache_path)
        cache.put("img", DIGEST, probs32.astype(np.float64))
        cache.flush()
        stored = TeacherPredictionCache(cache_path).get("img", DIGEST)
        np.testing.assert_array_equal(stored.astype(np.float32), probs32)

    def test_appends_from_two_handles(self, cache_path):
        first = TeacherPredictionCache(cache_path)
        second = TeacherPredictionCache(cache_path)
        first.put("a", DIGEST, np.array([0.5, 0.5]))
        first.flush()
        second.put("b", DIGEST, np.array([0.9, 0.1]))
        second.flush()

        merged = TeacherPredictionCache(cache_path)
        assert len(merged) == 2
        np.testing.assert_array_equal(merged.get("a", DIGEST), [0.5, 0.5])
        np.testing.assert_array_equal(merged.get("b", DIGEST), [0.9, 0.1])

    def test_missing_footer_is_corruption(self, cache_path):
        cache = TeacherPredictionCache(cache_path)
        cache.put("a", DIGEST, np.array([0.5, 0.5]))
        cache.flush()
        cache_path.write_bytes(cache_path.read_bytes()[:-4])
        with pytest.raises(CacheCorruptionError):
            TeacherPredictionCache(cache_path)

    def test_open_or_reset_moves_a_corrupt_file_aside(self, cache_path):
        cache_path.parent.mkdir(parents=True)
        cache_path.write_bytes(b"not a cache")
        cache = TeacherPredictionCache.open_or_reset(cache_path)
        assert len(cache) == 0
        assert cache_path.with_suffix(".kdpc.corrupt").read_bytes() == b"not a cache"

    def test_failed_flush_keeps_entries_pending(self, cache_path, monkeypatch):
        cache = TeacherPredictionCache(cache_path)
        cache.put("a", DIGEST, np.array([0.5, 0.5]))
        cache.flush()
        cache.put("b", DIGEST, np.array([0.9, 0.1]))

        def disk_full(self, offset, blob):
            raise OSError("No space left on device")

        with monkeypatch.context() as patch:
            patch.setattr(TeacherPredictionCache, "_append", disk_full)
            with pytest.raises(CacheError):
                cache.flush()
        assert ("b", DIGEST) in cache
        assert len(TeacherPredictionCache(cache_path)) == 1

        assert cache.flush() == 1
        reopened = TeacherPredictionCache(cache_path)
        np.testing.assert_array_equal(reopened.get("a", DIGEST), [0.5, 0.5])
        np.testing.assert_array_equal(reopened.get("b", DIGEST), [0.9, 0.1])
