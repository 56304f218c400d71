import hashlib
import io
import tarfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgexc import data
from edgexc.data import Cifar10Set
from edgexc.errors import DataError


def _record(label, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    body = rng.integers(0, 256, size=3072, dtype=np.uint8) if fill is None else np.array(fill, dtype=np.uint8)
    return bytes([label]) + body.tobytes()


class TestBinaryFormat:
    def test_single_record_fixture(self, tmp_path):
        body = np.zeros(3072, np.uint8)
        body[:1024] = 255  # red plane
        f = tmp_path / "one.bin"
        f.write_bytes(bytes([3]) + body.tobytes())
        images, labels = data.read_batch_file(f)
        assert images.shape == (1, 3, 32, 32) and labels.tolist() == [3]
        assert (images[0, 0] == 1.0).all() and (images[0, 1:] == 0).all()

    def test_row_major_plane_layout(self):
        body = np.arange(3072, dtype=np.int64) % 256
        images, _ = data.decode_records(bytes([0]) + body.astype(np.uint8).tobytes())
        assert images[0, 1, 0, 0] == pytest.approx(body[1024] / 255)
        assert images[0, 0, 1, 2] == pytest.approx(body[32 + 2] / 255)

    def test_truncated(self, tmp_path):
        f = tmp_path / "t.bin"
        f.write_bytes(b"\0" * 3072)
        with pytest.raises(DataError, match="3073"):
            data.read_batch_file(f)

    def test_bad_label(self):
        with pytest.raises(DataError, match="label"):
            data.decode_records(_record(1) + _record(10))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            data.load_cifar10_binary(tmp_path)
        with pytest.raises(DataError):
            data.load_cifar10_binary(tmp_path / "nope")

    def test_round_trip_bytes(self):
        raw = b"".join(_record(i % 10, seed=i) for i in range(7))
        images, labels = data.decode_records(raw)
        assert data.encode_records(images, labels) == raw

    def test_directory_round_trip(self, tmp_path):
        train = data.make_synthetic(10, 5, 32, seed=1)
        test = data.make_synthetic(10, 2, 32, seed=2, split="test")
        data.write_cifar10_binary(tmp_path, train, test)
        with pytest.raises(DataError, match="10000"):
            data.load_cifar10_binary(tmp_path)
        tr, te = data.load_cifar10_binary(tmp_path, strict=False)
        np.testing.assert_array_equal(tr.images, train.images)
        np.testing.assert_array_equal(te.labels, test.labels)
        for name in data.TRAIN_FILES + (data.TEST_FILE,):
            images, labels = data.read_batch_file(tmp_path / name)
            assert data.encode_records(images, labels) == (tmp_path / name).read_bytes()


class TestRowAverage:
    def test_hand_column(self):
        x = np.array([3.0, 6.0, 9.0]).reshape(1, 1, 3, 1)
        np.testing.assert_allclose(data.row_average(x)[0, 0, :, 0], [4, 6, 8])

    def test_constant_fixed_point(self):
        x = np.full((2, 3, 32, 32), 0.4, dtype=np.float32)
        np.testing.assert_allclose(data.row_average(x), x, rtol=1e-6)

    def test_rows_only(self, rng):
        # columns never mix
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, :, 2] = rng.random(5)
        out = data.row_average(x)
        assert not out[0, 0, :, [0, 1, 3, 4]].any()

    def test_shape_and_dtype(self, rng):
        x = rng.random((3, 3, 32, 32), dtype=np.float32)
        out = data.row_average(x)
        assert out.shape == x.shape and out.dtype == np.float32

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, seed, a, b):
        r = np.random.default_rng(seed)
        x, y = r.random((2, 3, 6, 5)), r.random((2, 3, 6, 5))
        np.testing.assert_allclose(
            data.row_average(a * x + b * y), a * data.row_average(x) + b * data.row_average(y), atol=1e-6
        )

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8))
    def test_bounded(self, seed, h):
        x = np.random.default_rng(seed).random((1, 3, h, 4))
        out = data.row_average(x)
        assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


class TestBatching:
    def _set(self, n):
        return Cifar10Set(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 10)

    def test_sizes(self):
        assert [len(b[1]) for b in data.batch_iterator(self._set(10), 3, seed=0)] == [3, 3, 3, 1]

    def test_deterministic(self):
        a = [b[1].tolist() for b in data.batch_iterator(self._set(20), 4, seed=9)]
        b = [b[1].tolist() for b in data.batch_iterator(self._set(20), 4, seed=9)]
        assert a == b
        c = [b[1].tolist() for b in data.batch_iterator(self._set(20), 4, seed=10)]
        assert a != c

    def test_covers_set_once(self):
        seen = np.concatenate([b[0].ravel() for b in data.batch_iterator(self._set(23), 5, seed=1)])
        assert sorted(seen.tolist()) == list(range(23))

    def test_unshuffled_order(self):
        seen = np.concatenate([b[0].ravel() for b in data.batch_iterator(self._set(7), 3, shuffle=False)])
        assert seen.tolist() == list(range(7))


class TestSynthetic:
    def test_shape(self):
        s = data.make_synthetic(3, 100, 16, seed=0)
        assert s.images.shape == (300, 3, 16, 16) and len(s) == 300
        assert s.class_histogram(3).tolist() == [100, 100, 100]
        assert 0 <= s.images.min() and s.images.max() <= 1

    def test_deterministic(self):
        a, b = data.make_synthetic(3, 10, 8, seed=4), data.make_synthetic(3, 10, 8, seed=4)
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_linearly_separable(self):
        """Least-squares one-vs-all linear classifier on raw pixels, an oracle independent of the model code."""
        s = data.make_synthetic(3, 100, 16, seed=0)
        X = np.hstack([s.images.reshape(len(s), -1), np.ones((len(s), 1))])
        Y = np.eye(3)[s.labels]
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        assert (np.argmax(X @ W, axis=1) == s.labels).mean() > 0.9


class TestDownload:
    def _archive(self, tmp_path):
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w:gz") as tar:
            for name in data.TRAIN_FILES + (data.TEST_FILE,):
                payload = _record(1)
                info = tarfile.TarInfo(f"cifar-10-batches-bin/{name}")
                info.size = len(payload)
                tar.addfile(info, io.BytesIO(payload))
        path = tmp_path / "cifar-10-binary.tar.gz"
        path.write_bytes(buf.getvalue())
        return path, hashlib.sha256(buf.getvalue()).hexdigest()

    def test_verified_download(self, tmp_path):
        src, digest = self._archive(tmp_path)
        out = data.download_cifar10(tmp_path / "dl", src.as_uri(), digest)
        tr, te = data.load_cifar10_binary(out, strict=False)
        assert len(tr) == 5 and len(te) == 1

    def test_checksum_mismatch(self, tmp_path):
        src, _ = self._archive(tmp_path)
        with pytest.raises(DataError, match="checksum"):
            data.download_cifar10(tmp_path / "dl", src.as_uri(), "0" * 64)
