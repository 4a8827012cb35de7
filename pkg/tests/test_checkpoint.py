import struct

import numpy as np
import pytest

from querydrl.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def ckpt(rng):
    return Checkpoint("generator", {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=5),
        "steps": np.arange(4, dtype=np.int64),
        "scalar": np.array(2.5),
    }, meta={"step": 7, "note": "x"})


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path, ckpt):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ckpt)
        back = load_checkpoint(path, expect_kind="generator")
        assert back.meta == ckpt.meta
        assert list(back.arrays) == list(ckpt.arrays)
        for name, arr in ckpt.arrays.items():
            assert back.arrays[name].dtype == arr.dtype
            assert back.arrays[name].shape == arr.shape
            assert back.arrays[name].tobytes() == arr.tobytes()

    def test_layout_starts_with_magic_and_length(self, tmp_path, ckpt):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, ckpt)
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        (n,) = struct.unpack("<I", raw[8:12])
        assert raw[12:12 + n].startswith(b"{")

    def test_same_content_same_bytes(self, tmp_path, ckpt):
        save_checkpoint(tmp_path / "a", ckpt)
        save_checkpoint(tmp_path / "b", ckpt)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_kind_mismatch(self, tmp_path, ckpt):
        save_checkpoint(tmp_path / "m", ckpt)
        with pytest.raises(CheckpointError, match="estimator"):
            load_checkpoint(tmp_path / "m", expect_kind="estimator")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m").write_bytes(b"NOTACKPT" + b"\0" * 8)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "m")

    def test_truncated(self, tmp_path, ckpt):
        save_checkpoint(tmp_path / "m", ckpt)
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "t")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m", Checkpoint("estimator", {}, version=99))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "m")

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "m", Checkpoint("generator", {"x": np.zeros(2, dtype=np.complex64)}))
