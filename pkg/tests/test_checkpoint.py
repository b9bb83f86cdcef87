import struct

import numpy as np
import pytest

from depthvla import checkpoint
from depthvla.checkpoint import CheckpointError


def tensors():
    rng = np.random.default_rng(0)
    return {
        "a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5).astype(np.float32),
        "scalar": np.array(2.5, dtype=np.float32),
        "opt/m/a.w": rng.standard_normal((3, 4)).astype(np.float32),
        "名前": np.zeros((1, 1, 2), np.float32),
    }


def test_roundtrip_bitwise(tmp_path):
    t = tensors()
    checkpoint.save(tmp_path / "x.ckpt", t)
    back = checkpoint.load(tmp_path / "x.ckpt")
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and back[k].tobytes() == t[k].tobytes()


def test_layout(tmp_path):
    p = checkpoint.save(tmp_path / "x.ckpt", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = p.read_bytes()
    assert raw[:4] == b"EVDP"
    version, count, name_len = struct.unpack_from("<III", raw, 4)
    assert (version, count, name_len) == (1, 1, 1)
    assert raw[16:17] == b"w"
    assert struct.unpack_from("<III", raw, 17) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4", 6, 29), np.arange(6))
    assert len(raw) == 29 + 24 + 8


def test_rejects_non_float32(tmp_path):
    with pytest.raises(CheckpointError, match="float32"):
        checkpoint.save(tmp_path / "x.ckpt", {"w": np.zeros(2, np.float64)})


def test_corruption_detected(tmp_path):
    p = checkpoint.save(tmp_path / "x.ckpt", tensors())
    raw = bytearray(p.read_bytes())
    raw[40] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        checkpoint.load(p)


def test_truncation_detected(tmp_path):
    p = checkpoint.save(tmp_path / "x.ckpt", tensors())
    p.write_bytes(p.read_bytes()[:-20])
    with pytest.raises(CheckpointError):
        checkpoint.load(p)


def test_bad_magic_and_missing_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"ABCD" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(p)
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")


def test_save_leaves_no_temp_file(tmp_path):
    checkpoint.save(tmp_path / "x.ckpt", tensors())
    assert [q.name for q in tmp_path.iterdir()] == ["x.ckpt"]
