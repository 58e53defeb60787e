import numpy as np
import pytest

from tokense import checkpoint as ck
from tokense.errors import CheckpointError


def _sample():
    rng = np.random.default_rng(0)
    config = {"kind": "mamba_bi", "layers": 2, "lr": 2e-4}
    tensors = {
        "backbone.0.w": rng.standard_normal((3, 4)).astype(np.float32),
        "backbone.0.b": rng.standard_normal(4).astype(np.float32),
        "head.scalar": np.float32(1.5).reshape(()),
    }
    return config, tensors


def test_round_trip_values(tmp_path):
    config, tensors = _sample()
    p = tmp_path / "m.ckpt"
    ck.save_checkpoint(p, config, tensors)
    cfg2, t2 = ck.load_checkpoint(p)
    assert cfg2 == config
    assert set(t2) == set(tensors)
    for k in tensors:
        assert t2[k].dtype == np.float32
        assert np.array_equal(t2[k], np.asarray(tensors[k], dtype=np.float32))


def test_save_load_save_is_byte_identical(tmp_path):
    config, tensors = _sample()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save_checkpoint(p1, config, tensors)
    cfg, t = ck.load_checkpoint(p1)
    ck.save_checkpoint(p2, cfg, t)
    assert p1.read_bytes() == p2.read_bytes()


def test_float64_inputs_are_stored_as_f32(tmp_path):
    p = tmp_path / "c.ckpt"
    x = np.array([1.00000001, 2.0], dtype=np.float64)
    ck.save_checkpoint(p, {}, {"w": x})
    _, t = ck.load_checkpoint(p)
    assert t["w"].dtype == np.float32
    assert np.array_equal(t["w"], x.astype(np.float32))


def test_tensor_order_does_not_matter(tmp_path):
    config, tensors = _sample()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save_checkpoint(p1, config, tensors)
    reordered = dict(reversed(list(tensors.items())))
    ck.save_checkpoint(p2, config, reordered)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        ck.load_checkpoint(p)


def test_crc_detects_flipped_bit(tmp_path):
    config, tensors = _sample()
    p = tmp_path / "d.ckpt"
    ck.save_checkpoint(p, config, tensors)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        ck.load_checkpoint(p)


def test_unknown_version(tmp_path):
    import struct
    import zlib

    body = struct.pack("<I", 99) + struct.pack("<I", 2) + b"{}" + struct.pack("<I", 0)
    raw = ck.MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    p = tmp_path / "v.ckpt"
    p.write_bytes(raw)
    with pytest.raises(CheckpointError, match="version 99"):
        ck.load_checkpoint(p)


def test_truncation_is_reported(tmp_path):
    config, tensors = _sample()
    p = tmp_path / "t.ckpt"
    ck.save_checkpoint(p, config, tensors)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(CheckpointError):
        ck.load_checkpoint(p)


def test_scalar_and_empty_shapes(tmp_path):
    p = tmp_path / "s.ckpt"
    tensors = {"s": np.float32(3.0).reshape(()), "e": np.zeros((0, 4), dtype=np.float32)}
    ck.save_checkpoint(p, {"note": "shapes"}, tensors)
    _, t = ck.load_checkpoint(p)
    assert t["s"].shape == ()
    assert t["s"] == np.float32(3.0)
    assert t["e"].shape == (0, 4)
