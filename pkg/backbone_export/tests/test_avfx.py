import numpy as np
import pytest

from backbone_export.avfx import AvfxError, read_avfx, write_avfx


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(6, 2048)).astype(np.float32)
    path = tmp_path / "a.avfx"
    write_avfx(data, path)
    assert np.array_equal(read_avfx(path), data)
    # second write of the same content is byte-identical
    other = tmp_path / "b.avfx"
    write_avfx(read_avfx(path), other)
    assert path.read_bytes() == other.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "one.avfx"
    write_avfx(np.array([[0.5]], dtype=np.float32), path)
    raw = path.read_bytes()
    assert raw[:4] == b"AVFX"
    assert len(raw) == 20 + 4


def test_rejects_non_finite(tmp_path):
    with pytest.raises(AvfxError):
        write_avfx(np.array([[np.nan]]), tmp_path / "bad.avfx")
    assert not (tmp_path / "bad.avfx").exists()


def test_rejects_wrong_rank(tmp_path):
    with pytest.raises(AvfxError):
        write_avfx(np.zeros(8), tmp_path / "bad.avfx")


def test_truncated_payload_detected(tmp_path):
    path = tmp_path / "t.avfx"
    write_avfx(np.zeros((2, 3), dtype=np.float32), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(AvfxError, match="truncated"):
        read_avfx(path)


def test_bad_magic_detected(tmp_path):
    path = tmp_path / "m.avfx"
    write_avfx(np.zeros((1, 1), dtype=np.float32), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"WAVE"
    path.write_bytes(bytes(raw))
    with pytest.raises(AvfxError, match="magic"):
        read_avfx(path)
