import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashseq import dataio
from crashseq.dataio import (
    AVFX_MAGIC,
    ClipManifestEntry,
    DataError,
    FeatureSequence,
    load_manifest,
    read_feature_file,
    read_frame_sequence,
    save_manifest,
    split_dataset,
    write_feature_file,
    write_ppm,
    write_png,
)


def _entry(i, label=0, split="train"):
    return ClipManifestEntry(clip_id=f"clip_{i:03d}", frames_path=f"/data/{i}",
                             label=label, split=split, num_frames=8)


# ---------------------------------------------------------------- manifest

def test_manifest_round_trip(tmp_path):
    entries = [_entry(i, label=i % 2) for i in range(7)]
    path = tmp_path / "manifest.jsonl"
    save_manifest(entries, path)
    assert load_manifest(path) == entries


def test_manifest_rejects_duplicate_ids(tmp_path):
    path = tmp_path / "m.jsonl"
    save_manifest([_entry(1), _entry(1)], path)
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(path)


def test_manifest_rejects_bad_json(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"clip_id": "a", oops\n')
    with pytest.raises(DataError, match="invalid JSON"):
        load_manifest(path)


def test_manifest_rejects_unknown_and_missing_fields(tmp_path):
    path = tmp_path / "m.jsonl"
    good = {"clip_id": "a", "frames_path": "p", "label": 0, "split": "train",
            "num_frames": 4}
    path.write_text(json.dumps({**good, "extra": 1}) + "\n")
    with pytest.raises(DataError, match="unknown fields"):
        load_manifest(path)
    bad = dict(good)
    del bad["label"]
    path.write_text(json.dumps(bad) + "\n")
    with pytest.raises(DataError, match="missing fields"):
        load_manifest(path)


def test_entry_validation():
    with pytest.raises(DataError):
        ClipManifestEntry(clip_id="x", frames_path="p", label=2)
    with pytest.raises(DataError):
        ClipManifestEntry(clip_id="x", frames_path="p", label=0, split="dev")
    with pytest.raises(DataError):
        ClipManifestEntry(clip_id="x", frames_path="p", label=0, num_frames=1)


# ---------------------------------------------------------------- frames

def test_frame_sequence_lexicographic_order(tmp_path):
    # write frames out of order; reader must sort by name
    for t in (2, 0, 1):
        img = np.full((4, 6, 3), t * 10, dtype=np.uint8)
        write_ppm(img, tmp_path / f"f{t:05d}.ppm")
    frames = read_frame_sequence(tmp_path)
    assert len(frames) == 3
    assert [int(f[0, 0, 0]) for f in frames] == [0, 10, 20]


def test_frame_sequence_mixed_formats_and_sizes(tmp_path):
    write_ppm(np.zeros((4, 4, 3), dtype=np.uint8), tmp_path / "a.ppm")
    write_png(np.ones((4, 4, 3), dtype=np.uint8), tmp_path / "b.png")
    frames = read_frame_sequence(tmp_path)
    assert len(frames) == 2 and frames[1][0, 0, 0] == 1

    write_ppm(np.zeros((5, 4, 3), dtype=np.uint8), tmp_path / "c.ppm")
    with pytest.raises(DataError, match="mixed frame resolutions"):
        read_frame_sequence(tmp_path)


def test_frame_sequence_empty_dir(tmp_path):
    with pytest.raises(DataError, match="no frame images"):
        read_frame_sequence(tmp_path)


def test_ppm_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    write_ppm(img, tmp_path / "x.ppm")
    (frame,) = read_frame_sequence(tmp_path)
    np.testing.assert_array_equal(frame, img)


# ---------------------------------------------------------------- AVFX

def test_avfx_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    seq = FeatureSequence(clip_id="c", data=rng.normal(size=(5, 17)).astype(np.float32))
    path = tmp_path / "c.rgb.avfx"
    write_feature_file(seq, path)
    back = read_feature_file(path)
    assert back.clip_id == "c"
    assert back.data.tobytes() == seq.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(t=st.integers(1, 12), d=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_avfx_round_trip_property(tmp_path_factory, t, d, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(scale=100.0, size=(t, d)).astype(np.float32)
    path = tmp_path_factory.mktemp("avfx") / "p.flow.avfx"
    write_feature_file(FeatureSequence(clip_id="p", data=data), path)
    back = read_feature_file(path)
    assert back.data.shape == (t, d)
    assert back.data.tobytes() == data.tobytes()


def test_avfx_minimal_fixture_parses(tmp_path):
    # hand-built single-value file: header + one float32 0.5
    payload = struct.pack("<4sIIII", AVFX_MAGIC, 1, 0, 1, 1) + struct.pack("<f", 0.5)
    assert len(payload) == 24
    path = tmp_path / "tiny.rgb.avfx"
    path.write_bytes(payload)
    seq = read_feature_file(path)
    assert seq.data.shape == (1, 1)
    assert seq.data[0, 0] == np.float32(0.5)

    # a trailing pad byte must not change the result
    (tmp_path / "tiny2.rgb.avfx").write_bytes(payload + b"\x00")
    seq2 = read_feature_file(tmp_path / "tiny2.rgb.avfx")
    assert seq2.data.tobytes() == seq.data.tobytes()


def test_avfx_error_cases(tmp_path):
    path = tmp_path / "bad.avfx"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(DataError, match="bad magic"):
        read_feature_file(path)

    path.write_bytes(struct.pack("<4sIIII", AVFX_MAGIC, 9, 0, 1, 1) + b"\x00" * 4)
    with pytest.raises(DataError, match="version"):
        read_feature_file(path)

    path.write_bytes(struct.pack("<4sIIII", AVFX_MAGIC, 1, 0, 2, 3) + b"\x00" * 8)
    with pytest.raises(DataError, match="truncated payload"):
        read_feature_file(path)

    path.write_bytes(b"AVFX\x01")
    with pytest.raises(DataError, match="truncated header"):
        read_feature_file(path)


def test_avfx_rejects_non_finite(tmp_path):
    data = np.array([[np.nan]], dtype=np.float32)
    seq = FeatureSequence.__new__(FeatureSequence)  # bypass validation
    seq.clip_id, seq.data = "n", data
    with pytest.raises(DataError, match="non-finite"):
        write_feature_file(seq, tmp_path / "n.avfx")


def test_feature_sequence_validation():
    with pytest.raises(DataError):
        FeatureSequence(clip_id="x", data=np.zeros((0, 4), dtype=np.float32))
    with pytest.raises(DataError):
        FeatureSequence(clip_id="x", data=np.zeros(4, dtype=np.float32))
    with pytest.raises(DataError):
        FeatureSequence(clip_id="x", data=np.array([[np.inf]], dtype=np.float32))


# ---------------------------------------------------------------- split

def test_split_is_stratified_and_complete():
    entries = [_entry(i, label=i % 2, split="unassigned") for i in range(20)]
    train, test = split_dataset(entries, 0.7, seed=5)
    assert len(train) == 14 and len(test) == 6
    assert sum(e.label for e in train) == 7
    assert sum(e.label for e in test) == 3
    ids = {e.clip_id for e in train} | {e.clip_id for e in test}
    assert len(ids) == 20


def test_split_deterministic_per_seed():
    entries = [_entry(i, label=i % 2, split="unassigned") for i in range(30)]
    a = split_dataset(entries, 0.7, seed=9)
    b = split_dataset(entries, 0.7, seed=9)
    c = split_dataset(entries, 0.7, seed=10)
    assert [e.clip_id for e in a[0]] == [e.clip_id for e in b[0]]
    assert [e.clip_id for e in a[0]] != [e.clip_id for e in c[0]]


def test_split_rejects_bad_fraction():
    entries = [_entry(0), _entry(1)]
    with pytest.raises(DataError):
        split_dataset(entries, 1.0, seed=0)
    with pytest.raises(DataError):
        split_dataset([], 0.5, seed=0)
