"""Checkpoint container: byte layout, round trips, malformed input."""

import io
import struct

import numpy as np
import pytest

from enteroseg.checkpoint import (MAGIC, VERSION, CheckpointError,
                                  load_checkpoint, save_checkpoint)


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "stem.conv.weight": rng.normal(size=(8, 1, 7, 7)).astype(np.float32),
        "head.bias": rng.normal(size=(4,)).astype(np.float32),
        "scalarish": np.float32(3.25).reshape(()),
    }


def test_round_trip_is_bit_exact_and_order_preserving(tmp_path):
    arrays = _sample_arrays()
    path = tmp_path / "net.eseg"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    for name in arrays:
        assert back[name].dtype == np.float32
        np.testing.assert_array_equal(back[name], arrays[name])


def test_file_object_round_trip():
    buf = io.BytesIO()
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(buf, arrays)
    buf.seek(0)
    back = load_checkpoint(buf)
    np.testing.assert_array_equal(back["w"], arrays["w"])


def test_non_contiguous_input_is_stored_correctly():
    base = np.arange(24, dtype=np.float32).reshape(4, 6)
    view = base[:, ::2]  # stride-2 view
    buf = io.BytesIO()
    save_checkpoint(buf, {"v": view})
    buf.seek(0)
    np.testing.assert_array_equal(load_checkpoint(buf)["v"], view)


def test_header_bytes_frozen():
    buf = io.BytesIO()
    save_checkpoint(buf, {"a": np.zeros(2, dtype=np.float32)})
    raw = buf.getvalue()
    assert raw[:4] == MAGIC == b"ESEG"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == VERSION == 1
    assert count == 1
    (name_len,) = struct.unpack("<H", raw[12:14])
    assert raw[14:14 + name_len] == b"a"


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(io.BytesIO(b"XXXX" + b"\x00" * 16))


def test_unsupported_version_rejected():
    buf = io.BytesIO()
    save_checkpoint(buf, {})
    raw = bytearray(buf.getvalue())
    struct.pack_into("<I", raw, 4, 99)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(io.BytesIO(bytes(raw)))


def test_truncation_detected_at_every_boundary():
    buf = io.BytesIO()
    save_checkpoint(buf, _sample_arrays())
    raw = buf.getvalue()
    for cut in (2, 6, 13, len(raw) - 5):
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(io.BytesIO(raw[:cut]))


def test_trailing_bytes_rejected():
    buf = io.BytesIO()
    save_checkpoint(buf, {"w": np.ones(3, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(io.BytesIO(buf.getvalue() + b"\x00"))


def test_empty_checkpoint_round_trips():
    buf = io.BytesIO()
    save_checkpoint(buf, {})
    buf.seek(0)
    assert load_checkpoint(buf) == {}
