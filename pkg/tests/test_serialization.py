import io
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from tmnet.serialization import (FormatError, read_checkpoint, read_tensor, tensor_from_bytes, tensor_to_bytes,
                                 write_checkpoint)


@given(st.sampled_from([np.float32, np.float64]).flatmap(
    lambda dt: arrays(dt, array_shapes(min_dims=1, max_dims=4, max_side=5), elements=st.floats(-1e6, 1e6, width=32))))
def test_tensor_roundtrip(arr):
    back = tensor_from_bytes(tensor_to_bytes(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_header_layout():
    blob = tensor_to_bytes(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"TNSR" and blob[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2I", blob[7:15]) == (2, 3)
    assert len(blob) == 15 + 24


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + bytes([9]) + b[5:],
    lambda b: b[:5] + bytes([7]) + b[6:],
    lambda b: b[:-1],
])
def test_corrupt_tensor(mutate):
    blob = tensor_to_bytes(np.arange(4.0))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(mutate(blob)))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        tensor_to_bytes(np.arange(3))


def test_checkpoint_roundtrip_and_determinism():
    entries = {"a.weight": np.ones((2, 2), np.float32), "b": np.arange(3.0)}
    bufs = []
    for _ in range(2):
        buf = io.BytesIO()
        write_checkpoint(buf, entries, {"z": 1, "a": [1, 2]})
        bufs.append(buf.getvalue())
    assert bufs[0] == bufs[1]
    got, trailer = read_checkpoint(io.BytesIO(bufs[0]))
    assert list(got) == list(entries) and trailer == {"z": 1, "a": [1, 2]}
    np.testing.assert_array_equal(got["b"], entries["b"])


def test_checkpoint_duplicate_and_truncation():
    buf = io.BytesIO()
    write_checkpoint(buf, {"a": np.zeros(1)}, {})
    blob = buf.getvalue()
    with pytest.raises(FormatError):
        read_checkpoint(io.BytesIO(blob[:-3]))
    # claim two entries but repeat the first one
    body = blob[9:-4 - 2]
    dup = b"TMCK" + bytes([1]) + struct.pack("<I", 2) + body + body + blob[-4 - 2:]
    with pytest.raises(FormatError, match="duplicate"):
        read_checkpoint(io.BytesIO(dup))
