import hashlib
import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from calibq.tensor_store import (
    ALIGN,
    ENTRY_SIZE,
    BundleError,
    TensorBundle,
    TruncatedBundleError,
    from_bytes,
    layer_records,
    read_bundle,
    to_bytes,
    write_bundle,
)


def roundtrip(bundle):
    buf = io.BytesIO()
    n = write_bundle(bundle, buf)
    assert n == len(buf.getvalue())
    return read_bundle(io.BytesIO(buf.getvalue()))


def assert_same(a, b):
    assert a.names() == b.names()
    for name in a.names():
        assert a[name].dtype == b[name].dtype
        assert a[name].shape == b[name].shape
        assert a[name].tobytes() == b[name].tobytes()


def test_empty_bundle_is_header_only():
    data = to_bytes(TensorBundle())
    assert data[:4] == b"CLQB"
    back = from_bytes(data)
    assert len(back) == 0
    assert back.metadata == {}


def test_small_f32_roundtrip():
    b = TensorBundle({"W": np.array([[1, 2], [3, 4]], dtype=np.float32)})
    back = roundtrip(b)
    assert_same(b, back)
    np.testing.assert_array_equal(back["W"], [[1, 2], [3, 4]])


def test_two_writes_hash_identical(rng):
    b = TensorBundle(
        {"a/W": rng.normal(size=(5, 3)).astype(np.float32), "a/A": rng.normal(size=(5, 2)).astype(np.float16)},
        metadata={"z": 1, "a": [1, 2]},
    )
    h1 = hashlib.sha256(to_bytes(b)).hexdigest()
    h2 = hashlib.sha256(to_bytes(b)).hexdigest()
    assert h1 == h2


def test_insertion_order_does_not_change_bytes(rng):
    x = rng.normal(size=(3,)).astype(np.float32)
    y = rng.normal(size=(2, 2)).astype(np.float32)
    assert to_bytes(TensorBundle({"x": x, "y": y})) == to_bytes(TensorBundle({"y": y, "x": x}))


def test_f16_payload_bytes_unchanged(rng):
    a = rng.normal(size=(7, 3)).astype(np.float16)
    back = roundtrip(TensorBundle({"L/A": a}))
    assert back["L/A"].dtype == np.float16
    assert back["L/A"].tobytes() == a.tobytes()


def test_truncation_names_entry(rng):
    b = TensorBundle({"first": np.ones(4, np.float32), "second": rng.normal(size=(40,)).astype(np.float32)})
    data = to_bytes(b)
    with pytest.raises(TruncatedBundleError, match="second"):
        from_bytes(data[:-100])  # 160-byte payload + 32 bytes padding


def test_truncated_header():
    with pytest.raises(TruncatedBundleError):
        from_bytes(b"CLQ")


def test_bad_magic():
    data = bytearray(to_bytes(TensorBundle()))
    data[:4] = b"NOPE"
    with pytest.raises(BundleError, match="magic"):
        from_bytes(bytes(data))


def test_version_ahead_of_reader():
    data = bytearray(to_bytes(TensorBundle()))
    struct.pack_into("<I", data, 4, 99)
    with pytest.raises(BundleError, match="newer"):
        from_bytes(bytes(data))


def test_unknown_dtype_code():
    data = bytearray(to_bytes(TensorBundle({"x": np.ones(2, np.float32)})))
    table = 16 + 2  # header + "{}" manifest
    data[table + 256] = 77
    with pytest.raises(BundleError, match="dtype code"):
        from_bytes(bytes(data))


def test_name_collision_and_bad_names():
    b = TensorBundle({"x": np.ones(2, np.float32)})
    with pytest.raises(BundleError, match="duplicate"):
        b.add("x", np.ones(2, np.float32))
    for bad in ["", "has space", "ünï", "a*b"]:
        with pytest.raises(BundleError):
            b.add(bad, np.ones(2, np.float32))


def test_shape_rules():
    b = TensorBundle()
    with pytest.raises(BundleError):
        b.add("five", np.ones((1, 1, 1, 1, 2), np.float32))
    with pytest.raises(BundleError):
        b.add("scalar", np.float32(1.0))
    with pytest.raises(BundleError):
        b.add("empty", np.ones((0, 3), np.float32))
    with pytest.raises(BundleError):
        b.add("f64", np.ones(3))


def test_offsets_aligned_increasing(rng):
    b = TensorBundle({f"t{i}": rng.normal(size=(i + 1, 3)).astype(np.float32) for i in range(5)})
    data = to_bytes(b)
    meta_len = struct.unpack_from("<I", data, 12)[0]
    pos = 16 + meta_len
    prev_end = pos + 5 * ENTRY_SIZE
    for _ in range(5):
        offset, length = struct.unpack_from("<QQ", data, pos + ENTRY_SIZE - 16)
        assert offset % ALIGN == 0
        assert offset >= prev_end
        prev_end = offset + length
        pos += ENTRY_SIZE


def test_atomic_path_write(tmp_path, rng):
    path = tmp_path / "out.clqb"
    b = TensorBundle({"w": rng.normal(size=(3, 3)).astype(np.float32)})
    write_bundle(b, path)
    assert_same(b, read_bundle(path))
    assert [p.name for p in tmp_path.iterdir()] == ["out.clqb"]


def test_layer_records():
    b = TensorBundle({
        "blk.0/W": np.ones((4, 3), np.float32),
        "blk.0/acts": np.ones((10, 4), np.float32),
        "blk.1/W": np.ones((4, 2), np.float32),
        "blk.1/gram": np.eye(4, dtype=np.float32),
        "blk.2/W": np.ones((5, 5), np.float32),
    })
    recs = {r.layer_id: r for r in layer_records(b)}
    assert recs["blk.0"].activation_name == "blk.0/acts" and recs["blk.0"].gram_name is None
    assert recs["blk.1"].gram_name == "blk.1/gram" and (recs["blk.1"].m, recs["blk.1"].n) == (4, 2)
    assert recs["blk.2"].gram_name is None and recs["blk.2"].activation_name is None


names = st.from_regex(r"[A-Za-z0-9._/-]{1,20}", fullmatch=True)
arrays = st.sampled_from([np.float32, np.float16, np.uint8]).flatmap(
    lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5))
)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_roundtrip_property(entries):
    b = TensorBundle(entries, metadata={"k": "v"})
    back = roundtrip(b)
    assert_same(b, back)
    assert back.metadata == {"k": "v"}
    assert to_bytes(back) == to_bytes(b)
