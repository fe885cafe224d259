from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedinject.checkpoint import (CheckpointFormatError, decode, encode, load_checkpoint,
                                  save_checkpoint)
from fedinject.params import ParamTree, StructureError

segment = st.text("abcdefghij0123456789_", min_size=1, max_size=6)
path_st = st.lists(segment, min_size=1, max_size=3).map("/".join)
value_st = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                      elements=st.floats(-1e6, 1e6, width=32)).map(lambda a: a.astype(np.float64))


@st.composite
def trees(draw):
    tree = ParamTree()
    for p in draw(st.lists(path_st, max_size=6, unique=True)):
        if any(q.startswith(p + "/") or p.startswith(q + "/") for q in tree.paths()):
            continue
        tree.add(p, draw(value_st), frozen=draw(st.booleans()))
    return tree


def test_paths_are_sorted_and_duplicates_rejected():
    t = ParamTree()
    t.add("b/x", [1.0])
    t.add("a/y", [2.0])
    assert t.paths() == ["a/y", "b/x"]
    with pytest.raises(StructureError):
        t.add("a/y", [3.0])
    for bad in ("", "/a", "a//b", "a/"):
        with pytest.raises(StructureError):
            t.add(bad, [0.0])


def test_subtree_shares_storage_and_set_checks_shape():
    t = ParamTree()
    t.add("enc/w", np.zeros(3))
    sub = t.subtree("enc")
    sub.set("w", np.ones(3))
    np.testing.assert_array_equal(t["enc/w"], np.ones(3))
    with pytest.raises(StructureError):
        t.set("enc/w", np.ones(4))


def test_digest_sees_values_flags_and_paths():
    t = ParamTree()
    t.add("a", [1.0, 2.0])
    base = t.digest()
    u = t.copy()
    u.set("a", [1.0, 2.0 + 1e-12])
    assert u.digest() != base
    u = t.copy()
    u.freeze()
    assert u.digest() != base
    assert t.copy().digest() == base


def test_structure_mismatch_names_the_path():
    a, b = ParamTree(), ParamTree()
    a.add("x/w", np.zeros((2, 2)))
    b.add("x/w", np.zeros((2, 3)))
    with pytest.raises(StructureError, match="x/w"):
        a.check_same_structure(b)


def test_empty_checkpoint_layout():
    buf = encode(ParamTree())
    assert buf == b"FKIM" + bytes([1]) + struct.pack("<I", 0)
    assert len(buf) == 9
    assert len(decode(buf)) == 0


def test_single_tensor_layout_is_byte_exact():
    t = ParamTree()
    t.add("ab", np.array([[1.0, 2.0, 3.0]]), frozen=True)
    expected = (b"FKIM" + bytes([1]) + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab"
                + bytes([1, 2]) + struct.pack("<2I", 1, 3) + struct.pack("<3f", 1, 2, 3))
    assert encode(t) == expected


@settings(max_examples=60, deadline=None)
@given(trees())
def test_checkpoint_round_trip(tree):
    back = decode(encode(tree))
    assert back == tree
    assert encode(back) == encode(tree)


def test_round_trip_through_a_file(tmp_path):
    t = ParamTree()
    t.add("m/w", np.arange(6.0).reshape(2, 3))
    save_checkpoint(t, tmp_path / "x.fkim")
    assert load_checkpoint(tmp_path / "x.fkim") == t


def test_values_are_stored_as_float32():
    t = ParamTree()
    t.add("w", [0.1])
    assert load_checkpoint_bytes(encode(t))["w"][0] == float(np.float32(0.1))


def load_checkpoint_bytes(buf):
    return decode(buf)


@pytest.mark.parametrize("mutate,offset,msg", [
    (lambda b: b"XKIM" + b[4:], 0, "magic"),
    (lambda b: b[:4] + bytes([9]) + b[5:], 4, "version"),
    (lambda b: b[:20], None, "truncated"),
    (lambda b: b + b"\x00", None, "trailing"),
])
def test_malformed_checkpoints_report_an_offset(mutate, offset, msg):
    t = ParamTree()
    t.add("layer/w", np.ones((2, 2)))
    with pytest.raises(CheckpointFormatError, match=msg) as info:
        decode(mutate(encode(t)))
    assert "byte offset" in str(info.value)
    if offset is not None:
        assert info.value.offset == offset
