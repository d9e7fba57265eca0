import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srnnkit.tensor import (
    ElementCountError,
    HeaderError,
    ImageTensor,
    NonFiniteError,
    SeqTensor,
    ShapeError,
    TensorFormatError,
    flip_w,
    load_tensor,
    save_tensor,
    transpose_hw,
)

images = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.sampled_from([np.float32, np.float64])).flatmap(
    lambda s: arrays(s[3], s[:3], elements=st.floats(-1e6, 1e6, width=32))
)


def img(rows):
    return ImageTensor(np.array(rows, dtype=np.float64)[:, :, None])


def test_transpose_point():
    x = ImageTensor(np.arange(3.0).reshape(1, 1, 3))
    assert transpose_hw(x) == x


def test_transpose_2x3():
    out = transpose_hw(img([[1, 2, 3], [4, 5, 6]]))
    assert out.shape == (3, 2, 1)
    assert out == img([[1, 4], [2, 5], [3, 6]])


def test_flip_single_column():
    x = img([[1], [2]])
    assert flip_w(x) == x


def test_flip_row():
    assert flip_w(img([[1, 2, 3]])) == img([[3, 2, 1]])


@settings(max_examples=60, deadline=None)
@given(images)
def test_involutions_bitwise(a):
    x = ImageTensor(a)
    assert transpose_hw(transpose_hw(x)) == x
    assert flip_w(flip_w(x)) == x
    assert transpose_hw(x).data.dtype == a.dtype


def test_tensor_is_immutable():
    x = img([[1, 2]])
    with pytest.raises(ValueError):
        x.data[0, 0, 0] = 5


def test_precision_tag():
    x = ImageTensor(np.zeros((2, 2, 1), np.float32))
    assert x.precision == "single"
    assert x.astype("double").precision == "double"
    assert x != x.astype("double")


@pytest.mark.parametrize("shape", [(2, 2), (0, 2, 1), (1, 1, 1, 1)])
def test_bad_shapes(shape):
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros(shape))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        ImageTensor(np.full((1, 1, 1), np.nan))


def test_seq_tensor():
    s = SeqTensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert (s.length, s.channels, s.precision) == (3, 2, "double")


def test_binary_roundtrip_16x9(tmp_path, rng):
    x = ImageTensor(rng.standard_normal((16, 9, 1)).astype(np.float32))
    save_tensor(x, tmp_path / "a.imgt")
    assert load_tensor(tmp_path / "a.imgt") == x


@settings(max_examples=30, deadline=None)
@given(images)
def test_text_roundtrip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("t") / "x.txt"
    x = ImageTensor(a.astype(np.float64))
    save_tensor(x, path, encoding="text")
    assert load_tensor(path) == x


def test_text_single_element(tmp_path):
    (tmp_path / "x").write_text("IMGT-TEXT 1 1 1\n0.5\n")
    x = load_tensor(tmp_path / "x")
    assert x.shape == (1, 1, 1) and x.data[0, 0, 0] == 0.5


def test_binary_element_count(tmp_path):
    raw = b"IMGTBIN1" + struct.pack("<III", 2, 2, 1) + struct.pack("<3f", 1, 2, 3)
    (tmp_path / "x").write_bytes(raw)
    with pytest.raises(ElementCountError, match="byte 20"):
        load_tensor(tmp_path / "x")


def test_text_element_count(tmp_path):
    (tmp_path / "x").write_text("IMGT-TEXT 2 2 1\n1 2\n3\n")
    with pytest.raises(ElementCountError, match="line"):
        load_tensor(tmp_path / "x")


def test_non_finite_payload(tmp_path):
    raw = b"IMGTBIN1" + struct.pack("<III", 1, 2, 1) + struct.pack("<2f", 1, float("inf"))
    (tmp_path / "x").write_bytes(raw)
    with pytest.raises(NonFiniteError, match="byte 24"):
        load_tensor(tmp_path / "x")
    (tmp_path / "y").write_text("IMGT-TEXT 1 2 1\n1\nnan\n")
    with pytest.raises(NonFiniteError, match="line 3"):
        load_tensor(tmp_path / "y")


@pytest.mark.parametrize(
    "content",
    [b"PNG\x00", b"IMGTBIN1\x01\x00", b"IMGT-TEXT 2 x 1\n", b"IMGT-TEXT 0 1 1\n"],
)
def test_malformed_header(tmp_path, content):
    (tmp_path / "x").write_bytes(content)
    with pytest.raises(HeaderError):
        load_tensor(tmp_path / "x")


def test_error_kinds_are_distinct():
    kinds = {HeaderError, ElementCountError, NonFiniteError}
    assert len(kinds) == 3 and all(issubclass(k, TensorFormatError) for k in kinds)
