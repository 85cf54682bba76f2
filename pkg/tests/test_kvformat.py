import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hallucdet import kvformat


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_float_arrays_round_trip_exactly(a):
    kind, back = kvformat.loads(kvformat.dumps("thing", {"a": a}))
    assert kind == "thing"
    assert back["a"].shape == a.shape
    assert np.array_equal(back["a"], a)


def test_int_arrays_keep_full_precision():
    a = np.array([2 ** 62 + 1, -3], dtype=np.int64)
    back = kvformat.loads(kvformat.dumps("t", {"a": a}))[1]["a"]
    assert back.dtype == np.int64 and np.array_equal(back, a)


def test_scalars_come_back_as_text():
    fields = kvformat.loads(kvformat.dumps("t", {"x": 0.1, "name": "cosine", "n": 3}))[1]
    assert float(fields["x"]) == 0.1 and fields["name"] == "cosine" and int(fields["n"]) == 3


def test_dumps_is_deterministic():
    f = {"w": np.arange(6.0).reshape(2, 3) / 7, "k": "fc"}
    assert kvformat.dumps("head", f) == kvformat.dumps("head", dict(f))


def test_header_checks():
    text = kvformat.dumps("world", {"a": 1})
    with pytest.raises(kvformat.FormatError):
        kvformat.loads(text, expect_kind="head")
    with pytest.raises(kvformat.FormatError):
        kvformat.loads(text.replace("hallucdet-kv 1", "hallucdet-kv 9"))
    with pytest.raises(kvformat.FormatError):
        kvformat.loads("a=1\n")
    with pytest.raises(kvformat.FormatError):
        kvformat.loads(text + "garbage line\n")


def test_bad_keys_and_values():
    with pytest.raises(kvformat.FormatError):
        kvformat.dumps("t", {"a=b": 1})
    with pytest.raises(kvformat.FormatError):
        kvformat.dumps("t", {"a": "two\nlines"})
    with pytest.raises(kvformat.FormatError):
        kvformat.loads("# hallucdet-kv 1 t\na=@f2;1.0 x\n")
