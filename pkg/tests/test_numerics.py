import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvmerge.errors import DegenerateRowError, InvalidRangeError, ShapeError
from kvmerge.numerics import (
    Matrix,
    SeededStream,
    causal_softmax,
    softmax_masked_row,
    stream_next_u64,
    stream_next_u64_array,
    stream_uniform_array,
    stream_uniform_f32,
    u64_to_uniform_f32,
)

from oracles import splitmix64


def test_splitmix_seed0_first_outputs():
    v1, s = stream_next_u64(SeededStream(0))
    v2, _ = stream_next_u64(s)
    assert v1 == 0xE220A8397B1DCDAF
    assert v2 == 0x6E789E6AA1B965F4


def test_stream_is_by_value():
    s = SeededStream(7)
    a, _ = stream_next_u64(s)
    b, _ = stream_next_u64(s)
    assert a == b and s.state == 7


@given(st.integers(min_value=0, max_value=2**64 - 1))
@settings(max_examples=50)
def test_scalar_matches_reference(seed):
    s = SeededStream(seed)
    got = []
    for _ in range(5):
        v, s = stream_next_u64(s)
        got.append(v)
    assert got == splitmix64(seed, 5)


@given(st.integers(min_value=0, max_value=2**64 - 1), st.integers(min_value=1, max_value=64))
@settings(max_examples=50)
def test_vectorised_matches_scalar(seed, n):
    arr, s_vec = stream_next_u64_array(SeededStream(seed), n)
    assert [int(v) for v in arr] == splitmix64(seed, n)
    s = SeededStream(seed)
    for _ in range(n):
        _, s = stream_next_u64(s)
    assert s == s_vec


def test_identical_seeds_identical_sequences():
    a, _ = stream_next_u64_array(SeededStream(123), 1000)
    b, _ = stream_next_u64_array(SeededStream(123), 1000)
    assert a.tobytes() == b.tobytes()


def test_uniform_endpoints():
    assert u64_to_uniform_f32(np.uint64(0), 0.0, 1.0) == 0.0
    top = np.uint64(((1 << 24) - 1) << 40)
    assert u64_to_uniform_f32(top, 0.0, 1.0) == np.float32((2**24 - 1) / 2**24)
    half = np.uint64(1 << 63)
    assert u64_to_uniform_f32(half, -2.0, 2.0) == 0.0


def test_uniform_rejects_empty_range():
    with pytest.raises(InvalidRangeError):
        stream_uniform_f32(SeededStream(0), 1.0, 1.0)
    with pytest.raises(InvalidRangeError):
        stream_uniform_array(SeededStream(0), 3, 2.0, -2.0)


def test_uniform_scalar_matches_array():
    s = SeededStream(99)
    scalars = []
    for _ in range(20):
        v, s = stream_uniform_f32(s, -0.5, 0.5)
        scalars.append(v)
    arr, _ = stream_uniform_array(SeededStream(99), 20, -0.5, 0.5)
    assert np.array_equal(np.array(scalars, dtype=np.float32), arr)
    assert np.all((arr >= -0.5) & (arr < 0.5))


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 1e4])
def test_softmax_equal_scores(c):
    np.testing.assert_allclose(softmax_masked_row([c, c, c]), [1 / 3] * 3, atol=1e-7)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax_masked_row([0.0, math.log(2)]), [1 / 3, 2 / 3], atol=1e-7)


def test_softmax_single_unmasked():
    out = softmax_masked_row([5.0, 100.0], [False, True])
    assert out.tolist() == [1.0, 0.0]


def test_softmax_all_masked():
    with pytest.raises(DegenerateRowError):
        softmax_masked_row([1.0, 2.0], [True, True])


@given(
    st.lists(st.floats(-1e4, 1e4, width=32), min_size=1, max_size=20),
    st.floats(-100, 100),
    st.data(),
)
def test_softmax_properties(scores, shift, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)))
    if all(mask):
        mask[0] = False
    p = softmax_masked_row(scores, mask)
    assert np.all(p >= 0)
    assert abs(float(p.sum()) - 1.0) < 1e-6
    assert np.all(p[np.array(mask)] == 0)
    shifted = softmax_masked_row(np.array(scores, dtype=np.float32) + np.float32(shift), mask)
    np.testing.assert_allclose(shifted, p, atol=1e-6)


def test_causal_softmax_zero_above_diagonal():
    rng = np.random.default_rng(0)
    probs = causal_softmax(rng.normal(size=(3, 6, 6)).astype(np.float32))
    assert np.all(probs[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_matrix_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        Matrix(2, 3, np.zeros(5))
    with pytest.raises(ShapeError):
        Matrix(0, 3, np.zeros(0))
    m = Matrix(2, 3, np.arange(6))
    assert m.data.shape == (2, 3) and m.data.dtype == np.float32
    assert not m.data.flags.writeable
