import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpmoe.errors import ParameterError, ShapeError
from dpmoe.tensor import DTYPE, RngState, gaussian, log_softmax, matmul, softmax, stream_id


def test_matmul_identity_exact():
    a = np.random.default_rng(0).standard_normal((5, 7))
    assert np.array_equal(matmul(a, np.eye(7)), a)


def test_matmul_batched_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(matmul(a, b), a @ b, rtol=0, atol=1e-14)
    assert matmul(a, b).dtype == DTYPE


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)),
       st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(x, c):
    p = softmax(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(x + c), p, atol=1e-12)


def test_softmax_large_logits_stable():
    p = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])
    np.testing.assert_allclose(log_softmax(np.array([[1000.0, 0.0]])), [[0.0, -1000.0]])


def test_stream_id_is_crc32():
    assert stream_id("embedding") == zlib.crc32(b"embedding")


def test_rng_same_seed_and_stream_identical():
    a = gaussian((4, 3), RngState(7, 11))
    b = gaussian((4, 3), RngState(7, 11))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, gaussian((4, 3), RngState(7, 12)))


def test_rng_child_does_not_advance_parent():
    r = RngState(3)
    child = r.child(5)
    assert child.stream_id != r.stream_id
    x = r.generator.random()
    assert x == RngState(3).generator.random()


def test_gaussian_statistics():
    z = gaussian((100_000,), RngState(0), 1.0)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_gaussian_sigma_zero_and_negative():
    assert not gaussian((3,), RngState(0), 0.0).any()
    with pytest.raises(ParameterError):
        gaussian((3,), RngState(0), -1.0)
