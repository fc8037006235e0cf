import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdg.errors import NumericalError, UsageError
from fdg.numerics import Rng, finite_diff_grad, log_softmax, sq_euclidean

vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50))


def test_log_softmax_fixtures():
    np.testing.assert_allclose(log_softmax([0.0, 0.0]), [-math.log(2)] * 2, rtol=0, atol=1e-15)
    np.testing.assert_allclose(log_softmax([1000.0, 1000.0]), [-math.log(2)] * 2, rtol=0, atol=1e-15)
    c = math.log1p(math.exp(-1))
    np.testing.assert_allclose(log_softmax([0.0, -1.0]), [-c, -1 - c], rtol=0, atol=1e-15)
    assert c == pytest.approx(0.3133, abs=1e-4)


def test_log_softmax_empty():
    with pytest.raises(UsageError):
        log_softmax([])


@given(vectors)
def test_log_softmax_normalized(v):
    assert abs(np.exp(log_softmax(v)).sum() - 1.0) < 1e-12


@given(vectors, st.floats(-1e3, 1e3))
def test_log_softmax_shift_invariant(v, c):
    np.testing.assert_allclose(log_softmax(v + c), log_softmax(v), rtol=0, atol=1e-12)


@pytest.mark.parametrize("a,b,expected", [((0, 0), (0, 0), 0.0), ((0, 0), (3, 4), 25.0), ((1, 2), (4, 6), 25.0)])
def test_sq_euclidean_fixtures(a, b, expected):
    assert sq_euclidean(a, b) == expected


def test_sq_euclidean_length_mismatch():
    with pytest.raises(UsageError):
        sq_euclidean([1, 2], [1, 2, 3])


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-1e3, 1e3)), arrays(np.float64, n, elements=st.floats(-1e3, 1e3)))))
def test_sq_euclidean_symmetric_nonnegative(pair):
    a, b = pair
    assert sq_euclidean(a, b) == sq_euclidean(b, a)
    assert sq_euclidean(a, b) >= 0
    assert sq_euclidean(a, a) == 0


def test_finite_diff_fixtures():
    assert abs(finite_diff_grad(lambda t: float(t[0] ** 2), [3.0])[0] - 6.0) < 1e-8
    np.testing.assert_allclose(finite_diff_grad(lambda t: float(t.sum()), np.arange(5.0)), np.ones(5), atol=1e-9)


def test_finite_diff_non_finite():
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda t: float("nan"), [1.0])


def test_rng_streams():
    a = Rng(7).generator.bytes(64)
    assert a == Rng(7).generator.bytes(64)
    assert a != Rng(8).generator.bytes(64)
    root = Rng(7)
    x, y = root.split("x"), root.split("y")
    assert x.generator.bytes(64) != y.generator.bytes(64)
    assert Rng(7).split("x").generator.bytes(64) == Rng(7).split("x").generator.bytes(64)
    # splitting does not consume the parent stream
    consumed = Rng(7)
    consumed.split("z")
    assert consumed.generator.bytes(64) == a
    # nested splits are deterministic and path-dependent
    assert Rng(7).split("a").split("b").random() == Rng(7).split("a").split("b").random()
    assert Rng(7).split("a").split("b").random() != Rng(7).split("b").split("a").random()
