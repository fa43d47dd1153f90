import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfdlab import numerics
from lfdlab.errors import (
    AllNegInfError,
    LengthMismatchError,
    RankOutOfRangeError,
    ZeroVectorError,
)

NEG = -np.inf

# 40-digit mpmath evaluation of e^x / sum(e^x) for x = [1, 2, 3]
SOFTMAX_123 = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
LOG_SOFTMAX_123 = [-2.4076059644443803045, -1.4076059644443803045, -0.40760596444438030448]


def test_softmax_examples():
    np.testing.assert_array_equal(numerics.softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_array_equal(numerics.softmax([0.0, NEG]), [1.0, 0.0])
    np.testing.assert_allclose(numerics.softmax([1.0, 2.0, 3.0]), SOFTMAX_123, rtol=0, atol=1e-15)


def test_softmax_all_neg_inf():
    with pytest.raises(AllNegInfError):
        numerics.softmax([NEG, NEG])
    with pytest.raises(AllNegInfError):
        numerics.log_softmax([[0.0, 1.0], [NEG, NEG]])


def test_log_softmax_examples():
    np.testing.assert_allclose(numerics.log_softmax([0.0, 0.0]), [math.log(0.5)] * 2, atol=1e-15)
    out = numerics.log_softmax([5.0, NEG])
    assert out[0] == 0.0 and out[1] == NEG
    np.testing.assert_allclose(numerics.log_softmax([1.0, 2.0, 3.0]), LOG_SOFTMAX_123, atol=1e-15)


def test_jsd_examples():
    assert numerics.jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert numerics.jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-15)
    # term-by-term: m = [0.7, 0.3]
    by_hand = 0.5 * (0.5 * math.log(0.5 / 0.7) + 0.5 * math.log(0.5 / 0.3)) \
        + 0.5 * (0.9 * math.log(0.9 / 0.7) + 0.1 * math.log(0.1 / 0.3))
    assert numerics.jsd([0.5, 0.5], [0.9, 0.1]) == pytest.approx(by_hand, abs=1e-15)
    assert by_hand == pytest.approx(0.10174922507919668856, abs=1e-15)


def test_jsd_length_mismatch():
    with pytest.raises(LengthMismatchError):
        numerics.jsd([0.5, 0.5], [0.2, 0.3, 0.5])


def test_cosine_examples():
    assert numerics.cosine([1, 2], [1, 2]) == 1.0
    assert numerics.cosine([1, 0], [0, 1]) == 0.0
    assert numerics.cosine([1, 1], [1, -1]) == 0.0
    with pytest.raises(ZeroVectorError):
        numerics.cosine([0, 0], [1, 1])


def test_kth_max_examples():
    assert numerics.kth_max([3, 1, 2], 1) == 3
    assert numerics.kth_max([3, 1, 2], 3) == 1
    assert numerics.kth_max([2, 2, 1], 2) == 2
    assert numerics.kth_max([NEG, 4.0, 1.0], 2) == 1.0
    with pytest.raises(RankOutOfRangeError):
        numerics.kth_max([NEG, 4.0, 1.0], 3)
    with pytest.raises(RankOutOfRangeError):
        numerics.kth_max([1.0], 0)


logvecs = arrays(np.float64, st.integers(2, 40),
                 elements=st.floats(-60, 60, allow_nan=False, allow_infinity=False))


@given(logvecs)
def test_softmax_is_distribution(x):
    p = numerics.softmax(x)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(np.exp(numerics.log_softmax(x)), p, rtol=0, atol=1e-12)


@given(logvecs, st.data())
def test_masking_identity(x, data):
    n = x.size
    masked = data.draw(st.sets(st.integers(0, n - 1), max_size=n - 1))
    keep = np.ones(n, dtype=bool)
    keep[list(masked)] = False
    direct = numerics.softmax(numerics.mask_positions(x, masked))
    assert (direct[~keep] == 0).all()
    np.testing.assert_allclose(direct[keep], numerics.restrict(numerics.softmax(x), keep),
                               rtol=0, atol=1e-9)


@settings(max_examples=200)
@given(logvecs, st.integers(0, 2**32 - 1))
def test_jsd_properties(x, seed):
    p = numerics.softmax(x)
    q = numerics.softmax(np.random.default_rng(seed).normal(size=x.size) * 5)
    assert numerics.jsd(p, q) == numerics.jsd(q, p)
    assert numerics.jsd(p, p) <= 1e-12
    assert 0.0 <= numerics.jsd(p, q) <= math.log(2) + 1e-12


def test_jsd_batched_matches_rowwise():
    rng = np.random.default_rng(0)
    p = numerics.softmax(rng.normal(size=(5, 7)))
    q = numerics.softmax(rng.normal(size=(5, 7)))
    batched = numerics.jsd(p, q)
    assert batched.shape == (5,)
    np.testing.assert_array_equal(batched, [numerics.jsd(a, b) for a, b in zip(p, q)])


def _jsd_mp(p, q):
    mpmath.mp.dps = 40
    p = [mpmath.mpf(float(x)) for x in p]
    q = [mpmath.mpf(float(x)) for x in q]
    total = mpmath.mpf(0)
    for a, b in zip(p, q):
        m = (a + b) / 2
        if a > 0:
            total += a * mpmath.log(a / m) / 2
        if b > 0:
            total += b * mpmath.log(b / m) / 2
    return float(total)


def test_jsd_against_high_precision_oracle():
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(2, 12))
        p = numerics.softmax(rng.normal(size=n) * 4)
        q = numerics.softmax(rng.normal(size=n) * 4)
        if rng.random() < 0.3:
            q[int(rng.integers(n))] = 0.0
            q /= q.sum()
        assert numerics.jsd(p, q) == pytest.approx(_jsd_mp(p, q), abs=1e-14)
