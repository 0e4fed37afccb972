import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shmm import UsageError
from shmm.numerics import AdamState, adam_step, diag_gaussian_logpdf, kl_diag_gaussians, logsumexp

finite = st.floats(-700, 700, allow_nan=False)


def test_logsumexp_single_element():
    assert logsumexp([-3.0]) == -3.0


def test_logsumexp_two_zeros():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_logsumexp_matches_extended_precision():
    rng = np.random.default_rng(1)
    mpmath.mp.dps = 50
    for _ in range(20):
        v = rng.uniform(-700, 700, size=10)
        exact = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in v))
        assert logsumexp(v) == pytest.approx(float(exact), rel=1e-12)


def test_logsumexp_all_neg_inf_and_empty():
    assert logsumexp([-np.inf, -np.inf]) == -np.inf
    with pytest.raises(UsageError):
        logsumexp([])


def test_logsumexp_axis_with_neg_inf_rows():
    v = np.array([[0.0, 0.0], [-np.inf, -np.inf], [-np.inf, 1.0]])
    out = logsumexp(v, axis=1)
    np.testing.assert_allclose(out, [math.log(2.0), -np.inf, 1.0])


@given(st.lists(finite, min_size=1, max_size=12), st.floats(-100, 100))
def test_logsumexp_shift(values, c):
    v = np.array(values)
    assert logsumexp(v + c) == pytest.approx(logsumexp(v) + c, rel=1e-12, abs=1e-12)


def test_logpdf_at_mean():
    assert diag_gaussian_logpdf([0.0], [0.0], [0.0]) == pytest.approx(-0.918938533204673, abs=1e-12)


def test_logpdf_one_unit_away():
    assert diag_gaussian_logpdf([1.0], [0.0], [0.0]) == pytest.approx(-1.418938533204673, abs=1e-12)


def test_logpdf_matches_direct_variances():
    rng = np.random.default_rng(2)
    x, mean = rng.normal(size=4), rng.normal(size=4)
    var = rng.uniform(0.2, 3.0, size=4)
    direct = sum(
        math.log(1.0 / math.sqrt(2 * math.pi * s2)) - (a - m) ** 2 / (2 * s2)
        for a, m, s2 in zip(x, mean, var)
    )
    assert diag_gaussian_logpdf(x, mean, np.log(var)) == pytest.approx(direct, abs=1e-10)


def test_logpdf_dimension_mismatch():
    with pytest.raises(UsageError):
        diag_gaussian_logpdf([0.0, 1.0], [0.0], [0.0])


def test_logpdf_integrates_to_one():
    # randomly shifted lattice over a wide box: a Monte-Carlo rule with low variance
    rng = np.random.default_rng(3)
    lo, hi, n = -15.0, 15.0, 20000
    xs = lo + (hi - lo) * (np.arange(n) + rng.uniform()) / n
    dens = np.exp([diag_gaussian_logpdf([x], [0.7], [np.log(2.0)]) for x in xs])
    assert (hi - lo) * dens.mean() == pytest.approx(1.0, rel=0.01)


def test_kl_identical_is_zero():
    m, lv = np.array([0.3, -1.0]), np.array([0.1, 2.0])
    assert kl_diag_gaussians(m, lv, m, lv) == 0.0


def test_kl_unit_shift():
    assert kl_diag_gaussians([1.0], [0.0], [0.0], [0.0]) == pytest.approx(0.5, abs=1e-15)


def test_kl_dimension_mismatch():
    with pytest.raises(UsageError):
        kl_diag_gaussians([0.0, 0.0], [0.0], [0.0, 0.0], [0.0, 0.0])


@settings(max_examples=200)
@given(
    st.lists(st.tuples(*[st.floats(-5, 5)] * 4), min_size=1, max_size=6),
)
def test_kl_non_negative(rows):
    mq, lq, mp, lp = (np.array(c) for c in zip(*rows))
    kl = kl_diag_gaussians(mq, lq, mp, lp)
    assert kl >= 0.0
    if not (np.array_equal(mq, mp) and np.array_equal(lq, lp)):
        # strictly positive unless the difference is below float resolution
        assert kl > 0.0 or np.allclose(mq, mp, atol=1e-7) and np.allclose(lq, lp, atol=1e-7)


def test_adam_zero_gradient_keeps_params():
    state = AdamState.zeros(3)
    params = np.array([1.0, -2.0, 0.5])
    _, new = adam_step(state, params, np.zeros(3))
    np.testing.assert_array_equal(new, params)
    assert state.step_count == 1


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState.zeros(4, learning_rate=0.01, epsilon=0.0)
    params = np.zeros(4)
    _, new = adam_step(state, params, np.array([3.0, -0.2, 1e-3, 50.0]))
    np.testing.assert_allclose(np.abs(new - params), 0.01, rtol=1e-12)
    assert np.all(np.sign(new) == [1, -1, 1, 1])


def test_adam_ascends_concave_quadratic():
    state = AdamState.zeros(1, learning_rate=0.1)
    x = np.array([3.0])
    for _ in range(100):
        _, x = adam_step(state, x, -2.0 * x)
    assert abs(x[0]) < 0.5
    assert state.step_count == 100
    assert np.all(state.second_moment >= 0)


def test_adam_dimension_mismatch():
    with pytest.raises(UsageError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))
