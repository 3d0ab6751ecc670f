import numpy as np
import pytest
from hypothesis import given, strategies as st

from tfcorrnet import tensor as T
from tfcorrnet.filters import apply_filters, selector_filters, stack_taps
from tfcorrnet.gradcheck import gradcheck
from tfcorrnet.tensor import Tensor


def cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def naive_apply(w, xs):
    k, mo, p, t, f = w.shape
    y = np.zeros((k, mo, t, f), complex)
    for a in range(k):
        for o in range(mo):
            for tt in range(t):
                for ff in range(f):
                    acc = 0j
                    for q in range(p):
                        acc += w[a, o, q, tt, ff] * xs[q, tt, ff]
                    y[a, o, tt, ff] = acc
    return y


def test_stack_taps_layout(rng):
    x = cplx(rng, 2, 5, 3)
    s = stack_taps(x, 1)
    assert s.shape == (6, 5, 3)
    for li, ell in enumerate((-1, 0, 1)):
        for m in range(2):
            for t in range(5):
                expected = x[m, t + ell] if 0 <= t + ell < 5 else 0
                np.testing.assert_array_equal(s[li * 2 + m, t], expected)


def test_single_frame_edges_are_zero(rng):
    s = stack_taps(cplx(rng, 2, 1, 3), 1)
    assert np.all(s[:2] == 0) and np.all(s[4:] == 0)


@pytest.mark.parametrize("taps_l", [0, 1, 2])
@pytest.mark.parametrize("n_out", [1, 3])
def test_selector_reproduces_input(taps_l, n_out, rng):
    x = cplx(rng, 3, 6, 4)
    w_re, w_im = selector_filters(2, n_out, 3, taps_l, 6, 4)
    y_re, y_im = apply_filters(w_re, w_im, stack_taps(x, taps_l))
    y = y_re.data + 1j * y_im.data
    expected = x[:1] if n_out == 1 else x
    for k in range(2):
        assert np.max(np.abs(y[k] - expected)) < 1e-10


def test_zero_filters(rng):
    xs = stack_taps(cplx(rng, 2, 4, 3), 1)
    z = Tensor(np.zeros((2, 1, 6, 4, 3)), dtype=np.float64)
    y_re, y_im = apply_filters(z, z, xs)
    assert np.all(y_re.data == 0) and np.all(y_im.data == 0)


@given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 3), st.integers(0, 1),
       st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_matches_naive_oracle(k, mo, m, taps_l, t, f, seed):
    rng = np.random.default_rng(seed)
    p = (2 * taps_l + 1) * m
    xs = stack_taps(cplx(rng, m, t, f), taps_l)
    w = cplx(rng, k, mo, p, t, f)
    y_re, y_im = apply_filters(Tensor(w.real, dtype=np.float64), Tensor(w.imag, dtype=np.float64), xs)
    assert np.max(np.abs(y_re.data + 1j * y_im.data - naive_apply(w, xs))) < 1e-10


def test_linear_in_filters_and_input(rng):
    xs1, xs2 = cplx(rng, 4, 3, 2), cplx(rng, 4, 3, 2)
    w1, w2 = cplx(rng, 1, 1, 4, 3, 2), cplx(rng, 1, 1, 4, 3, 2)

    def app(w, xs):
        re, im = apply_filters(Tensor(w.real, dtype=np.float64), Tensor(w.imag, dtype=np.float64), xs)
        return re.data + 1j * im.data

    np.testing.assert_allclose(app(w1 + 2 * w2, xs1), app(w1, xs1) + 2 * app(w2, xs1), atol=1e-12)
    np.testing.assert_allclose(app(w1, xs1 - 3 * xs2), app(w1, xs1) - 3 * app(w1, xs2), atol=1e-12)


def test_filter_gradient(rng):
    xs = stack_taps(cplx(rng, 2, 3, 2), 1)
    w_re = Tensor(rng.standard_normal((2, 1, 6, 3, 2)), requires_grad=True, dtype=np.float64)
    w_im = Tensor(rng.standard_normal((2, 1, 6, 3, 2)), requires_grad=True, dtype=np.float64)

    def fn():
        y_re, y_im = apply_filters(w_re, w_im, xs)
        return T.tsum(T.hypot(y_re, y_im))

    assert gradcheck(fn, [w_re, w_im]) < 1e-5


def test_shape_mismatch(rng):
    xs = stack_taps(cplx(rng, 2, 3, 2), 1)
    w = Tensor(np.zeros((1, 1, 4, 3, 2)), dtype=np.float64)
    with pytest.raises(ValueError):
        apply_filters(w, w, xs)
