import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from lpld.scorealg import ZeroForegroundMass, amplify, background, fg_argmax, foreground, kl_div, \
    kl_div_grad_logits, softmax

from oracles import central_difference, kl_scalar

logit_vectors = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


@st.composite
def distributions(draw, n=None):
    k = n or draw(st.integers(2, 7))
    w = draw(arrays(np.float64, k, elements=st.floats(0.0, 1.0)))
    w = w + 1e-3
    return w / w.sum()


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax(np.zeros(4)), 0.25)

    def test_hand_value(self):
        assert np.allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3])

    def test_extreme_logits_finite(self):
        p = softmax([1000.0, -1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    @given(logit_vectors, st.floats(-100, 100))
    def test_shift_invariant(self, z, c):
        assert np.allclose(softmax(z + c), softmax(z), atol=1e-12)

    @given(logit_vectors)
    def test_valid_score_vector(self, z):
        p = softmax(z)
        assert np.all((p >= 0) & (p <= 1))
        assert abs(p.sum() - 1.0) < 1e-9

    def test_batched_rows(self, rng):
        z = rng.normal(size=(5, 4))
        assert np.allclose(softmax(z), np.stack([softmax(r) for r in z]))


class TestAmplify:
    def test_direct(self):
        assert np.allclose(amplify([0.2, 0.3, 0.5]), [0.4, 0.6])

    def test_hand_value(self):
        assert np.allclose(amplify([0.7, 0.1, 0.2]), [0.875, 0.125])

    def test_no_background_mass_is_identity(self):
        assert np.allclose(amplify([0.6, 0.4, 0.0]), [0.6, 0.4])

    def test_pure_background_raises(self):
        with pytest.raises(ZeroForegroundMass):
            amplify([0.0, 0.0, 1.0])

    def test_helpers(self):
        s = np.array([0.1, 0.6, 0.3])
        assert np.allclose(foreground(s), [0.1, 0.6])
        assert background(s) == pytest.approx(0.3)
        assert fg_argmax(s) == 1

    @given(logit_vectors)
    def test_sums_to_one_and_keeps_argmax(self, z):
        s = softmax(z)
        a = amplify(s)
        assert abs(a.sum() - 1.0) < 1e-9
        assert np.argmax(a) == np.argmax(s[:-1])


class TestKL:
    def test_identity(self):
        assert kl_div([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_hand_value(self):
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert kl_div([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.14384, abs=1e-5)

    def test_scalar_oracle(self):
        assert kl_div([0.5, 0.5], [0.25, 0.75]) == pytest.approx(kl_scalar([0.5, 0.5], [0.25, 0.75]), abs=1e-15)

    def test_one_hot(self):
        assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_target_finite(self):
        v = kl_div([0.5, 0.5], [1.0, 0.0])
        assert math.isfinite(v) and v > 10

    @given(distributions(4), distributions(4))
    def test_non_negative(self, p, q):
        assert kl_div(p, q) >= -1e-12

    @given(distributions())
    def test_zero_iff_equal(self, p):
        assert kl_div(p, p) == pytest.approx(0.0, abs=1e-15)
        q = np.roll(p, 1)
        if np.max(np.abs(p - q)) > 1e-6:
            assert kl_div(p, q) > 0

    @given(distributions(5), distributions(5))
    def test_matches_scalar_oracle(self, p, q):
        assert kl_div(p, q) == pytest.approx(kl_scalar(p, q), rel=1e-10, abs=1e-14)

    def test_logit_gradient(self, rng):
        for _ in range(10):
            z = rng.normal(0, 2, 5)
            q = softmax(rng.normal(0, 2, 5))
            loss, g = kl_div_grad_logits(z[None], q[None])
            assert loss[0] == pytest.approx(kl_div(softmax(z), q))
            num = central_difference(lambda v: kl_div(softmax(v), q), z)
            assert np.allclose(g[0], num, atol=1e-8)
