import numpy as np
import pytest
from hypothesis import given, strategies as st

from lpld.roifeat import FeatureMap, cosine_distance, cosine_distances, roi_align, roi_align_backward, \
    roi_align_many, sampler_for, roi_align_sampled

from conftest import random_boxes
from oracles import central_difference


def x_ramp(h=4, w=6, scale=1.0):
    cols = (np.arange(w) + 0.5) * scale
    return FeatureMap(np.broadcast_to(cols, (1, h, w)).copy(), scale)


def bilinear(data, x, y, scale):
    """Scalar bilinear read with border clamping in scene coordinates."""
    _, H, W = data.shape
    u = min(max(x / scale - 0.5, 0), W - 1)
    v = min(max(y / scale - 0.5, 0), H - 1)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, W - 1), min(v0 + 1, H - 1)
    fu, fv = u - u0, v - v0
    return ((1 - fv) * (1 - fu) * data[:, v0, u0] + (1 - fv) * fu * data[:, v0, u1]
            + fv * (1 - fu) * data[:, v1, u0] + fv * fu * data[:, v1, u1])


class TestFeatureMap:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            FeatureMap(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            FeatureMap(np.full((1, 2, 2), np.nan))

    def test_properties(self):
        fm = FeatureMap(np.zeros((3, 4, 5)), 2.0)
        assert (fm.channels, fm.height, fm.width) == (3, 4, 5)


class TestRoiAlign:
    def test_constant_field(self, rng):
        fm = FeatureMap(np.full((2, 5, 5), 3.5))
        for b in random_boxes(rng, 10, extent=8):
            assert np.allclose(roi_align(fm, b, 3), 3.5)

    def test_full_map_center_p1(self):
        fm = x_ramp(4, 6, 2.0)
        # sample at the box center x = 6, which is the ramp value there
        assert roi_align(fm, (0, 0, 12, 8), 1) == pytest.approx([6.0])

    def test_ramp_p2_hand_values(self):
        fm = x_ramp(4, 6, 1.0)
        out = roi_align(fm, (1, 1, 5, 3), 2)
        # sample x positions 2 and 4; rows repeat
        assert np.allclose(out, [2.0, 4.0, 2.0, 4.0])

    def test_matches_scalar_bilinear(self, rng):
        fm = FeatureMap(rng.normal(size=(3, 6, 7)), 1.5)
        for b in random_boxes(rng, 8, extent=10):
            P = 3
            got = roi_align(fm, b, P).reshape(3, P * P)
            k = 0
            for a in range(P):
                for c in range(P):
                    x = b[0] + (c + 0.5) / P * (b[2] - b[0])
                    y = b[1] + (a + 0.5) / P * (b[3] - b[1])
                    assert np.allclose(got[:, k], bilinear(fm.data, x, y, fm.scale))
                    k += 1

    def test_outside_reads_border(self):
        fm = x_ramp(3, 3, 1.0)
        assert np.allclose(roi_align(fm, (-50, -50, -40, -40), 2), 0.5)

    def test_inside_constant_region_exact(self):
        data = np.zeros((1, 10, 10))
        data[0, 2:8, 2:8] = 1.25
        assert np.all(roi_align(FeatureMap(data), (3, 3, 7, 7), 3) == 1.25)

    def test_output_length(self, rng):
        fm = FeatureMap(rng.normal(size=(4, 5, 5)))
        assert roi_align(fm, (0, 0, 3, 3), 2).shape == (16,)
        assert roi_align_many(fm, random_boxes(rng, 7), 3).shape == (7, 36)

    @given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_map(self, seed, a, b):
        r = np.random.default_rng(seed)
        F, G = r.normal(size=(2, 5, 6)), r.normal(size=(2, 5, 6))
        boxes = random_boxes(r, 4, extent=6)
        lhs = roi_align_many(FeatureMap(a * F + b * G), boxes, 2)
        rhs = a * roi_align_many(FeatureMap(F), boxes, 2) + b * roi_align_many(FeatureMap(G), boxes, 2)
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_backward_is_jacobian(self, rng):
        data = rng.normal(size=(2, 4, 5))
        boxes = random_boxes(rng, 3, extent=5, max_size=4)
        s = sampler_for(FeatureMap(data), boxes, 2)
        w = rng.normal(size=(3, 8))
        analytic = roi_align_backward(w, s, 2).ravel()
        f = lambda v: float((roi_align_sampled(FeatureMap(v.reshape(data.shape)), s) * w).sum())
        numeric = central_difference(f, data.ravel())
        err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-6)
        assert np.all((err < 1e-5) | (np.abs(analytic - numeric) < 1e-9))


class TestCosineDistance:
    def test_identical(self):
        assert cosine_distance([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_antipodal(self):
        assert cosine_distance([1, -2], [-1, 2]) == pytest.approx(2.0)

    def test_degenerate(self):
        assert cosine_distance([0, 0], [1, 2]) == 0.0

    @given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, seed, lam, mu):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=6), r.normal(size=6)
        d = cosine_distance(a, b)
        assert 0 <= d <= 2
        assert cosine_distance(b, a) == pytest.approx(d, abs=1e-12)
        assert cosine_distance(lam * a, mu * b) == pytest.approx(d, abs=1e-9)

    def test_rowwise_matches_scalar(self, rng):
        A, B = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        A[2] = 0
        assert np.allclose(cosine_distances(A, B), [cosine_distance(a, b) for a, b in zip(A, B)])
