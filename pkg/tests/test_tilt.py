import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satilt.gradcheck import check_gradients
from satilt.tensor import Tensor
from satilt.tilt import accuracy, angle_error, bce_loss, decode_prediction, encode_labels

angles = st.integers(0, 359)
intervals = st.integers(0, 179)


class TestEncode:
    def test_interior(self):
        assert set(np.flatnonzero(encode_labels(45, 2))) == {43, 44, 45, 46, 47}

    def test_wraps_high(self):
        assert set(np.flatnonzero(encode_labels(359, 2))) == {357, 358, 359, 0, 1}

    def test_wraps_low(self):
        assert set(np.flatnonzero(encode_labels(1, 2))) == {359, 0, 1, 2, 3}

    def test_one_hot(self):
        y = encode_labels(0, 0)
        assert y[0] == 1 and y.sum() == 1

    def test_interval_too_wide(self):
        with pytest.raises(ValueError):
            encode_labels(10, 180)

    @given(angles, intervals)
    def test_popcount(self, G, I):
        y = encode_labels(G, I)
        assert y.sum() == 2 * I + 1
        assert set(np.unique(y)) <= {0.0, 1.0}

    @given(angles, intervals, st.integers(-720, 720))
    def test_shift_equivariance(self, G, I, s):
        np.testing.assert_array_equal(encode_labels((G + s) % 360, I), np.roll(encode_labels(G, I), s))

    @given(angles, intervals)
    def test_cyclic_contiguity(self, G, I):
        y = encode_labels(G, I)
        # exactly one 0->1 edge going round the circle (unless everything is 1)
        edges = np.sum((np.roll(y, 1) == 0) & (y == 1))
        assert edges == 1


class TestBCE:
    def test_perfect(self):
        y = encode_labels(100, 2)
        assert float(bce_loss(y, y).data) <= 1e-10

    @given(angles, st.integers(0, 5))
    def test_half_is_ln2(self, G, I):
        loss = float(bce_loss(encode_labels(G, I), np.full(360, 0.5)).data)
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_loop_oracle(self, rng):
        y = (rng.random(360) < 0.3).astype(float)
        p = rng.uniform(0.001, 0.999, 360)
        expected = -sum(y[i] * math.log(p[i]) + (1 - y[i]) * math.log(1 - p[i]) for i in range(360)) / 360
        assert float(bce_loss(y, p).data) == pytest.approx(expected, abs=1e-12)

    def test_gradient(self, rng):
        y = encode_labels(7, 2)
        p = Tensor(rng.uniform(0.01, 0.99, 360), tracked=True)
        assert check_gradients(lambda t: bce_loss(y, t), p, coords=60) <= 1e-6

    def test_flips_increase_loss(self, rng):
        y = encode_labels(200, 2)
        base = np.where(y == 1, 0.99, 0.01)
        ref = float(bce_loss(y, base).data)
        labeled, unlabeled = base.copy(), base.copy()
        labeled[200] = 0.01
        unlabeled[10] = 0.99
        assert float(bce_loss(y, labeled).data) > ref
        assert float(bce_loss(y, unlabeled).data) > ref

    def test_clamp_keeps_loss_finite(self):
        y = encode_labels(0, 1)
        assert np.isfinite(float(bce_loss(y, 1.0 - y).data))


class TestDecode:
    def test_single_max(self):
        p = np.full(360, 0.1)
        p[45] = 0.9
        assert decode_prediction(p) == 45

    def test_tie_average(self):
        p = np.full(360, 0.1)
        p[[44, 45, 46]] = 1.0
        assert decode_prediction(p) == 45

    def test_tie_across_wrap(self):
        p = np.zeros(360)
        p[[359, 0, 1]] = 1.0
        assert decode_prediction(p) == 0

    def test_tie_tolerance(self):
        p = np.zeros(360)
        p[[10, 12]] = 1.0
        p[11] = 1.0 - 5e-10
        assert decode_prediction(p) == 11
        p[11] = 1.0 - 1e-6
        p[12] = 0.5
        assert decode_prediction(p) == 10

    @given(angles, intervals)
    def test_round_trip(self, G, I):
        assert decode_prediction(encode_labels(G, I)) == G


class TestAngleError:
    def test_examples(self):
        assert angle_error(10, 350) == 20
        assert angle_error(33, 33) == 0
        assert angle_error(0, 180) == 180

    @given(angles, angles)
    def test_symmetric_and_bounded(self, a, b):
        e = angle_error(a, b)
        assert e == angle_error(b, a)
        assert 0 <= e <= 180

    @given(angles, angles, angles)
    def test_triangle(self, a, b, c):
        assert angle_error(a, c) <= angle_error(a, b) + angle_error(b, c)

    @given(angles, angles, st.integers(0, 359))
    def test_offset_invariance(self, a, b, s):
        assert angle_error((a + s) % 360, (b + s) % 360) == angle_error(a, b)


class TestAccuracy:
    def test_all_exact(self):
        assert accuracy([(5, 5), (100, 100)], 2) == 1.0

    @pytest.mark.parametrize("I", [0, 1, 2, 5])
    def test_just_outside(self, I):
        assert accuracy([(10, 10 + I + 1)], I) == 0.0

    @pytest.mark.parametrize("I", [0, 1, 2, 7])
    def test_mixed(self, I):
        pairs = [(100, 100), (100, 100 + I), (100, 100 - I - 1), (0, 180)]
        assert accuracy(pairs, I) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy([], 2)
