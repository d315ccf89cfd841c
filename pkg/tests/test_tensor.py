import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from satilt import ops
from satilt.gradcheck import check_gradients
from satilt.tensor import ShapeError, Tape, Tensor, backward

from conftest import loop_conv2d, tracked


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = [[3.0, 4.0], [5.0, 6.0]]
        np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_forced_arithmetic(self):
        assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward_rule(self, rng):
        a, b = tracked(rng.normal(size=(3, 4))), tracked(rng.normal(size=(4, 2)))
        dc = rng.normal(size=(3, 2))
        with Tape() as tape:
            loss = ops.sum(ops.mul(ops.matmul(a, b), Tensor(dc)))
        backward(loss, tape)
        np.testing.assert_allclose(a.grad, dc @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ dc, atol=1e-12)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(ops.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_equal_row(self):
        out = ops.softmax_rows(Tensor([[1000.0, 1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)

    def test_ln3(self):
        out = ops.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    @given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=60, deadline=None)
    def test_rows_are_distributions(self, m):
        out = ops.softmax_rows(Tensor(m)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestConv:
    def test_unit_1x1_is_identity(self, rng):
        x = rng.random((5, 5, 1))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, "same").data
        np.testing.assert_array_equal(out, x)

    def test_all_ones_valid(self):
        out = ops.conv2d(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))), 1, "valid").data
        np.testing.assert_array_equal(out, np.full((3, 3, 1), 9.0))

    @pytest.mark.parametrize("stride", [1, 2, 3])
    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_loop_oracle(self, rng, stride, padding, k):
        for H, W in [(8, 8), (7, 5), (6, 8)]:
            x = rng.normal(size=(H, W, 3))
            kern = rng.normal(size=(k, k, 3, 4))
            out = ops.conv2d(Tensor(x), Tensor(kern), stride, padding).data
            np.testing.assert_allclose(out, loop_conv2d(x, kern, stride, padding), rtol=0, atol=1e-12)

    def test_same_output_size(self):
        out = ops.conv2d(Tensor(np.ones((7, 9, 2))), Tensor(np.ones((3, 3, 2, 1))), 2, "same")
        assert out.shape == (4, 5, 1)

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(3, 6, 6, 2))
        kern = Tensor(rng.normal(size=(3, 3, 2, 5)))
        batched = ops.conv2d(Tensor(x), kern, 2, "same").data
        for b in range(3):
            np.testing.assert_allclose(batched[b], ops.conv2d(Tensor(x[b]), kern, 2, "same").data, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            ops.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((1, 1, 1, 1))), 0)
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), 1, "valid")

    def test_depthwise_constant(self):
        x = Tensor(np.ones((4, 4, 2)))
        out = ops.depthwise_conv2d(x, Tensor(np.array([[[2.0, 3.0]]])), 1, "same").data
        np.testing.assert_array_equal(out[..., 0], 2.0)
        np.testing.assert_array_equal(out[..., 1], 3.0)

    def test_depthwise_zero_kernel(self, rng):
        out = ops.depthwise_conv2d(Tensor(rng.normal(size=(5, 5, 3))), Tensor(np.zeros((3, 3, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("padding", ["same", "valid"])
    @pytest.mark.parametrize("k", [3, 5])
    def test_depthwise_is_block_diagonal_conv(self, rng, stride, padding, k):
        for H, W, C in [(8, 8, 4), (7, 6, 2), (5, 8, 3)]:
            x = rng.normal(size=(H, W, C))
            dk = rng.normal(size=(k, k, C))
            full = np.zeros((k, k, C, C))
            for c in range(C):
                full[:, :, c, c] = dk[:, :, c]
            dw = ops.depthwise_conv2d(Tensor(x), Tensor(dk), stride, padding).data
            np.testing.assert_allclose(dw, loop_conv2d(x, full, stride, padding), rtol=0, atol=1e-12)


class TestElementwise:
    def test_values(self):
        assert ops.sigmoid(Tensor(0.0)).data == 0.5
        np.testing.assert_array_equal(ops.hardswish(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
        assert ops.relu(Tensor(-1.0)).data == 0.0
        assert ops.elementwise("scale", Tensor(2.0), 3).data == 6.0

    def test_sigmoid_no_overflow(self):
        out = ops.sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(ValueError):
            ops.elementwise("tanh", Tensor(1.0))


class TestPool:
    def test_constant(self):
        np.testing.assert_array_equal(ops.global_avg_pool(Tensor(np.full((3, 4, 5), 7.0))).data, np.full(5, 7.0))

    def test_two_positions(self):
        x = np.array([[[2.0]], [[6.0]]])  # H=2, W=1, C=1
        np.testing.assert_array_equal(ops.global_avg_pool(Tensor(x)).data, [4.0])

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(4, 4, 3))
        expected = np.array([sum(x[h, w, c] for h in range(4) for w in range(4)) / 16 for c in range(3)])
        np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, expected, atol=1e-15)


class TestBackward:
    def test_sum(self):
        x = tracked([1.0, 2.0, 3.0])
        with Tape() as tape:
            loss = ops.sum(x)
        grads = backward(loss, tape)
        np.testing.assert_array_equal(grads[x], [1.0, 1.0, 1.0])

    def test_square(self):
        x = tracked([1.0, 2.0])
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_twice_accumulates(self):
        x = tracked(np.zeros(4))
        with Tape() as tape:
            loss = ops.add(ops.sum(x), ops.sum(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full(4, 2.0))

    def test_untracked_gets_nothing(self):
        x, c = tracked([1.0, 2.0]), Tensor([3.0, 4.0])
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, c))
        grads = backward(loss, tape)
        assert c.grad is None and c not in grads
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])

    def test_non_scalar_loss(self):
        x = tracked([1.0, 2.0])
        with Tape() as tape:
            y = ops.scale(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_tape_is_topological(self, rng):
        x = tracked(rng.normal(size=(3, 3)))
        with Tape() as tape:
            ops.sum(ops.softmax_rows(ops.matmul(x, x)))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i.tracked for i in node.inputs)
            seen.add(id(node.out))

    def test_no_tape_records_nothing(self):
        x = tracked([1.0])
        y = ops.scale(x, 2.0)
        assert not y.tracked

    def test_sweeps_overwrite(self):
        x = tracked([1.0, 2.0])
        for _ in range(2):
            with Tape() as tape:
                loss = ops.sum(x)
            backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


@given(hnp.array_shapes(min_dims=1, max_dims=4, max_side=5))
def test_reshape_round_trip(shape):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=shape))
    flat = ops.reshape(x, (-1,))
    back = ops.reshape(flat, shape)
    assert back.data.tobytes() == x.data.tobytes()


class TestGradients:
    def test_linear_is_exact(self, rng):
        c = Tensor(rng.normal(size=5))
        x = tracked(rng.normal(size=5))
        assert check_gradients(lambda t: ops.sum(ops.mul(t, c)), x) < 1e-8

    def test_sigmoid_composition(self, rng):
        x = tracked(rng.normal(size=6))
        f = lambda t: ops.sum(ops.sigmoid(ops.mul(ops.sigmoid(t), t)))
        assert check_gradients(f, x, eps=1e-5) < 1e-6

    def test_eps_range(self):
        with pytest.raises(ValueError):
            check_gradients(lambda t: ops.sum(t), tracked([1.0]), eps=1e-2)

    @pytest.mark.parametrize(
        "name, fn, shape",
        [
            ("relu", ops.relu, (4, 5)),
            ("sigmoid", ops.sigmoid, (4, 5)),
            ("hardswish", ops.hardswish, (4, 5)),
            ("softmax", ops.softmax_rows, (5, 5)),
            ("transpose", ops.transpose, (3, 4)),
            ("pool", ops.global_avg_pool, (2, 4, 4, 3)),
            ("mean", ops.mean, (3, 3)),
        ],
    )
    def test_unary_ops(self, rng, name, fn, shape):
        x = tracked(rng.normal(size=shape) * 2.0)
        w = Tensor(rng.normal(size=fn(x).shape))
        assert check_gradients(lambda t: ops.sum(ops.mul(fn(t), w)), x, eps=1e-6) <= 1e-5

    @pytest.mark.parametrize("op", [ops.add, ops.sub, ops.mul])
    def test_broadcast_binary(self, rng, op):
        a = tracked(rng.normal(size=(2, 3, 4)))
        b = tracked(rng.normal(size=(3, 1)))
        assert check_gradients(lambda xs: ops.sum(ops.sigmoid(op(*xs))), [a, b]) <= 1e-5

    def test_batched_matmul(self, rng):
        a = tracked(rng.normal(size=(2, 4, 3)))
        b = tracked(rng.normal(size=(3, 5)))
        assert check_gradients(lambda xs: ops.sum(ops.sigmoid(ops.matmul(*xs))), [a, b]) <= 1e-5

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_conv2d(self, rng, stride, k):
        x = tracked(rng.normal(size=(2, 7, 6, 3)))
        kern = tracked(rng.normal(size=(k, k, 3, 4)))
        f = lambda xs: ops.sum(ops.sigmoid(ops.conv2d(xs[0], xs[1], stride, "same")))
        assert check_gradients(f, [x, kern]) <= 1e-5

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_depthwise(self, rng, stride, padding):
        x = tracked(rng.normal(size=(2, 7, 8, 3)))
        kern = tracked(rng.normal(size=(3, 3, 3)))
        f = lambda xs: ops.sum(ops.sigmoid(ops.depthwise_conv2d(xs[0], xs[1], stride, padding)))
        assert check_gradients(f, [x, kern]) <= 1e-5

    def test_batch_norm(self, rng):
        x = tracked(rng.normal(size=(2, 3, 3, 4)) * 3 + 1)
        g = tracked(rng.normal(size=4))
        b = tracked(rng.normal(size=4))
        w = Tensor(rng.normal(size=(2, 3, 3, 4)))
        f = lambda xs: ops.sum(ops.mul(ops.batch_norm(*xs)[0], w))
        assert check_gradients(f, [x, g, b]) <= 1e-5

    def test_affine_norm(self, rng):
        x = tracked(rng.normal(size=(3, 4)))
        g, b = tracked(rng.normal(size=4)), tracked(rng.normal(size=4))
        mu, var = rng.normal(size=4), rng.random(4) + 0.5
        f = lambda xs: ops.sum(ops.sigmoid(ops.affine_norm(*xs, mu, var)))
        assert check_gradients(f, [x, g, b]) <= 1e-5

    def test_batch_norm_statistics(self, rng):
        x = rng.normal(size=(4, 2, 2, 3)) * 5 + 2
        y, mu, var = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(mu, x.reshape(-1, 3).mean(0))
        np.testing.assert_allclose(var, x.reshape(-1, 3).var(0))
        np.testing.assert_allclose(y.data.reshape(-1, 3).mean(0), 0, atol=1e-12)

    def test_bce(self, rng):
        p = tracked(rng.uniform(0.05, 0.95, size=(2, 7)))
        y = (rng.random((2, 7)) < 0.4).astype(float)
        assert check_gradients(lambda t: ops.bce(t, y), p) <= 1e-6

    def test_angle_loss(self, rng):
        pred = tracked(rng.uniform(-400, 800, size=8))
        target = rng.integers(0, 360, size=8).astype(float)
        assert check_gradients(lambda t: ops.angle_loss(t, target), pred, eps=1e-4) <= 1e-6


def test_finite_outputs_on_finite_inputs(rng):
    x = Tensor(rng.normal(size=(1, 6, 6, 4)) * 50)
    h = ops.depthwise_conv2d(x, Tensor(rng.normal(size=(3, 3, 4))))
    h = ops.hardswish(ops.batch_norm(h, Tensor(np.ones(4)), Tensor(np.zeros(4)))[0])
    s = ops.softmax_rows(ops.reshape(h, (1, 36, 4)) @ Tensor(rng.normal(size=(4, 36)) * 100))
    assert np.all(np.isfinite(s.data))
