"""Tensor engine tests: hand-computed values, loop oracles, gradient checks."""

import numpy as np
import pytest

from frameprop import autodiff as ad
from frameprop.autodiff import (
    ShapeError,
    Tensor,
    clamp,
    concat,
    conv2d,
    finite_difference_check,
    global_avg_pool,
    gradient_reversal,
    log_softmax,
    no_grad,
    relu,
    sigmoid,
    softmax,
    tensor,
    tmean,
    tsum,
    window_inner,
    window_valid_mask,
    window_weighted_sum,
)
from frameprop.reference import naive_conv2d


def rand(rng, *shape):
    return tensor(rng.standard_normal(shape), requires_grad=True)


class TestConv2d:
    def test_identity_kernel(self):
        x = tensor(np.ones((1, 1, 3, 3)))
        w = tensor(np.ones((1, 1, 1, 1)))
        b = tensor(np.zeros(1))
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_averaging_kernel(self):
        # mean of 1..9 is 5
        x = tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        w = tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert abs(out.item() - 5.0) < 1e-12

    def test_1x1_equals_channel_dot(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 1, 2, 4, 4)
        w = rand(rng, 3, 2, 1, 1)
        out = conv2d(x, w)
        for o in range(3):
            expect = (x.data[0] * w.data[o, :, :, :]).sum(axis=0)
            np.testing.assert_allclose(out.data[0, o], expect, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_loop(self, seed):
        rng = np.random.default_rng(seed)
        b, cin, h, w = rng.integers(1, 3), rng.integers(1, 5), 8, rng.integers(6, 17)
        cout = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2])) if (h - k) % 2 == 0 and (w - k) % 2 == 0 else 1
        pad = int(rng.choice([0, 1]))
        if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
            stride = 1
        x = rand(rng, int(b), int(cin), int(h), int(w))
        wt = rand(rng, cout, int(cin), k, k)
        bias = rand(rng, cout)
        fast = conv2d(x, wt, bias, stride=stride, padding=pad)
        ref = naive_conv2d(x.data, wt.data, bias.data, stride=stride, padding=pad)
        np.testing.assert_allclose(fast.data, ref, atol=1e-6)

    def test_shape_errors(self):
        x = tensor(np.zeros((1, 2, 4, 4)))
        w = tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(x, w)
        w2 = tensor(np.zeros((1, 2, 3, 3)))
        with pytest.raises(ShapeError, match="extent"):
            conv2d(x, w2, stride=2)  # (4 - 3) / 2 not integral

    def test_weight_grad_hand_case(self):
        # y = sum(conv(x, w)) with 1x1 kernel: dy/dw[o,c] = sum of x channel c
        rng = np.random.default_rng(3)
        x = tensor(rng.standard_normal((1, 2, 2, 2)))
        w = tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
        tsum(conv2d(x, w)).backward()
        np.testing.assert_allclose(w.grad[0, 0, 0, 0], x.data[0, 0].sum(), atol=1e-12)
        np.testing.assert_allclose(w.grad[0, 1, 0, 0], x.data[0, 1].sum(), atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_hand_values(self):
        out = softmax(tensor([0.0, np.log(2.0)]), axis=0)
        np.testing.assert_allclose(out.data, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)

    def test_masked_hand_values(self):
        x = tensor([5.0, -1.0, 7.0])
        mask = np.array([True, False, True])
        out = softmax(x, axis=0, mask=mask)
        s = 1.0 / (1.0 + np.exp(2.0))
        np.testing.assert_allclose(out.data, [s, 0.0, 1.0 - s], atol=1e-12)
        assert out.data[1] == 0.0

    def test_fully_masked_slice_errors(self):
        x = tensor(np.zeros((2, 2)))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="masked"):
            softmax(x, axis=1, mask=mask)

    @pytest.mark.parametrize("seed", range(4))
    def test_sums_to_one_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        x = tensor(rng.standard_normal((2, 7, 3)) * 10.0)
        out = softmax(x, axis=1)
        sums = out.data.sum(axis=1)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)
        assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)


class TestGlobalAvgPool:
    def test_constant_map(self):
        out = global_avg_pool(tensor(np.full((2, 3, 4, 5), 2.5)))
        np.testing.assert_allclose(out.data, np.full((2, 3, 1, 1), 2.5))

    def test_hand_mean(self):
        x = tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        assert global_avg_pool(x).item() == 4.0

    def test_gradient_is_uniform(self):
        x = tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 4)), requires_grad=True)
        tsum(global_avg_pool(x)).backward()
        np.testing.assert_allclose(x.grad, np.full_like(x.data, 1.0 / 12.0))

    def test_empty_spatial_errors(self):
        with pytest.raises(ShapeError):
            global_avg_pool(tensor(np.zeros((1, 2, 0, 3))))


class TestBackward:
    def test_identity(self):
        x = tensor([[3.0]], requires_grad=True)
        tsum(x).backward()
        np.testing.assert_allclose(x.grad, [[1.0]])

    def test_non_scalar_root_errors(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * 2.0).backward()

    def test_second_backward_errors(self):
        x = tensor([2.0], requires_grad=True)
        y = tsum(x * x)
        y.backward()
        with pytest.raises(RuntimeError, match="already ran"):
            y.backward()

    def test_grads_accumulate_across_graphs(self):
        x = tensor([2.0], requires_grad=True)
        tsum(x * 3.0).backward()
        tsum(x * 4.0).backward()
        np.testing.assert_allclose(x.grad, [7.0])
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph(self):
        # y = x*x + x*x reuses the same intermediate twice
        x = tensor([3.0], requires_grad=True)
        sq = x * x
        tsum(sq + sq).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_suppresses_tape(self):
        x = tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y._backward is None


class TestPointwise:
    def test_shape_mismatch_rejected(self):
        a = tensor(np.zeros((2, 3)))
        b = tensor(np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            a + b

    def test_channel_broadcast_mul(self):
        rng = np.random.default_rng(1)
        x = tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        g = tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
        out = x * g
        np.testing.assert_allclose(out.data, x.data * g.data)
        tsum(out).backward()
        np.testing.assert_allclose(g.grad, x.data.sum(axis=(2, 3), keepdims=True))

    def test_clamp_gradient_zero_outside(self):
        x = tensor([-2.0, 0.5, 2.0], requires_grad=True)
        tsum(clamp(x, 0.0, 1.0)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_gradient_reversal_forward_is_identity(self):
        x = tensor([1.5, -2.5])
        out = gradient_reversal(x, 1.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_gradient_reversal_backward(self):
        for lam in (0.0, 0.5, 1.0):
            x = tensor([1.0, 2.0], requires_grad=True)
            tsum(gradient_reversal(x, lam)).backward()
            np.testing.assert_array_equal(x.grad, np.full(2, -lam))

    def test_detach_blocks_grad(self):
        x = tensor([2.0], requires_grad=True)
        tsum(x.detach() * 3.0 + x).backward()
        np.testing.assert_allclose(x.grad, [1.0])


class TestWindowOps:
    def test_valid_mask_corner(self):
        mask = window_valid_mask(1, 6, 6, 5)
        # corner pixel sees only the 3x3 quadrant of offsets
        assert mask[0, :, 0, 0].sum() == 9
        assert mask[0, :, 3, 3].sum() == 25

    def test_window_inner_matches_loops(self):
        rng = np.random.default_rng(5)
        a = rand(rng, 2, 3, 5, 6)
        b = rand(rng, 2, 3, 5, 6)
        L = 3
        out = window_inner(a, b, L)
        r = L // 2
        for n in range(2):
            for idx, (di, dj) in enumerate(ad.window_offsets(L)):
                for i in range(5):
                    for j in range(6):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < 5 and 0 <= jj < 6:
                            expect = float(np.dot(a.data[n, :, i, j], b.data[n, :, ii, jj]))
                        else:
                            expect = 0.0
                        assert abs(out.data[n, idx, i, j] - expect) < 1e-10

    def test_window_weighted_sum_matches_loops(self):
        rng = np.random.default_rng(6)
        L = 3
        w = rand(rng, 1, L * L, 4, 4)
        v = rand(rng, 1, 2, 4, 4)
        out = window_weighted_sum(w, v, L)
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    expect = 0.0
                    for idx, (di, dj) in enumerate(ad.window_offsets(L)):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < 4 and 0 <= jj < 4:
                            expect += w.data[0, idx, i, j] * v.data[0, c, ii, jj]
                    assert abs(out.data[0, c, i, j] - expect) < 1e-10

    def test_even_window_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            ad.window_offsets(4)


class TestFiniteDifference:
    def test_linear_is_exact(self):
        rng = np.random.default_rng(0)
        x = rand(rng, 2, 3)
        assert finite_difference_check(lambda ls: tsum(ls[0]), [x]) < 1e-10

    def test_softmax_constant_sum(self):
        # sum(softmax) == 1 so both gradients vanish; eps at the top of the
        # allowed range keeps the cancellation noise under the error floor
        rng = np.random.default_rng(1)
        x = rand(rng, 5)
        f = lambda ls: tsum(softmax(ls[0], axis=0))
        err = finite_difference_check(f, [x], eps=1e-3)
        assert err < 1e-4
        assert np.max(np.abs(x.grad)) < 1e-12

    def test_eps_range_enforced(self):
        x = tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            finite_difference_check(lambda ls: tsum(ls[0]), [x], eps=1e-2)

    @pytest.mark.parametrize(
        "name",
        ["conv2d", "softmax_masked", "gap", "relu", "sigmoid", "window", "logsm", "mix"],
    )
    def test_each_op(self, name):
        # keep shapes small: <= 1x8x8x8 per the engine's documented regime
        rng = np.random.default_rng(sum(map(ord, name)))
        if name == "conv2d":
            x = rand(rng, 1, 3, 5, 5)
            w = rand(rng, 2, 3, 3, 3)
            b = rand(rng, 2)
            probe = tensor(rng.standard_normal((1, 2, 5, 5)))
            f = lambda ls: tmean(conv2d(ls[0], ls[1], ls[2], stride=1, padding=1) * probe)
            leaves = [x, w, b]
        elif name == "softmax_masked":
            x = rand(rng, 2, 6)
            mask = rng.random((2, 6)) > 0.3
            mask[:, 0] = True
            probe = tensor(rng.standard_normal((2, 6)))
            f = lambda ls: tsum(softmax(ls[0], axis=1, mask=mask) * probe)
            leaves = [x]
        elif name == "gap":
            x = rand(rng, 2, 3, 4, 4)
            f = lambda ls: tmean(sigmoid(global_avg_pool(ls[0])))
            leaves = [x]
        elif name == "relu":
            # keep samples away from the kink at 0
            data = rng.standard_normal((2, 8))
            data += np.sign(data) * 0.3
            x = tensor(data, requires_grad=True)
            probe = tensor(rng.standard_normal((2, 8)))
            f = lambda ls: tsum(relu(ls[0]) * probe)
            leaves = [x]
        elif name == "sigmoid":
            x = rand(rng, 3, 3)
            probe = tensor(rng.standard_normal((3, 3)))
            f = lambda ls: tsum(sigmoid(ls[0]) * probe)
            leaves = [x]
        elif name == "window":
            a = rand(rng, 1, 3, 4, 5)
            b = rand(rng, 1, 3, 4, 5)
            v = rand(rng, 1, 3, 4, 5)
            probe = tensor(rng.standard_normal((1, 3, 4, 5)))
            f = lambda ls: tsum(
                window_weighted_sum(
                    softmax(
                        window_inner(ls[0], ls[1], 3),
                        axis=1,
                        mask=window_valid_mask(1, 4, 5, 3),
                    ),
                    ls[2],
                    3,
                )
                * probe
            )
            leaves = [a, b, v]
        elif name == "logsm":
            x = rand(rng, 2, 4, 3, 3)
            probe = tensor(rng.standard_normal((2, 4, 3, 3)))
            f = lambda ls: tsum(log_softmax(ls[0], axis=1) * probe)
            leaves = [x]
        else:
            x = rand(rng, 1, 2, 5, 5)
            w = rand(rng, 2, 2, 3, 3)
            probe = tensor(rng.standard_normal((1, 2, 3, 3)))
            f = lambda ls: tsum(
                concat(
                    [global_avg_pool(sigmoid(conv2d(ls[0], ls[1], stride=2, padding=1)))] * 2,
                    axis=1,
                )
            ) + tsum(conv2d(ls[0], ls[1], stride=2, padding=1) * probe)
            leaves = [x, w]
        assert finite_difference_check(f, leaves) < 1e-4

    def test_finite_values_after_ops(self):
        rng = np.random.default_rng(9)
        x = tensor(rng.standard_normal((1, 4, 6, 6)) * 50.0)
        out = softmax(x, axis=1)
        assert np.all(np.isfinite(out.data))
        assert np.all(np.isfinite(sigmoid(x).data))
