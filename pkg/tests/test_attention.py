"""Local attention: normalization, oracle equivalence, propagation properties."""

import numpy as np
import pytest

from frameprop.attention import AttentionConfig, AttentionWeights, LocalAttention
from frameprop.autodiff import (
    ShapeError,
    finite_difference_check,
    no_grad,
    tensor,
    tsum,
    window_valid_mask,
)


def make_module(channels=4, window=5, seed=0):
    return LocalAttention(AttentionConfig(window=window, channels=channels),
                          rng=np.random.default_rng(seed))


def rand_feats(rng, b, c, h, w, requires_grad=False):
    return tensor(rng.standard_normal((b, c, h, w)), requires_grad=requires_grad)


class TestComputeWeights:
    def test_constant_maps_give_uniform_interior_weights(self):
        mod = make_module(channels=3, window=5)
        f = tensor(np.full((1, 3, 7, 7), 0.4))
        weights = mod.compute_weights(f, f)
        # interior pixel: all 25 offsets valid and logits equal
        np.testing.assert_allclose(weights.values.data[0, :, 3, 3], np.full(25, 1 / 25), atol=1e-12)

    def test_corner_pixel_valid_count(self):
        mod = make_module(channels=2, window=5)
        rng = np.random.default_rng(1)
        f = rand_feats(rng, 1, 2, 8, 8)
        g = rand_feats(rng, 1, 2, 8, 8)
        weights = mod.compute_weights(f, g)
        corner = weights.values.data[0, :, 0, 0]
        mask = weights.valid_mask[0, :, 0, 0]
        assert mask.sum() == 9
        assert abs(corner[mask].sum() - 1.0) < 1e-6
        assert np.all(corner[~mask] == 0.0)
        assert (corner[~mask] == 0).sum() == 16

    @pytest.mark.parametrize("seed", range(6))
    def test_normalization_random(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 9))
        w = int(rng.integers(3, 9))
        L = int(rng.choice([1, 3, 5]))
        if L > 2 * min(h, w) - 1:
            L = 1
        mod = make_module(channels=c, window=L, seed=seed)
        f = rand_feats(rng, 2, c, h, w)
        g = rand_feats(rng, 2, c, h, w)
        weights = mod.compute_weights(f, g)
        sums = np.sum(weights.values.data, axis=1)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)
        assert np.all(weights.values.data >= 0)
        assert np.all(weights.values.data <= 1)
        assert np.all(weights.values.data[~weights.valid_mask] == 0)

    def test_shift_is_recovered_as_argmax(self):
        # equal-norm embedding vectors make the self inner product the
        # strict winner, so a cyclic shift of the source moves the argmax
        # to the shift offset at interior pixels away from the wrap seam
        rng = np.random.default_rng(42)
        c, h, w = 6, 10, 10
        mod = make_module(channels=c, window=5, seed=3)
        mod.weight.data[:] = 0.0
        for ch in range(c):
            mod.weight.data[ch, ch, 1, 1] = 1.0  # identity embedding
        mod.bias.data[:] = 0.0
        base = rng.standard_normal((1, c, h, w))
        base /= np.linalg.norm(base, axis=1, keepdims=True)  # unit pixel vectors
        query = tensor(base)
        source = tensor(np.roll(base, shift=1, axis=2))
        weights = mod.compute_weights(query, source)
        for i in range(3, h - 3):
            for j in range(3, w - 3):
                idx = int(np.argmax(weights.values.data[0, :, i, j]))
                di, dj = divmod(idx, 5)
                assert (di - 2, dj - 2) == (1, 0)

    def test_shape_mismatch_errors(self):
        mod = make_module(channels=2)
        a = tensor(np.zeros((1, 2, 6, 6)))
        b = tensor(np.zeros((1, 2, 6, 5)))
        with pytest.raises(ShapeError):
            mod.compute_weights(a, b)

    def test_degenerate_window_errors(self):
        mod = make_module(channels=2, window=7)
        f = tensor(np.zeros((1, 2, 3, 3)))  # 7 > 2*3-1
        with pytest.raises(ShapeError, match="degenerate"):
            mod.compute_weights(f, f)


class TestPropagate:
    def test_one_hot_center_is_identity(self):
        rng = np.random.default_rng(0)
        L = 3
        b, c, h, w = 1, 2, 5, 5
        src = rand_feats(rng, b, c, h, w)
        vals = np.zeros((b, L * L, h, w))
        vals[:, (L * L) // 2] = 1.0  # offset (0,0)
        weights = AttentionWeights(tensor(vals), window_valid_mask(b, h, w, L), L)
        out = LocalAttention.propagate(src, weights)
        np.testing.assert_array_equal(out.data, src.data)

    def test_uniform_weights_constant_input(self):
        L = 3
        b, c, h, w = 1, 1, 4, 4
        mask = window_valid_mask(b, h, w, L)
        vals = mask.astype(float)
        vals /= vals.sum(axis=1, keepdims=True)
        weights = AttentionWeights(tensor(vals), mask, L)
        src = tensor(np.full((b, c, h, w), 3.25))
        out = LocalAttention.propagate(src, weights)
        np.testing.assert_allclose(out.data, src.data, atol=1e-12)

    def test_random_weights_match_nested_loops(self):
        rng = np.random.default_rng(11)
        L = 3
        b, c, h, w = 1, 3, 5, 5
        mask = window_valid_mask(b, h, w, L)
        raw = rng.random((b, L * L, h, w)) * mask
        raw /= raw.sum(axis=1, keepdims=True)
        weights = AttentionWeights(tensor(raw), mask, L)
        src = rand_feats(rng, b, c, h, w)
        out = LocalAttention.propagate(src, weights)
        r = L // 2
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for di in range(-r, r + 1):
                        for dj in range(-r, r + 1):
                            ii, jj = i + di, j + dj
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += raw[0, (di + r) * L + dj + r, i, j] * src.data[0, ch, ii, jj]
                    assert abs(out.data[0, ch, i, j] - acc) < 1e-6


class TestForwardAndOracle:
    def test_matches_reference_small(self):
        rng = np.random.default_rng(2)
        mod = make_module(channels=4, window=5, seed=2)
        src = rand_feats(rng, 1, 4, 6, 6)
        qry = rand_feats(rng, 1, 4, 6, 6)
        fast = mod.forward(src, qry)
        ref = mod.reference(src, qry)
        np.testing.assert_allclose(fast.data, ref, atol=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_reference_randomized(self, seed):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 9))
        h = int(rng.integers(4, 11))
        w = int(rng.integers(4, 11))
        L = int(rng.choice([1, 3, 5, 7]))
        if L > 2 * min(h, w) - 1:
            L = 3
        mod = make_module(channels=c, window=L, seed=seed + 100)
        src = rand_feats(rng, b, c, h, w)
        qry = rand_feats(rng, b, c, h, w)
        fast = mod.forward(src, qry)
        ref = mod.reference(src, qry)
        assert np.max(np.abs(fast.data - ref)) < 1e-6

    def test_window_one_is_identity(self):
        rng = np.random.default_rng(5)
        mod = make_module(channels=3, window=1, seed=5)
        src = rand_feats(rng, 1, 3, 4, 4)
        qry = rand_feats(rng, 1, 3, 4, 4)
        out = mod.reference(src, qry)
        np.testing.assert_allclose(out, src.data, atol=1e-12)
        fast = mod.forward(src, qry)
        np.testing.assert_allclose(fast.data, src.data, atol=1e-12)

    def test_scaled_inputs_converge_to_source(self):
        # query == source with equal-norm embeddings: the (0,0) offset wins
        # and grows one-hot as the logit scale increases, so the propagated
        # map converges to the source itself
        rng = np.random.default_rng(8)
        c = 8
        mod = make_module(channels=c, window=3, seed=8)
        mod.weight.data[:] = 0.0
        for ch in range(c):
            mod.weight.data[ch, ch, 1, 1] = 1.0
        mod.bias.data[:] = 0.0
        base = rng.standard_normal((1, c, 6, 6))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        prev_gap = None
        for scale in (1.0, 4.0, 16.0, 32.0):
            f = tensor(base * scale)
            out = mod.forward(f, f)
            gap = np.max(np.abs(out.data - f.data)) / scale
            if prev_gap is not None:
                assert gap <= prev_gap + 1e-12
            prev_gap = gap
        assert prev_gap < 1e-3

    def test_convexity_bounds(self):
        rng = np.random.default_rng(9)
        mod = make_module(channels=2, window=3, seed=9)
        src = rand_feats(rng, 1, 2, 6, 6)
        qry = rand_feats(rng, 1, 2, 6, 6)
        out = mod.forward(src, qry).data
        r = 1
        for ch in range(2):
            for i in range(6):
                for j in range(6):
                    lo = min(
                        src.data[0, ch, ii, jj]
                        for ii in range(max(0, i - r), min(6, i + r + 1))
                        for jj in range(max(0, j - r), min(6, j + r + 1))
                    )
                    hi = max(
                        src.data[0, ch, ii, jj]
                        for ii in range(max(0, i - r), min(6, i + r + 1))
                        for jj in range(max(0, j - r), min(6, j + r + 1))
                    )
                    assert lo - 1e-9 <= out[0, ch, i, j] <= hi + 1e-9

    def test_channel_permutation_consistency(self):
        rng = np.random.default_rng(10)
        c = 4
        mod = make_module(channels=c, window=3, seed=10)
        src = rand_feats(rng, 1, c, 5, 5)
        qry = rand_feats(rng, 1, c, 5, 5)
        out = mod.forward(src, qry).data
        perm = rng.permutation(c)
        mod2 = make_module(channels=c, window=3, seed=10)
        mod2.weight.data[:] = mod.weight.data[perm][:, perm]
        mod2.bias.data[:] = mod.bias.data[perm]
        src_p = tensor(src.data[:, perm])
        qry_p = tensor(qry.data[:, perm])
        out_p = mod2.forward(src_p, qry_p).data
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-9)

    def test_gradcheck_full_attention(self):
        rng = np.random.default_rng(12)
        mod = make_module(channels=4, window=3, seed=12)
        src = rand_feats(rng, 1, 4, 6, 6, requires_grad=True)
        qry = rand_feats(rng, 1, 4, 6, 6, requires_grad=True)
        probe = tensor(rng.standard_normal((1, 4, 6, 6)))

        def f(leaves):
            s, q, wt, bs = leaves
            mod.weight, mod.bias = wt, bs
            return tsum(mod.forward(s, q) * probe)

        err = finite_difference_check(f, [src, qry, mod.weight, mod.bias])
        assert err < 1e-4


class TestGlobalAttention:
    def test_equivalent_to_full_window(self):
        rng = np.random.default_rng(13)
        c, h = 3, 5
        L = 2 * h - 1
        mod = make_module(channels=c, window=L, seed=13)
        src = rand_feats(rng, 1, c, h, h)
        qry = rand_feats(rng, 1, c, h, h)
        local = mod.forward(src, qry)
        dense = mod.global_attention(src, qry)
        np.testing.assert_allclose(local.data, dense.data, atol=1e-6)

    def test_constant_inputs_uniform(self):
        # zero conv weights make the embedding spatially constant (the bias),
        # so every logit in a row ties and the weights come out uniform
        mod = make_module(channels=2, window=3, seed=14)
        mod.weight.data[:] = 0.0
        f = tensor(np.full((1, 2, 4, 4), 1.5))
        rows = mod.global_weights(f, f)
        np.testing.assert_allclose(rows.data, np.full((1, 16, 16), 1 / 16), atol=1e-9)
        out = mod.global_attention(f, f)
        np.testing.assert_allclose(out.data, f.data, atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(15)
        mod = make_module(channels=3, window=3, seed=15)
        f = rand_feats(rng, 2, 3, 4, 5)
        g = rand_feats(rng, 2, 3, 4, 5)
        rows = mod.global_weights(f, g)
        sums = rows.data.sum(axis=2)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)

    def test_refuses_large_maps(self):
        mod = make_module(channels=1, window=3, seed=16)
        f = tensor(np.zeros((1, 1, 65, 65)))
        with pytest.raises(ShapeError, match="refused"):
            mod.global_attention(f, f)
