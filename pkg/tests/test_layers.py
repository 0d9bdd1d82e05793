"""Normalization, upsampling, and dropout: oracles and gradient checks."""

import numpy as np
import pytest

from voxseg import layers as L
from voxseg import tensor as T
from voxseg.errors import DataError, ShapeError

from helpers import gradcheck, leaf


def upsample2x_reference(x):
    """Brute-force trilinear doubling: for every output voxel, interpolate at
    source coordinate (j + 0.5)/2 - 0.5 per axis with clamped corners."""
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, 2 * d, 2 * h, 2 * w), dtype=np.float64)

    def taps(j, size):
        src = (j + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size - 1)
        f = src - i0
        return i0, i1, f

    for z in range(2 * d):
        z0, z1, fz = taps(z, d)
        for y in range(2 * h):
            y0, y1, fy = taps(y, h)
            for xx in range(2 * w):
                x0, x1, fx = taps(xx, w)
                v = 0.0
                for iz, wz in ((z0, 1 - fz), (z1, fz)):
                    for iy, wy in ((y0, 1 - fy), (y1, fy)):
                        for ix, wx in ((x0, 1 - fx), (x1, fx)):
                            v = v + wz * wy * wx * x[:, :, iz, iy, ix]
                out[:, :, z, y, xx] = v
    return out


class TestGroupNorm:
    def setup_method(self):
        self.rng = np.random.default_rng(53)

    def test_normalizes_each_group(self):
        x = self.rng.normal(2.0, 3.0, size=(2, 8, 3, 3, 3))
        out = L.group_norm(
            T.tensor(x, dtype=np.float64), T.ones(8, np.float64), T.zeros(8, np.float64), num_groups=2, eps=1e-5
        ).data
        for n in range(2):
            for g in range(2):
                grp = out[n, 4 * g : 4 * (g + 1)]
                assert abs(grp.mean()) < 1e-12
                assert grp.var() == pytest.approx(1.0, abs=1e-4)  # eps shrinks it slightly

    def test_matches_manual_formula(self):
        x = self.rng.normal(size=(1, 4, 2, 2, 2))
        gamma = self.rng.normal(size=4)
        beta = self.rng.normal(size=4)
        eps = 1e-5
        out = L.group_norm(
            T.tensor(x, dtype=np.float64),
            T.tensor(gamma, dtype=np.float64),
            T.tensor(beta, dtype=np.float64),
            num_groups=2,
            eps=eps,
        ).data
        expected = np.empty_like(x)
        for g in range(2):
            grp = x[0, 2 * g : 2 * (g + 1)]
            mu = grp.mean()
            var = ((grp - mu) ** 2).mean()  # biased
            expected[0, 2 * g : 2 * (g + 1)] = (grp - mu) / np.sqrt(var + eps)
        expected = expected * gamma.reshape(1, 4, 1, 1, 1) + beta.reshape(1, 4, 1, 1, 1)
        assert np.allclose(out, expected, rtol=1e-12, atol=1e-14)

    def test_instance_norm_is_one_channel_groups(self):
        x = T.tensor(self.rng.normal(size=(2, 6, 3, 3, 3)), dtype=np.float64)
        g = T.tensor(self.rng.normal(size=6), dtype=np.float64)
        b = T.tensor(self.rng.normal(size=6), dtype=np.float64)
        a = L.instance_norm(x, g, b)
        c = L.group_norm(x, g, b, num_groups=6)
        assert np.array_equal(a.data, c.data)

    def test_rejects_bad_group_count(self):
        x = T.zeros((1, 6, 2, 2, 2))
        g, b = T.ones(6), T.zeros(6)
        with pytest.raises(ShapeError):
            L.group_norm(x, g, b, num_groups=4)
        with pytest.raises(ShapeError):
            L.group_norm(x, g, b, num_groups=0)

    def test_constant_input_normalizes_to_beta(self):
        x = T.tensor(np.full((1, 4, 2, 2, 2), 3.3), dtype=np.float64)
        out0 = L.group_norm(x, T.ones(4, np.float64), T.zeros(4, np.float64), num_groups=2).data
        assert np.allclose(out0, 0.0, atol=1e-10)  # constant normalizes to zero
        beta = T.tensor(np.full(4, 0.7), dtype=np.float64)
        out = L.group_norm(x, T.ones(4, np.float64), beta, num_groups=2).data
        assert np.allclose(out, 0.7, atol=1e-10)

    def test_gradcheck(self):
        x = leaf(self.rng, (2, 8, 3, 3, 3))
        gamma = T.tensor(self.rng.uniform(0.5, 1.5, 8), requires_grad=True, dtype=np.float64)
        beta = leaf(self.rng, (8,))
        mix = T.tensor(self.rng.normal(size=x.shape), dtype=np.float64)
        gradcheck(
            lambda: T.tsum(T.mul(L.group_norm(x, gamma, beta, num_groups=2), mix)),
            [x, gamma, beta],
            tol=1e-5,
            sample=50,
        )

    def test_gradcheck_instance(self):
        x = leaf(self.rng, (1, 3, 2, 2, 3))
        gamma = T.tensor(self.rng.uniform(0.5, 1.5, 3), requires_grad=True, dtype=np.float64)
        beta = leaf(self.rng, (3,))
        mix = T.tensor(self.rng.normal(size=x.shape), dtype=np.float64)
        gradcheck(
            lambda: T.tsum(T.mul(L.instance_norm(x, gamma, beta), mix)),
            [x, gamma, beta],
            tol=1e-5,
        )


class TestBatchNorm:
    def setup_method(self):
        self.rng = np.random.default_rng(59)

    def test_training_normalizes_and_tracks(self):
        x = self.rng.normal(1.0, 2.0, size=(4, 3, 2, 2, 2))
        state = L.BatchNormState.create(3, dtype=np.float64)
        out = L.batch_norm(
            T.tensor(x, dtype=np.float64), T.ones(3, np.float64), T.zeros(3, np.float64), state, training=True
        ).data
        assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-12)
        mu = x.mean(axis=(0, 2, 3, 4))
        var = ((x - mu.reshape(1, 3, 1, 1, 1)) ** 2).mean(axis=(0, 2, 3, 4))
        assert np.allclose(state.running_mean, 0.9 * 0.0 + 0.1 * mu, rtol=1e-12)
        assert np.allclose(state.running_var, 0.9 * 1.0 + 0.1 * var, rtol=1e-12)
        assert state.num_batches_tracked == 1

    def test_eval_uses_running_stats(self):
        state = L.BatchNormState(
            running_mean=np.array([1.0, -1.0]), running_var=np.array([4.0, 0.25]), num_batches_tracked=5
        )
        x = self.rng.normal(size=(2, 2, 2, 2, 2))
        eps = 1e-5
        out = L.batch_norm(
            T.tensor(x, dtype=np.float64), T.ones(2, np.float64), T.zeros(2, np.float64), state, training=False, eps=eps
        ).data
        expected = (x - state.running_mean.reshape(1, 2, 1, 1, 1)) / np.sqrt(
            state.running_var.reshape(1, 2, 1, 1, 1) + eps
        )
        assert np.allclose(out, expected, rtol=1e-12)
        assert state.num_batches_tracked == 5  # eval must not touch the buffers

    def test_eval_before_any_batch_raises(self):
        state = L.BatchNormState.create(2)
        with pytest.raises(DataError):
            L.batch_norm(T.zeros((1, 2, 2, 2, 2)), T.ones(2), T.zeros(2), state, training=False)

    def test_mirrored_pair_keeps_zero_mean(self):
        # A batch of x and -x has per-channel mean exactly 0, so the output
        # is input / sqrt(var + eps).
        a = self.rng.normal(size=(1, 3, 2, 2, 2))
        x = np.concatenate([a, -a], axis=0)
        state = L.BatchNormState.create(3, dtype=np.float64)
        eps = 1e-5
        out = L.batch_norm(
            T.tensor(x, dtype=np.float64), T.ones(3, np.float64), T.zeros(3, np.float64), state, training=True, eps=eps
        ).data
        var = (x**2).mean(axis=(0, 2, 3, 4))
        assert np.allclose(out, x / np.sqrt(var.reshape(1, 3, 1, 1, 1) + eps), rtol=1e-12)

    def test_eval_identity_with_unit_running_stats(self):
        state = L.BatchNormState(running_mean=np.zeros(2), running_var=np.ones(2), num_batches_tracked=1)
        x = self.rng.normal(size=(1, 2, 2, 2, 2))
        out = L.batch_norm(
            T.tensor(x, dtype=np.float64), T.ones(2, np.float64), T.zeros(2, np.float64), state, training=False
        ).data
        assert np.allclose(out, x, rtol=1e-4)  # identity up to eps

    def test_gradcheck_training(self):
        x = leaf(self.rng, (3, 2, 2, 2, 2))
        gamma = T.tensor(self.rng.uniform(0.5, 1.5, 2), requires_grad=True, dtype=np.float64)
        beta = leaf(self.rng, (2,))
        mix = T.tensor(self.rng.normal(size=x.shape), dtype=np.float64)

        def build():
            state = L.BatchNormState.create(2, dtype=np.float64)  # fresh: no buffer leakage
            return T.tsum(T.mul(L.batch_norm(x, gamma, beta, state, training=True), mix))

        gradcheck(build, [x, gamma, beta], tol=1e-5, sample=40)

    def test_gradcheck_eval(self):
        x = leaf(self.rng, (2, 2, 2, 2, 2))
        gamma = T.tensor(self.rng.uniform(0.5, 1.5, 2), requires_grad=True, dtype=np.float64)
        beta = leaf(self.rng, (2,))
        state = L.BatchNormState(
            running_mean=np.array([0.3, -0.2]), running_var=np.array([1.5, 0.7]), num_batches_tracked=1
        )
        mix = T.tensor(self.rng.normal(size=x.shape), dtype=np.float64)
        gradcheck(
            lambda: T.tsum(T.mul(L.batch_norm(x, gamma, beta, state, training=False), mix)),
            [x, gamma, beta],
            tol=1e-5,
        )


class TestUpsample:
    def setup_method(self):
        self.rng = np.random.default_rng(61)

    def test_ramp_1d_in_depth(self):
        x = np.zeros((1, 1, 2, 1, 1))
        x[0, 0, :, 0, 0] = [0.0, 1.0]
        out = L.upsample_trilinear2x(T.tensor(x, dtype=np.float64)).data
        assert np.array_equal(out[0, 0, :, 0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_matches_bruteforce_oracle(self):
        x = self.rng.normal(size=(2, 3, 3, 4, 2))
        out = L.upsample_trilinear2x(T.tensor(x, dtype=np.float64)).data
        expected = upsample2x_reference(x)
        assert np.allclose(out, expected, rtol=1e-12, atol=1e-13)

    def test_singleton_axis_repeats(self):
        x = self.rng.normal(size=(1, 2, 1, 3, 1))
        out = L.upsample_trilinear2x(T.tensor(x, dtype=np.float64)).data
        assert out.shape == (1, 2, 2, 6, 2)
        assert np.allclose(out, upsample2x_reference(x), rtol=1e-12)

    def test_constant_preserved_exactly(self):
        x = np.full((1, 1, 4, 4, 4), 0.7, dtype=np.float32)
        out = L.upsample_trilinear2x(T.tensor(x)).data
        assert np.all(out == np.float32(0.7))

    def test_adjoint_identity(self):
        # <U x, y> == <x, U^T y> verifies the backward is the exact transpose.
        x = leaf(self.rng, (1, 2, 3, 2, 4))
        y = self.rng.normal(size=(1, 2, 6, 4, 8))
        up = L.upsample_trilinear2x(x)
        T.tsum(T.mul(up, T.tensor(y, dtype=np.float64))).backward()
        lhs = float((up.data * y).sum())
        rhs = float((x.data * x.grad).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_gradcheck(self):
        x = leaf(self.rng, (1, 2, 2, 3, 2))
        mix = T.tensor(self.rng.normal(size=(1, 2, 4, 6, 4)), dtype=np.float64)
        gradcheck(lambda: T.tsum(T.mul(L.upsample_trilinear2x(x), mix)), [x], tol=1e-6)

    def test_rejects_non_5d(self):
        with pytest.raises(ShapeError):
            L.upsample_trilinear2x(T.zeros((2, 3, 4)))


class TestSpatialDropout:
    def setup_method(self):
        self.rng = np.random.default_rng(67)

    def test_eval_and_p0_are_identity(self):
        x = T.tensor(self.rng.normal(size=(2, 3, 2, 2, 2)))
        assert L.spatial_dropout(x, 0.5, np.random.default_rng(0), training=False) is x
        assert L.spatial_dropout(x, 0.0, np.random.default_rng(0), training=True) is x

    def test_whole_channels_dropped_and_rescaled(self):
        x = T.ones((4, 8, 2, 2, 2))
        out = L.spatial_dropout(x, 0.5, np.random.default_rng(3), training=True).data
        flat = out.reshape(4, 8, -1)
        for n in range(4):
            for c in range(8):
                vals = np.unique(flat[n, c])
                assert len(vals) == 1 and vals[0] in (0.0, 2.0)

    def test_same_stream_same_mask(self):
        x = T.tensor(self.rng.normal(size=(2, 16, 2, 2, 2)))
        a = L.spatial_dropout(x, 0.3, np.random.default_rng(9), training=True).data
        b = L.spatial_dropout(x, 0.3, np.random.default_rng(9), training=True).data
        assert np.array_equal(a, b)

    def test_drop_rate_roughly_p(self):
        x = T.ones((1, 4000, 1, 1, 1))
        out = L.spatial_dropout(x, 0.2, np.random.default_rng(13), training=True).data
        dropped = float((out == 0).mean())
        assert abs(dropped - 0.2) < 0.02

    def test_invalid_p_raises(self):
        with pytest.raises(ShapeError):
            L.spatial_dropout(T.zeros((1, 2, 1, 1, 1)), 1.0, np.random.default_rng(0), training=True)

    def test_gradcheck_with_fixed_mask(self):
        x = leaf(self.rng, (1, 4, 2, 2, 2))
        mix = T.tensor(self.rng.normal(size=x.shape), dtype=np.float64)

        def build():
            rng = np.random.default_rng(21)  # same mask every evaluation
            return T.tsum(T.mul(L.spatial_dropout(x, 0.4, rng, training=True), mix))

        gradcheck(build, [x])
