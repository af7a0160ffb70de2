import math
import zlib

import numpy as np
import pytest
from scipy import integrate, stats

from semidense import autodiff as ad
from semidense.errors import ConfigError

from gradcases import CASES
from gradcheck import check_gradients


def T(a, **kw):
    return ad.Tensor(np.asarray(a, dtype=float), **kw)


class TestConv2d:
    def test_affine_1x1(self):
        out = ad.conv2d(T([[[3.0]]]), T([[[[2.0]]]]), T([1.0]))
        assert out.data.tolist() == [[[7.0]]]

    def test_horizontal_average_of_constant(self):
        out = ad.conv2d(T(np.full((1, 5, 9), 5.0)), T(np.full((1, 1, 1, 5), 0.2)), T([0.0]))
        assert out.data[0, 2, 4] == pytest.approx(5.0, abs=1e-12)

    def test_pointwise_matches_matvec(self, rng):
        x = rng.standard_normal((3, 4, 4))
        w = rng.standard_normal((2, 3, 1, 1))
        out = ad.conv2d(T(x), T(w)).data
        for i in range(4):
            for j in range(4):
                expect = [sum(w[o, c, 0, 0] * x[c, i, j] for c in range(3)) for o in range(2)]
                np.testing.assert_allclose(out[:, i, j], expect, rtol=1e-13)

    def test_3x3_matches_direct_sum(self, rng):
        x = rng.standard_normal((2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ad.conv2d(T(x), T(w)).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    expect = np.sum(w[o] * xp[:, i:i + 3, j:j + 3])
                    assert out[o, i, j] == pytest.approx(expect, rel=1e-12, abs=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            ad.conv2d(T(np.zeros((2, 3, 3))), T(np.zeros((1, 3, 1, 1))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ad.conv2d(T(np.zeros((1, 3, 3))), T(np.zeros((1, 1, 2, 2))))


class TestPoolUpsample:
    x = [[[1.0, 2.0], [3.0, 4.0]]]

    @pytest.mark.parametrize("kind,expect", [("max", 4.0), ("min", 1.0), ("avg", 2.5)])
    def test_2x2(self, kind, expect):
        assert ad.pool(T(self.x), kind, 2).data.tolist() == [[[expect]]]

    def test_edge_replication(self):
        # 3 wide -> padded to 4 by repeating the last column
        out = ad.pool(T([[[1.0, 2.0, 9.0]]]), "avg", 2).data
        np.testing.assert_array_equal(out, [[[1.5, 9.0]]])
        out = ad.pool(T([[[5.0, 2.0, 9.0]]]), "min", 2).data
        np.testing.assert_array_equal(out, [[[2.0, 9.0]]])

    def test_output_shape_is_ceil(self):
        assert ad.pool(T(np.zeros((3, 7, 10))), "max", 4).shape == (3, 2, 3)

    def test_zero_factor(self):
        with pytest.raises(ConfigError):
            ad.pool(T(self.x), "max", 0)

    def test_upsample_block(self):
        assert ad.upsample_nearest(T([[[7.0]]]), 2, 2, 2).data.tolist() == [[[7.0, 7.0], [7.0, 7.0]]]

    def test_upsample_crop(self):
        out = ad.upsample_nearest(T([[[1.0, 2.0]]]), 2, 2, 3).data
        assert out.tolist() == [[[1.0, 1.0, 2.0], [1.0, 1.0, 2.0]]]

    def test_upsample_bad_target(self):
        with pytest.raises(ConfigError):
            ad.upsample_nearest(T([[[1.0, 2.0]]]), 2, 2, 5)

    def test_pad_edge(self):
        out = ad.pad_edge(T([[[1.0, 2.0], [3.0, 4.0]]]), 1, 2).data[0]
        np.testing.assert_array_equal(out, np.pad([[1.0, 2.0], [3.0, 4.0]], ((1, 1), (2, 2)), mode="edge"))

    def test_constant_round_trip(self):
        x = T(np.full((2, 6, 6), 3.25))
        back = ad.upsample_nearest(ad.pool(x, "avg", 2), 2, 6, 6)
        np.testing.assert_array_equal(back.data, x.data)

    def test_block_means_preserved(self, rng):
        x = rng.standard_normal((2, 8, 12))
        back = ad.upsample_nearest(ad.pool(T(x), "avg", 4), 4, 8, 12).data
        bm = lambda a: a.reshape(2, 2, 4, 3, 4).mean(axis=(2, 4))
        np.testing.assert_allclose(bm(back), bm(x), rtol=0, atol=1e-14)


class TestActivations:
    @pytest.mark.parametrize("x,slope,expect", [(2.0, 0.3, 2.0), (-1.0, 0.3, -0.3), (-1.0, 0.1, -0.1)])
    def test_leaky_relu(self, x, slope, expect):
        assert ad.leaky_relu(T([x]), slope).data[0] == pytest.approx(expect, abs=1e-15)

    @pytest.mark.parametrize("x,expect", [(0.0, 0.0), (2.0, 2.02), (-2.0, -0.02), (0.5, 0.38)])
    def test_leaky_hardswish(self, x, expect):
        assert ad.leaky_hardswish(T([x]), 0.01).data[0] == pytest.approx(expect, abs=1e-15)

    def test_leaky_hardswish_gradient_at_half(self):
        x = T([0.5], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_all(ad.leaky_hardswish(x, 0.01))
        (g,) = ad.backward(tape, y, [x])
        assert g[0] == pytest.approx(1.01, abs=1e-15)

    def test_leaky_hardswish_derivative_nonzero(self):
        x = T(np.linspace(-5, 5, 1001), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_all(ad.leaky_hardswish(x, 0.01))
        (g,) = ad.backward(tape, y, [x])
        assert np.all(np.abs(g) > 0) or np.sum(g == 0) <= 1

    def test_sigmoid_values(self):
        out = ad.sigmoid(T([0.0, 100.0, -math.log(3.0), -800.0, 800.0])).data
        assert out[0] == 0.5
        assert out[1] == pytest.approx(1.0, abs=1e-12)
        assert out[2] == pytest.approx(0.25, abs=1e-15)
        assert np.all(np.isfinite(out))


class TestDropout:
    def test_zero_probability_identity(self, rng):
        x = T(rng.standard_normal((2, 3, 3)))
        np.testing.assert_array_equal(ad.dropout(x, 0.0, rng, "train").data, x.data)

    def test_mean_mode_identity(self, rng):
        x = T(rng.standard_normal((2, 3, 3)))
        assert ad.dropout(x, 0.5, rng, "mean").data is x.data

    def test_probability_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            ad.dropout(T([1.0]), 1.0, rng)

    def test_unbiased_over_seeds(self):
        x = np.linspace(0.5, 2.0, 12).reshape(1, 3, 4)
        acc = np.zeros_like(x)
        n = 10_000
        for seed in range(n):
            acc += ad.dropout(T(x), 0.5, np.random.default_rng(seed), "train").data
        # per-element std of the estimate is 1%; allow 4 sigma
        assert np.max(np.abs(acc / n - x) / x) < 0.04

    def test_mean_of_all_elements_within_two_percent(self):
        x = np.full((1, 50, 50), 1.5)
        means = [ad.dropout(T(x), 0.5, np.random.default_rng(s), "train").data.mean() for s in range(10_000)]
        assert abs(np.mean(means) / 1.5 - 1) < 0.02


class TestVariational:
    def _vw(self, rng, o=2, c=3):
        mu = T(rng.standard_normal((o, c, 1, 1)))
        rho = T(rng.uniform(-2, 0, (o, c, 1, 1)))
        return ad.VariationalWeights(mu, rho), ad.VariationalWeights(T(rng.standard_normal(o)), T(rng.uniform(-2, 0, o)))

    def test_mean_mode_is_conv_with_mu(self, rng):
        x = T(rng.standard_normal((3, 4, 4)))
        vw, bw = self._vw(rng)
        out = ad.variational_conv1x1(x, vw, bw, None, "mean").data
        np.testing.assert_array_equal(out, ad.conv2d(x, vw.mu, bw.mu).data)

    def test_zero_noise_equals_mean(self, rng):
        class ZeroRng:
            def standard_normal(self, shape):
                return np.zeros(shape)

        x = T(rng.standard_normal((3, 4, 4)))
        vw, bw = self._vw(rng)
        a = ad.variational_conv1x1(x, vw, bw, ZeroRng(), "sample").data
        b = ad.variational_conv1x1(x, vw, bw, None, "mean").data
        np.testing.assert_array_equal(a, b)

    def test_output_variance_single_weight(self):
        # y = w * x with w ~ N(mu, s^2): Var[y] = s^2 x^2
        x = T([[[0.5, -2.0]]])
        vw = ad.VariationalWeights(T([[[[1.3]]]]), T([[[[-0.4]]]]))
        s = np.log1p(np.exp(-0.4))
        rng = np.random.default_rng(5)
        samples = np.array([ad.variational_conv1x1(x, vw, None, rng, "sample").data[0, 0] for _ in range(10_000)])
        np.testing.assert_allclose(samples.var(axis=0), s**2 * np.array([0.25, 4.0]), rtol=0.05)

    def test_softplus_std_positive(self):
        vw = ad.VariationalWeights(T(np.zeros(5)), T([-40.0, -5.0, 0.0, 5.0, 40.0]))
        assert np.all(vw.std > 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            ad.VariationalWeights(T(np.zeros(3)), T(np.zeros(4)))


class TestKL:
    def _kl(self, mu, s, prior):
        rho = np.log(np.expm1(np.asarray(s, dtype=float)))
        return ad.kl_gaussian(ad.VariationalWeights(T(mu), T(rho)), prior).item()

    def test_identical_is_zero(self):
        assert self._kl([0.0], [1.0], 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_unit_shift(self):
        assert self._kl([1.0], [1.0], 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_matches_quadrature(self, rng):
        mu = rng.standard_normal(10)
        s = rng.uniform(0.2, 1.5, 10)
        prior = 0.8
        total = 0.0
        for m, sd in zip(mu, s):
            q = stats.norm(m, sd)
            p = stats.norm(0.0, prior)
            integrand = lambda t: q.pdf(t) * (q.logpdf(t) - p.logpdf(t))
            val, _ = integrate.quad(integrand, m - 15 * sd, m + 15 * sd, epsabs=1e-13, epsrel=1e-12, limit=200)
            total += val
        assert self._kl(mu, s, prior) == pytest.approx(total, abs=1e-6)


class TestBackward:
    def test_linear(self, rng):
        x = rng.standard_normal((1, 3, 3))
        w = T(rng.standard_normal((1, 3, 3)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(w, x))
        (g,) = ad.backward(tape, loss, [w])
        np.testing.assert_array_equal(g, x)

    def test_non_scalar_loss(self):
        w = T(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.square(w)
        with pytest.raises(ConfigError):
            ad.backward(tape, y, [w])

    def test_unreachable_gets_zero(self):
        w = T(np.ones(3), requires_grad=True)
        unused = T(np.ones((2, 2)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.square(w))
        gw, gu = ad.backward(tape, loss, [w, unused])
        np.testing.assert_array_equal(gu, np.zeros((2, 2)))
        np.testing.assert_array_equal(gw, 2 * np.ones(3))

    def test_tape_is_topological(self, rng):
        w = T(rng.standard_normal((2, 1, 1, 1)), requires_grad=True)
        with ad.Tape() as tape:
            h = ad.leaky_relu(ad.conv2d(T(rng.standard_normal((1, 3, 3))), w), 0.3)
            ad.sum_all(ad.mul(h, h))
        seen = set()
        for node in tape.nodes:
            for p in node.parents:
                assert p.requires_grad is False or p.backward_fn is None or id(p) in seen
            seen.add(id(node))

    def test_shared_input_accumulates(self):
        w = T([3.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(w, w))
        (g,) = ad.backward(tape, loss, [w])
        assert g[0] == 6.0

    def test_seeded_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(3)
            x = T(np.linspace(-1, 1, 18).reshape(2, 3, 3))
            vw = ad.VariationalWeights(T(np.full((2, 2, 1, 1), 0.3), requires_grad=True), T(np.full((2, 2, 1, 1), -1.0), requires_grad=True))
            with ad.Tape() as tape:
                y = ad.dropout(ad.variational_conv1x1(x, vw, None, rng, "sample"), 0.3, rng)
                loss = ad.sum_all(ad.square(y))
            return loss.item(), ad.backward(tape, loss, [vw.mu, vw.rho])

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    make, build = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_gradients(build, make(rng), rng) for _ in range(10))
    assert worst < 1e-3
