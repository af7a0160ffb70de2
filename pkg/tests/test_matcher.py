import numpy as np
import pytest

from semidense.datagen import Scene, SceneConfig, rasterize, render_pair
from semidense.errors import ConfigError, FormatError
from semidense.imageio import DisparityMap, GrayImage
from semidense import matcher
from semidense.matcher import MatchConfig


def _window_pair(a, b):
    """Place 2x2 windows a and b into 2x2 images; radius-1 windows at (0,0)
    clamp to the same four values with multiplicities."""
    return GrayImage(np.asarray(a, float).reshape(2, 2)), GrayImage(np.asarray(b, float).reshape(2, 2))


def _shift_pair(shift, seed=4, size=64, noise=0.0):
    cfg = SceneConfig(seed=seed, width=size, height=size, d_min=1, d_max=20, n_planes=0, n_boxes=0, n_bumps=0,
                      background=float(shift), noise_sigma=noise, gain_range=(1, 1), bias_range=(0, 0))
    gt = rasterize(Scene(background=float(shift)), cfg)
    return render_pair(gt, cfg)


class TestZNCC:
    def test_identical(self):
        l, r = _window_pair([1, 2, 3, 4], [1, 2, 3, 4])
        assert matcher.zncc(l, r, (0, 0), 0, radius=1) == pytest.approx(1.0, abs=1e-9)

    def test_affine_invariant(self):
        l, r = _window_pair([1, 2, 3, 4], [7, 9, 11, 13])
        assert matcher.zncc(l, r, (0, 0), 0, radius=1) == pytest.approx(1.0, abs=1e-9)

    def test_negation(self):
        l, r = _window_pair([1, 2, 3, 4], [4, 3, 2, 1])
        assert matcher.zncc(l, r, (0, 0), 0, radius=1) == pytest.approx(-1.0, abs=1e-9)

    def test_constant_windows(self):
        l, r = _window_pair([2, 2, 2, 2], [5, 5, 5, 5])
        assert matcher.zncc(l, r, (0, 0), 0, radius=1) == 0.0

    def test_direct_window_formula(self, rng):
        l, r = rng.random((9, 12)), rng.random((9, 12))
        lw = l[2:9, 3:10].ravel()
        rw = r[2:9, 1:8].ravel()
        a, b = lw - lw.mean(), rw - rw.mean()
        expect = a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-9)
        assert matcher.zncc(l, r, (5, 6), 2, radius=3) == pytest.approx(expect, abs=1e-12)


def brute_volume(l, r, d_max, radius):
    h, w = l.shape
    return np.array([[[matcher.zncc(l, r, (y, x), d, radius) for x in range(w)] for y in range(h)] for d in range(d_max + 1)])


class TestTruncateVolume:
    def test_chi_upper_boundary(self):
        l = np.random.default_rng(0).random((5, 8))
        vol = matcher.truncate_volume(l, l, DisparityMap(np.full((5, 8), 4.0), np.ones((5, 8), bool)), K=2, radius=1, d_max=5)
        assert vol.chi[:, 2, 6].tolist() == [1, 1, 1, 1, 0]

    def test_chi_lower_boundary(self):
        l = np.random.default_rng(0).random((5, 8))
        vol = matcher.truncate_volume(l, l, DisparityMap(np.zeros((5, 8)), np.ones((5, 8), bool)), K=2, radius=1, d_max=5)
        assert vol.chi[:, 2, 6].tolist() == [0, 0, 1, 1, 1]

    def test_matches_brute_force_volume(self, rng):
        l, r = rng.random((32, 32)), rng.random((32, 32))
        d_max, K = 9, 3
        raw = rng.integers(0, d_max + 1, (32, 32)).astype(float)
        valid = rng.random((32, 32)) < 0.9
        vol = matcher.truncate_volume(l, r, DisparityMap(raw, valid), K, radius=2, d_max=d_max)
        full = brute_volume(l, r, d_max, 2)
        for i, k in enumerate(range(-K, K + 1)):
            cand = raw.astype(int) + k
            support = valid & (cand >= 0) & (cand <= d_max)
            np.testing.assert_array_equal(vol.chi[i], support)
            expect = np.where(support, np.take_along_axis(full, np.clip(cand, 0, d_max)[None], 0)[0], 0.0)
            np.testing.assert_array_equal(vol.slices[i], expect)

    def test_full_volume_matches_scalar(self, rng):
        l, r = rng.random((10, 12)), rng.random((10, 12))
        np.testing.assert_array_equal(matcher.full_volume(l, r, 4, radius=1), brute_volume(l, r, 4, 1))

    def test_zero_fill_and_range(self, rng):
        l, r = rng.random((16, 20)), rng.random((16, 20))
        raw = DisparityMap(rng.integers(0, 6, (16, 20)).astype(float), rng.random((16, 20)) < 0.8)
        vol = matcher.truncate_volume(l, r, raw, 3, radius=1, d_max=6)
        np.testing.assert_array_equal(vol.chi * vol.slices, vol.slices)
        sup = vol.slices[vol.chi == 1]
        assert np.all((sup >= -1 - 1e-12) & (sup <= 1 + 1e-12))
        assert np.all(vol.chi[:, ~raw.valid] == 0)

    def test_non_integer_raw_rejected(self):
        l = np.zeros((4, 4))
        with pytest.raises(ConfigError):
            matcher.truncate_volume(l, l, DisparityMap(np.full((4, 4), 1.5), np.ones((4, 4), bool)), 1)

    def test_file_round_trip(self, tmp_path, rng):
        vol = matcher.TruncatedCostVolume(2, rng.uniform(-1, 1, (5, 3, 4)).astype(np.float32).astype(float), (rng.random((5, 3, 4)) < 0.5).astype(float))
        matcher.write_volume(vol, tmp_path / "v.sdcv")
        raw = (tmp_path / "v.sdcv").read_bytes()
        assert raw[:8] == b"SDCV0001"
        assert np.frombuffer(raw[8:20], "<u4").tolist() == [2, 3, 4]
        back = matcher.read_volume(tmp_path / "v.sdcv")
        np.testing.assert_array_equal(back.slices, vol.slices)
        np.testing.assert_array_equal(back.chi, vol.chi)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTAVOL0" + bytes(12))
        with pytest.raises(FormatError):
            matcher.read_volume(tmp_path / "x")


class TestHierarchical:
    def test_pure_shift(self):
        pair = _shift_pair(6)
        d = matcher.match_hierarchical(pair.left, pair.right, MatchConfig(d_max=20, levels=2))
        assert d.valid.mean() > 0.5
        assert np.median(d.disparity[d.valid]) == 6.0

    def test_textureless_all_invalid(self):
        img = GrayImage(np.full((32, 40), 0.4))
        d = matcher.match_hierarchical(img, img, MatchConfig(d_max=10, levels=2))
        assert not d.valid.any()

    def test_box_scene_two_plateaus(self):
        cfg = SceneConfig(seed=2, width=128, height=96, d_min=10, d_max=48, n_planes=0, n_boxes=0, n_bumps=0,
                          noise_sigma=0.005, gain_range=(1, 1), bias_range=(0, 0))
        scene = Scene(background=20.0, boxes=[(60, 30, 110, 80, 40.0)])
        gt = rasterize(scene, cfg)
        pair = render_pair(gt, cfg)
        d = matcher.match_hierarchical(pair.left, pair.right, MatchConfig(d_max=48))
        # coarse-level windows span 28 px, so score regions well inside each plateau
        box = d.disparity[44:67, 74:97][d.valid[44:67, 74:97]]
        bg = np.concatenate([d.disparity[r, 24:120][d.valid[r, 24:120]] for r in (slice(0, 14), slice(82, 96))])
        assert box.size > 400 and bg.size > 2000
        assert np.mean(box == 40.0) > 0.97
        assert np.mean(bg == 20.0) > 0.97

    def test_unequal_sizes(self):
        with pytest.raises(ConfigError):
            matcher.match_hierarchical(GrayImage(np.zeros((4, 4))), GrayImage(np.zeros((4, 5))))

    def test_final_argmax_property(self):
        cfg = SceneConfig(seed=11, width=96, height=64, d_min=4, d_max=30)
        from semidense.datagen import gen_disparity
        pair = render_pair(gen_disparity(cfg), cfg)
        mc = MatchConfig(d_max=30, levels=2)
        d, info = matcher.match_hierarchical(pair.left, pair.right, mc, details=True)
        K = 2 * mc.half_range
        vol = matcher.truncate_volume(pair.left, pair.right, d, K, mc.radius, mc.d_max)
        centre = vol.slices[K]
        for i, k in enumerate(range(-K, K + 1)):
            searched = np.abs(d.disparity + k - info["search_center"]) <= mc.half_range
            ok = d.valid & (vol.chi[i] == 1) & searched
            assert np.all(centre[ok] >= vol.slices[i][ok])
        np.testing.assert_array_equal(centre[d.valid], info["score"][d.valid])

    @pytest.mark.parametrize("gain,bias", [(0.5, -0.1), (2.0, 0.2)])
    def test_gain_bias_invariance(self, gain, bias):
        cfg = SceneConfig(seed=5, width=96, height=64, d_min=4, d_max=30)
        from semidense.datagen import gen_disparity
        pair = render_pair(gen_disparity(cfg), cfg)
        mc = MatchConfig(d_max=30)
        a = matcher.match_hierarchical(pair.left, pair.right, mc)
        b = matcher.match_hierarchical(pair.left, GrayImage(gain * pair.right.data + bias), mc)
        both = a.valid & b.valid
        assert both.mean() > 0.5
        np.testing.assert_array_equal(a.disparity[both], b.disparity[both])
