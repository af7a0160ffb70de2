import csv
import subprocess
import sys

import numpy as np
import pytest

from semidense import cli
from semidense.datagen import Scene, SceneConfig, rasterize, render_pair
from semidense.imageio import DisparityMap, read_pfm, read_png_gray, write_pfm, write_png_gray
from semidense.matcher import read_volume
from semidense.refiner import RefinerConfig, identity_params, save_checkpoint

TRAIN_CFG = "train.epochs = 2\ntrain.steps_per_epoch = 2\ntrain.batch_size = 2\ntrain.patch_size = 32\nmatch.levels = 2\n"


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "d", "--n", 2, "--seed", 1, "--width", 64, "--height", 48, "--dmin", 2, "--dmax", 14) == 0
    (root / "cfg.txt").write_text(TRAIN_CFG)
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data / "full" / "model.ckpt"
    assert run("train", "--data", data / "d" / "manifest.txt", "--out", out, "--config", data / "cfg.txt", "--seed", 3) == 0
    return out


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


class TestConfig:
    def test_overlay_flags_win(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\ntrain.seed = 5\ntrain.epochs = 7  # trailing\n")
        args = cli.build_parser().parse_args(["train", "--data", "m", "--out", "o", "--config", str(tmp_path / "c.txt"), "--seed", "9"])
        settings = cli.overlay(args, {"seed": "train.seed", "epochs": "train.epochs"})
        assert settings == {"train.seed": 9, "train.epochs": "7"}

    def test_unknown_section_rejected(self, tmp_path):
        (tmp_path / "c.txt").write_text("optimizer.lr = 1\n")
        with pytest.raises(cli.ConfigError):
            cli.read_config(tmp_path / "c.txt")

    def test_unknown_key_rejected(self):
        from semidense.trainer import TrainConfig

        with pytest.raises(cli.ConfigError, match="train.momentum"):
            cli.build(TrainConfig, {"train.momentum": "0.9"}, "train")

    def test_typed_values(self):
        from semidense.refiner import Architecture

        arch = cli.build(Architecture, {"arch.pool_factors": "2, 4", "arch.K": "2"}, "arch")
        assert arch.pool_factors == (2, 4) and arch.K == 2
        with pytest.raises(cli.ConfigError):
            cli.build(Architecture, {"arch.K": "two"}, "arch")

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            run("theory-check", "--bogus")
        assert exc.value.code == 2


class TestGenData:
    def test_empty_manifest(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--n", 0) == 0
        assert (tmp_path / "manifest.txt").read_text() == ""

    def test_bad_range_names_invariant(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path, "--n", 1, "--dmin", 50, "--dmax", 40) == 2
        assert "d_min < d_max" in capsys.readouterr().err

    def test_seeded_trees_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / name, "--n", 2, "--seed", 4, "--width", 48, "--height", 32, "--dmin", 2, "--dmax", 10) == 0
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


class TestMatch:
    @pytest.fixture
    def pair(self, tmp_path):
        cfg = SceneConfig(seed=4, width=64, height=64, d_min=1, d_max=20, n_planes=0, n_boxes=0, n_bumps=0,
                          background=6.0, noise_sigma=0.0, gain_range=(1, 1), bias_range=(0, 0))
        p = render_pair(rasterize(Scene(background=6.0), cfg), cfg)
        write_png_gray(p.left, tmp_path / "l.png")
        write_png_gray(p.right, tmp_path / "r.png")
        return tmp_path

    def test_shifted_pair(self, pair):
        assert run("match", "--left", pair / "l.png", "--right", pair / "r.png", "--dmax", 20, "--out", pair / "d.pfm", "--cv-out", pair / "v.sdcv") == 0
        d = read_pfm(pair / "d.pfm")
        assert np.median(d.disparity[d.valid]) == 6.0
        assert read_volume(pair / "v.sdcv").K == 3

    def test_k_zero(self, pair):
        assert run("match", "--left", pair / "l.png", "--right", pair / "r.png", "--dmax", 20, "--out", pair / "d.pfm", "--cv-out", pair / "v.sdcv", "--k", 0) == 0
        vol = read_volume(pair / "v.sdcv")
        d = read_pfm(pair / "d.pfm")
        assert vol.slices.shape == (1, 64, 64)
        np.testing.assert_array_equal(vol.chi[0] > 0, d.valid)

    def test_missing_file(self, pair):
        assert run("match", "--left", pair / "nope.png", "--right", pair / "r.png", "--out", pair / "d.pfm") == 1


class TestTrain:
    def test_writes_checkpoint_and_log(self, trained):
        assert trained.exists() and (trained.parent / "log.csv").exists()

    def test_rerun_is_byte_identical(self, data, trained):
        out = data / "again" / "model.ckpt"
        assert run("train", "--data", data / "d" / "manifest.txt", "--out", out, "--config", data / "cfg.txt", "--seed", 3) == 0
        assert out.read_bytes() == trained.read_bytes()
        assert (out.parent / "log.csv").read_bytes() == (trained.parent / "log.csv").read_bytes()

    def test_ablation_log(self, data):
        out = data / "base" / "model.ckpt"
        assert run("train", "--data", data / "d" / "manifest.txt", "--out", out, "--config", data / "cfg.txt", "--ablation") == 0
        rows = list(csv.DictReader(open(out.parent / "log.csv")))
        assert len(rows) == 2 and all(r["mean_p_out"] == "" for r in rows)

    def test_ablation_keeps_shared_settings(self):
        s = cli._stochastic({"stochastic.sigma_in": "0.3", "stochastic.kl_scale": "0.5"}, ablation=True)
        assert (s.sigma_in, s.sigma_out, s.reward_weight, s.kl_scale) == (1.0, 1.0, 0.0, 0.5)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_exits_3(self, data, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TRAIN_CFG + "train.learning_rate = 1e300\n")
        code = run("train", "--data", data / "d" / "manifest.txt", "--out", tmp_path / "m.ckpt", "--config", cfg)
        assert code == 3
        assert "non-finite" in capsys.readouterr().err

    def test_bad_patch_size(self, data, tmp_path):
        assert run("train", "--data", data / "d" / "manifest.txt", "--out", tmp_path / "m.ckpt", "--patch-size", 8) == 2


class TestInfer:
    def test_deterministic_outputs(self, data, trained, tmp_path):
        d = data / "d"
        for name in ("a", "b"):
            assert run("infer", "--ckpt", trained, "--left", d / "left_0000.png", "--right", d / "right_0000.png",
                       "--out", tmp_path / f"{name}.pfm", "--pout-out", tmp_path / f"{name}.png", "--mc", 2) == 0
        for suffix in (".pfm", ".png", "_std.pfm"):
            assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
        p = read_png_gray(tmp_path / "a.png").data
        assert p.shape == (48, 64) and np.all((p >= 0) & (p <= 1))

    def test_mc_needs_two(self, data, trained, tmp_path):
        d = data / "d"
        assert run("infer", "--ckpt", trained, "--left", d / "left_0000.png", "--right", d / "right_0000.png",
                   "--out", tmp_path / "x.pfm", "--mc", 1) == 2

    def test_corrupt_checkpoint(self, data, trained, tmp_path):
        raw = bytearray(trained.read_bytes())
        raw[100] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        d = data / "d"
        assert run("infer", "--ckpt", tmp_path / "bad.ckpt", "--left", d / "left_0000.png", "--right", d / "right_0000.png",
                   "--out", tmp_path / "x.pfm") == 1


class TestEval:
    def test_identity_checkpoint(self, data, tmp_path):
        save_checkpoint(identity_params(config=RefinerConfig(d_max=14.0)), tmp_path / "id.ckpt")
        assert run("eval", "--ckpt", tmp_path / "id.ckpt", "--data", data / "d" / "manifest.txt", "--out", tmp_path / "ev", "--mc", 0) == 0
        rows = {r["id"]: r for r in csv.DictReader(open(tmp_path / "ev" / "report.csv"))}
        agg = rows["aggregate"]
        assert float(agg["mae_validated"]) == pytest.approx(float(agg["raw_mae_validated"]), abs=1e-12)
        assert float(agg["inlier_fraction"]) == 1.0
        assert (tmp_path / "ev" / "curve_p_out_te0.2.csv").read_text().startswith("rho_d,f_pi\n")

    def test_trained_outputs(self, data, trained, tmp_path):
        assert run("eval", "--ckpt", trained, "--data", data / "d" / "manifest.txt", "--out", tmp_path, "--mc", 2, "--plots") == 0
        names = {p.name for p in tmp_path.iterdir()}
        assert {"report.csv", "sparsification.csv", "sparsification.svg", "inliers.svg", "curve_total_te1.csv"} <= names


class TestSparsify:
    def test_constant_score(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        gt = rng.uniform(5, 20, (200, 250))
        pred = gt + np.where(rng.random(gt.shape) < 0.3, 2.0, 0.05)
        write_pfm(DisparityMap(pred, np.ones(gt.shape, bool)), tmp_path / "p.pfm")
        write_pfm(DisparityMap(gt, np.ones(gt.shape, bool)), tmp_path / "g.pfm")
        write_pfm(np.ones(gt.shape), tmp_path / "s.pfm")
        assert run("sparsify", "--pred", tmp_path / "p.pfm", "--gt", tmp_path / "g.pfm", "--score", tmp_path / "s.pfm", "--out", tmp_path / "c.csv") == 0
        fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
        assert abs(float(fields["rir"])) < 0.02
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 101


class TestTheoryCheck:
    def test_default_sweep_passes(self, capsys):
        assert run("theory-check") == 0
        assert "counterexamples: 0" in capsys.readouterr().out

    def test_violation_exits_nonzero(self, monkeypatch):
        from semidense import evaluation

        monkeypatch.setattr(evaluation, "theory_sweep", lambda n, seed: [evaluation.worked_example()])
        assert run("theory-check", "--n", 1) == 3


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "semidense.cli", "infer", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "--pout-out" in out.stdout and "65535" in out.stdout
