import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinexnet import config as C
from retinexnet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, evaluate, main, read_manifest
from retinexnet.data import (
    YHistogram, load_pair_dataset, make_scene, read_png, save_pair_dataset,
    synthetic_pairs, write_png,
)
from retinexnet.model import DecomNetConfig, EnhanceNetConfig, init_weights, load_weights, save_weights
from retinexnet.pipeline import enhance_image, psnr, ssim
from retinexnet.training import read_log_csv

TINY = """\
decom_width = 4
enhance_width = 4
num_scales = 2
batch = 2
patch = 8
learning_rate = 0.01
decom_iterations = 3
enhance_iterations = 2
finetune_iterations = 2
checkpoint_every = 0
"""


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    save_pair_dataset(synthetic_pairs(4, 16, seed=0), root)
    return root


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    rng = np.random.default_rng(1)
    for i in range(3):
        write_png(root / f"s{i}.png", make_scene(24, 24, rng))
    return root


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "w.rtxw"
    save_weights(init_weights(DecomNetConfig(width=4), EnhanceNetConfig(width=4), seed=0), path)
    return path


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


class TestConfig:
    def test_defaults_serialize_paper_values(self):
        text = C.to_text(C.RunConfig())
        for line in ("batch = 16", "patch = 96", "lambda_ir = 0.001", "lambda_is = 0.1", "lambda_g = 10"):
            assert line in text.splitlines()

    def test_round_trip_fixed_point(self):
        cfg = C.desk_scale_config(seed=4, stop_weight_gradient=True)
        text = C.to_text(cfg)
        assert C.from_text(text) == cfg
        assert C.to_text(C.from_text(text)) == text

    @settings(max_examples=30)
    @given(st.integers(1, 64), st.floats(1e-6, 1.0), st.booleans())
    def test_round_trip_property(self, batch, lr, stop):
        cfg = C.RunConfig(batch=batch, learning_rate=lr, stop_weight_gradient=stop)
        assert C.from_text(C.to_text(cfg)) == cfg

    def test_comments_and_unknown_keys(self):
        cfg = C.from_text("# header\nbatch = 4  # small\n\n")
        assert cfg.batch == 4
        with pytest.raises(C.ConfigError, match="colour, sizee"):
            C.from_text("colour = red\nbatch = 2\nsizee = 3\n")

    def test_bad_values(self):
        with pytest.raises(C.ConfigError):
            C.from_text("batch = many\n")
        with pytest.raises(C.ConfigError):
            C.from_text("stop_weight_gradient = maybe\n")
        with pytest.raises(C.ConfigError):
            C.from_text("just words\n")


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["frobnicate"]) == EXIT_USAGE
        assert main(["train"]) == EXIT_USAGE
        assert main(["--help"]) == EXIT_OK

    def test_unknown_config_key(self, tmp_path, pair_dir, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("widht = 3\n")
        code = main(["train", "--data-dir", str(pair_dir), "--config", str(cfg), "--out", str(tmp_path / "w")])
        assert code == EXIT_USAGE
        assert "widht" in capsys.readouterr().err

    def test_missing_inputs(self, tmp_path, weights_file):
        assert main(["hist", "--input-dir", str(tmp_path / "none"), "--out", str(tmp_path / "h.csv")]) == EXIT_DATA
        assert main(["enhance", "--weights", str(tmp_path / "no.rtxw"), "--input", str(tmp_path),
                     "--out-dir", str(tmp_path / "o")]) == EXIT_DATA

    def test_corrupt_weights(self, tmp_path, scene_dir):
        bad = tmp_path / "bad.rtxw"
        bad.write_bytes(b"garbage")
        assert main(["decompose", "--weights", str(bad), "--input", str(scene_dir),
                     "--out-dir", str(tmp_path / "o")]) == EXIT_DATA

    def test_missing_prerequisite_weights(self, tmp_path, pair_dir, tiny_cfg):
        code = main(["train", "--data-dir", str(pair_dir), "--phase", "enhance", "--config", str(tiny_cfg),
                     "--out", str(tmp_path / "w.rtxw")])
        assert code == EXIT_DATA

    def test_divergence(self, tmp_path, pair_dir, tiny_cfg):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(TINY + "learning_rate = 1e30\ndecom_iterations = 20\n")
        code = main(["train", "--data-dir", str(pair_dir), "--phase", "decom", "--config", str(cfg),
                     "--out", str(tmp_path / "w.rtxw")])
        assert code == EXIT_NUMERIC


class TestSynthHist:
    def test_identity_params(self, tmp_path, scene_dir):
        out = tmp_path / "syn"
        assert main(["synth", "--input-dir", str(scene_dir), "--output-dir", str(out),
                     "--gamma", "1", "--beta", "1", "--sigma", "0"]) == EXIT_OK
        for f in sorted((out / "high").glob("*.png")):
            assert np.array_equal(read_png(f), read_png(out / "low" / f.name))
        m = read_manifest(out / "manifest.txt")
        assert m["fitted"] == "false" and float(m["gamma"]) == 1.0

    def test_invalid_params(self, tmp_path, scene_dir):
        assert main(["synth", "--input-dir", str(scene_dir), "--output-dir", str(tmp_path / "x"),
                     "--gamma", "0.5"]) == EXIT_USAGE

    def test_fit_round_trip(self, tmp_path, scene_dir):
        dark = tmp_path / "dark"
        main(["synth", "--input-dir", str(scene_dir), "--output-dir", str(dark),
              "--gamma", "2", "--beta", "0.3", "--sigma", "0"])
        hist = tmp_path / "dark.csv"
        assert main(["hist", "--input-dir", str(dark / "low"), "--out", str(hist)]) == EXIT_OK
        refit = tmp_path / "refit"
        assert main(["synth", "--input-dir", str(scene_dir), "--output-dir", str(refit),
                     "--target-hist", str(hist), "--sigma", "0"]) == EXIT_OK
        m = read_manifest(refit / "manifest.txt")
        assert (float(m["gamma"]), float(m["beta"])) == (2.0, 0.3)
        assert m["fitted"] == "true" and float(m["histogram_distance"]) >= 0

    def test_hist_csv(self, tmp_path, scene_dir):
        out = tmp_path / "h.csv"
        main(["hist", "--input-dir", str(scene_dir), "--out", str(out)])
        lines = out.read_text().splitlines()
        assert lines[0] == "bin_center,count,log10_count"
        assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(16, 241))
        assert YHistogram.from_csv(out).total == 3 * 24 * 24

    def test_dark_histogram_lower(self, tmp_path, scene_dir):
        dark = tmp_path / "d"
        main(["synth", "--input-dir", str(scene_dir), "--output-dir", str(dark)])
        main(["hist", "--input-dir", str(dark / "low"), "--out", str(tmp_path / "a.csv")])
        main(["hist", "--input-dir", str(scene_dir), "--out", str(tmp_path / "b.csv")])
        assert YHistogram.from_csv(tmp_path / "a.csv").mean() < YHistogram.from_csv(tmp_path / "b.csv").mean()


class TestInference:
    def test_decompose_outputs(self, tmp_path, scene_dir, weights_file):
        out = tmp_path / "dec"
        assert main(["decompose", "--weights", str(weights_file), "--input", str(scene_dir),
                     "--out-dir", str(out)]) == EXIT_OK
        files = sorted(p.name for p in out.glob("*.png"))
        assert len(files) == 2 * 3
        I = read_png(out / "s0_I.png")
        assert np.array_equal(I[..., 0], I[..., 1]) and np.array_equal(I[..., 0], I[..., 2])

    def test_single_file_input(self, tmp_path, scene_dir, weights_file):
        out = tmp_path / "one"
        main(["decompose", "--weights", str(weights_file), "--input", str(scene_dir / "s1.png"),
              "--out-dir", str(out)])
        assert sorted(p.name for p in out.glob("*.png")) == ["s1_I.png", "s1_R.png"]

    def test_enhance_denoise_off_matches_pipeline(self, tmp_path, scene_dir, weights_file):
        out = tmp_path / "enh"
        assert main(["enhance", "--weights", str(weights_file), "--input", str(scene_dir),
                     "--out-dir", str(out), "--denoise", "off", "--save-intermediates"]) == EXIT_OK
        w = load_weights(weights_file)
        for i in range(3):
            expected = enhance_image(read_png(scene_dir / f"s{i}.png"), w).S_hat
            got = read_png(out / f"s{i}_enhanced.png")
            assert np.array_equal(got, np.floor(expected * 255 + 0.5) / 255)
            for suffix in ("R", "I", "I_hat"):
                assert (out / f"s{i}_{suffix}.png").exists()

    def test_eval_report(self, tmp_path, pair_dir, weights_file):
        report = tmp_path / "r.csv"
        assert main(["eval", "--weights", str(weights_file), "--data-dir", str(pair_dir),
                     "--report", str(report)]) == EXIT_OK
        lines = report.read_text().splitlines()
        assert lines[0] == "id,psnr_in,psnr_out,ssim_in,ssim_out"
        assert len(lines) == 1 + 4 + 1 and lines[-1].startswith("mean,")

    def test_eval_bypass_is_reconstruction_only(self, pair_dir, weights_file):
        ds, w = load_pair_dataset(pair_dir), load_weights(weights_file)
        rows = evaluate(ds, w, bypass_adjustment=True)
        for p, r in zip(ds.pairs, rows):
            recon = enhance_image(p.low, w, bypass_adjustment=True).S_hat
            assert r["psnr_out"] == psnr(recon, p.normal)
            assert r["ssim_out"] == ssim(recon, p.normal)

    def test_eval_without_pairs(self, tmp_path, weights_file):
        assert main(["eval", "--weights", str(weights_file), "--data-dir", str(tmp_path),
                     "--report", str(tmp_path / "r.csv")]) == EXIT_DATA


class TestTrain:
    def _train(self, tmp_path, pair_dir, cfg, name, *extra):
        out = tmp_path / name / "w.rtxw"
        code = main(["train", "--data-dir", str(pair_dir), "--config", str(cfg), "--out", str(out), *extra])
        return code, out

    def test_full_schedule_outputs(self, tmp_path, pair_dir, tiny_cfg):
        code, out = self._train(tmp_path, pair_dir, tiny_cfg, "a")
        assert code == EXIT_OK and out.exists()
        for phase, n in (("decom", 3), ("enhance", 2), ("finetune", 2)):
            rows = read_log_csv(out.with_suffix(f".{phase}.log.csv"))
            assert [r["iteration"] for r in rows] == list(range(n))
        assert C.load_config(out.with_suffix(".config.txt")).decom_width == 4
        assert (out.parent / "w.rtxw.ckpt" / "state.rtxs").exists()

    def test_identical_seeds_identical_logs(self, tmp_path, pair_dir, tiny_cfg):
        _, a = self._train(tmp_path, pair_dir, tiny_cfg, "a")
        _, b = self._train(tmp_path, pair_dir, tiny_cfg, "b")
        for phase in ("decom", "enhance", "finetune"):
            suffix = f".{phase}.log.csv"
            assert a.with_suffix(suffix).read_bytes() == b.with_suffix(suffix).read_bytes()
        assert a.read_bytes() == b.read_bytes()

    def test_resume_finished_run(self, tmp_path, pair_dir, tiny_cfg, capsys):
        _, out = self._train(tmp_path, pair_dir, tiny_cfg, "a")
        before = out.read_bytes()
        code, _ = self._train(tmp_path, pair_dir, tiny_cfg, "a", "--resume", str(out.parent / "w.rtxw.ckpt"))
        assert code == EXIT_OK
        assert "already finished" in capsys.readouterr().out
        assert out.read_bytes() == before

    def test_phase_by_phase_matches_all(self, tmp_path, pair_dir, tiny_cfg):
        _, full = self._train(tmp_path, pair_dir, tiny_cfg, "all")
        _, d = self._train(tmp_path, pair_dir, tiny_cfg, "d", "--phase", "decom")
        _, e = self._train(tmp_path, pair_dir, tiny_cfg, "e", "--phase", "enhance", "--init", str(d))
        _, f = self._train(tmp_path, pair_dir, tiny_cfg, "f", "--phase", "finetune", "--init", str(e))
        assert f.read_bytes() == full.read_bytes()

    def test_seed_flag_changes_run(self, tmp_path, pair_dir, tiny_cfg):
        _, a = self._train(tmp_path, pair_dir, tiny_cfg, "a", "--phase", "decom")
        _, b = self._train(tmp_path, pair_dir, tiny_cfg, "b", "--phase", "decom", "--seed", "5")
        assert a.with_suffix(".decom.log.csv").read_bytes() != b.with_suffix(".decom.log.csv").read_bytes()
