import numpy as np
import pytest

from uwsplat import cli, fileio
from uwsplat.cli import SYNTH_DEFAULTS, TRAIN_DEFAULTS, UsageError, main, resolve_config


class TestConfigResolution:
    def test_defaults_pass_through(self):
        cfg = resolve_config(SYNTH_DEFAULTS, None, {k: None for k in SYNTH_DEFAULTS})
        assert cfg == SYNTH_DEFAULTS

    def test_file_overrides_defaults(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text('seed = 7\nwater_class = "turbid"\n')
        cfg = resolve_config(SYNTH_DEFAULTS, f, {k: None for k in SYNTH_DEFAULTS})
        assert cfg["seed"] == 7
        assert cfg["water_class"] == "turbid"
        assert cfg["width"] == SYNTH_DEFAULTS["width"]

    def test_flag_overrides_file(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("seed = 7\n")
        flags = {k: None for k in SYNTH_DEFAULTS}
        flags["seed"] = 9
        cfg = resolve_config(SYNTH_DEFAULTS, f, flags)
        assert cfg["seed"] == 9

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("learning_rate = 0.1\n")
        with pytest.raises(UsageError):
            resolve_config(TRAIN_DEFAULTS, f, {k: None for k in TRAIN_DEFAULTS})

    def test_wrong_type_rejected(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text('iterations = "many"\n')
        with pytest.raises(UsageError):
            resolve_config(TRAIN_DEFAULTS, f, {k: None for k in TRAIN_DEFAULTS})

    def test_out_of_range_rejected(self):
        flags = {k: None for k in TRAIN_DEFAULTS}
        flags["enable_fraction"] = 1.5
        with pytest.raises(UsageError):
            resolve_config(TRAIN_DEFAULTS, None, flags)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(UsageError):
            resolve_config(SYNTH_DEFAULTS, tmp_path / "nope.toml",
                           {k: None for k in SYNTH_DEFAULTS})

    def test_invalid_toml_rejected(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("seed = = 1\n")
        with pytest.raises(UsageError):
            resolve_config(SYNTH_DEFAULTS, f, {k: None for k in SYNTH_DEFAULTS})

    def test_int_promotes_to_float(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("d_far = 15\n")
        cfg = resolve_config(SYNTH_DEFAULTS, f, {k: None for k in SYNTH_DEFAULTS})
        assert cfg["d_far"] == 15.0 and isinstance(cfg["d_far"], float)


SYNTH_ARGS = ["synth", "--n-gaussians", "16", "--width", "24", "--height", "24",
              "--n-views", "2"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(SYNTH_ARGS + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--bundle", str(synth_dir), "--out", str(out),
               "--iterations", "6", "--enable-fraction", "0.5",
               "--eval-interval", "3"])
    assert rc == 0
    return out


class TestSynthCommand:
    def test_writes_bundle_and_resolved(self, synth_dir):
        assert (synth_dir / "degraded" / "0000.png").exists()
        assert (synth_dir / "truth.json").exists()
        text = (synth_dir / "resolved.toml").read_text()
        assert "n_gaussians = 16" in text
        assert 'water_class = "clear"' in text

    def test_bad_flag_value_exits_2(self, tmp_path):
        rc = main(["synth", "--out", str(tmp_path / "x"), "--n-gaussians", "0"])
        assert rc == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        f = tmp_path / "c.toml"
        f.write_text("bogus = 1\n")
        rc = main(["synth", "--out", str(tmp_path / "x"), "--config", str(f)])
        assert rc == 2


class TestTrainCommand:
    def test_outputs_present(self, trained_dir):
        assert (trained_dir / "checkpoint.dpgs").exists()
        assert (trained_dir / "train_log.csv").exists()
        assert (trained_dir / "train_log.png").exists()
        assert (trained_dir / "resolved.toml").exists()

    def test_log_header_and_rows(self, trained_dir):
        lines = (trained_dir / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "iter,basic,ab,wat,edge,ms,total,psnr"
        assert len(lines) == 4  # header plus logs at iterations 0, 3, and 5
        assert lines[1].startswith("0,")

    def test_checkpoint_contains_all_model_slots(self, trained_dir):
        params, header = fileio.load_checkpoint(trained_dir / "checkpoint.dpgs")
        names = params.names()
        assert "gauss.means" in names
        assert "atten.theta_beta" in names
        assert "scat.b_inf_raw" in names
        assert "cls.w1" in names
        assert header["iteration"] == 6
        assert header["config"]["iterations"] == 6

    def test_missing_bundle_exits_2(self, tmp_path):
        rc = main(["train", "--bundle", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out"), "--iterations", "2"])
        assert rc == 2


class TestRenderRestoreEval:
    def test_render_writes_maps(self, trained_dir, synth_dir, tmp_path):
        out = tmp_path / "render"
        rc = main(["render", "--checkpoint", str(trained_dir / "checkpoint.dpgs"),
                   "--bundle", str(synth_dir), "--view", "0", "--out", str(out),
                   "--dump-fields"])
        assert rc == 0
        for name in ("i_hat.png", "j_hat.png", "depth.pfm", "a_map.pfm",
                     "b_map.pfm", "b_s.pfm", "conf.pfm", "feats.pfm"):
            assert (out / name).exists()
        depth = fileio.load_pfm(out / "depth.pfm")
        assert depth.shape == (24, 24)

    def test_render_bad_view_exits_2(self, trained_dir, synth_dir, tmp_path):
        rc = main(["render", "--checkpoint", str(trained_dir / "checkpoint.dpgs"),
                   "--bundle", str(synth_dir), "--view", "99",
                   "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_restore_roundtrip(self, trained_dir, synth_dir, tmp_path):
        out = tmp_path / "restore"
        rc = main(["restore", "--image", str(synth_dir / "degraded" / "0000.png"),
                   "--depth", str(synth_dir / "depth" / "0000.pfm"),
                   "--checkpoint", str(trained_dir / "checkpoint.dpgs"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "restored.png").exists()
        valid = fileio.load_pfm(out / "valid.pfm")
        assert set(np.unique(valid)) <= {0.0, 1.0}

    def test_eval_metrics(self, synth_dir, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--dir-a", str(synth_dir / "clean"),
                   "--dir-b", str(synth_dir / "degraded"), "--out", str(out)])
        assert rc == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "name,psnr,ssim"
        assert lines[-1].startswith("mean,")
        assert (out / "metrics.png").exists()

    def test_eval_disjoint_dirs_exits_2(self, synth_dir, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["eval", "--dir-a", str(synth_dir / "clean"),
                   "--dir-b", str(empty), "--out", str(tmp_path / "e")])
        assert rc == 2


class TestGradcheckCommand:
    def test_single_seed_run(self, tmp_path):
        out = tmp_path / "gc"
        rc = main(["gradcheck", "--out", str(out), "--seeds", "0"])
        assert rc == 0
        lines = (out / "gradcheck.csv").read_text().strip().splitlines()
        assert lines[0] == "op,slot,err,step"
        assert len(lines) > 5


class TestThreadEnv:
    def test_bad_value_exits_2(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DPGS_THREADS", "lots")
        rc = main(SYNTH_ARGS + ["--out", str(tmp_path / "x")])
        assert rc == 2

    def test_positive_value_sets_blas_vars(self, monkeypatch):
        monkeypatch.setenv("DPGS_THREADS", "2")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        cli._apply_thread_env()
        import os
        assert os.environ["OMP_NUM_THREADS"] == "2"
