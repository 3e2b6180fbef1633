from pathlib import Path

import numpy as np
import pytest

from lfg import cli, imageio, shapemodel
from lfg.config import PipelineConfig, echo_config, load_config
from lfg.errors import ConfigError
from lfg.report import render_run_reports, smooth


def tree_bytes(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config(None)
        assert cfg.train.lr_g == 1e-4 and cfg.train.lr_d == 1e-5
        assert cfg.train.batch == 6
        assert cfg.loss.texture == 100.0
        assert cfg.segmenter.batch == 16 and cfg.segmenter.epochs == 150

    def test_file_overrides(self, tmp_path):
        f = tmp_path / "cfg.ini"
        f.write_text("[train]\niterations = 42\nlr_g = 0.002\n\n[run]\nseed = 99\n")
        cfg = load_config(f)
        assert cfg.train.iterations == 42
        assert cfg.train.lr_g == 0.002
        assert cfg.seed == 99

    def test_unknown_key_names_the_field(self, tmp_path):
        f = tmp_path / "cfg.ini"
        f.write_text("[train]\nlearning_rate = 1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(f)

    def test_unknown_section_rejected(self, tmp_path):
        f = tmp_path / "cfg.ini"
        f.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(f)

    def test_bad_value_diagnostic(self, tmp_path):
        f = tmp_path / "cfg.ini"
        f.write_text("[train]\nbatch = six\n")
        with pytest.raises(ConfigError, match="batch"):
            load_config(f)

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LFG_SEED", "1234")
        cfg = load_config(None)
        assert cfg.seed == 1234
        monkeypatch.setenv("LFG_SEED", "not-an-int")
        with pytest.raises(ConfigError):
            load_config(None)

    def test_echo_written_before_run(self, tmp_path):
        cfg = PipelineConfig()
        path = echo_config(cfg, tmp_path)
        text = path.read_text()
        assert "[train]" in text and "lr_g = 0.0001" in text
        assert "mask_patches" in text  # deviation note present

    def test_echo_deterministic(self, tmp_path):
        a = echo_config(PipelineConfig(), tmp_path / "a").read_bytes()
        b = echo_config(PipelineConfig(), tmp_path / "b").read_bytes()
        assert a == b


class TestCliPhantom:
    def test_identical_output_trees(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert cli.main(["phantom", "--seed", "7", "--count", "10",
                         "--dims", "32,32", "--out", str(a)]) == 0
        assert cli.main(["phantom", "--seed", "7", "--count", "10",
                         "--dims", "32,32", "--out", str(b)]) == 0
        ta, tb = tree_bytes(a), tree_bytes(b)
        assert ta.keys() == tb.keys() and all(ta[k] == tb[k] for k in ta)

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["phantom", "--bogus-flag"])
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cli.main(["phantom", "--seed", "3", "--count", "24", "--dims", "64,64",
              "--out", str(out)])
    return out


class TestCliPipelinePieces:
    def test_shape_fit_and_sample(self, dataset_dir, tmp_path):
        model_path = tmp_path / "model.lsm"
        assert cli.main(["shape-fit", "--manifest", str(dataset_dir / "manifest.txt"),
                         "--out", str(model_path)]) == 0
        model = shapemodel.load_shape_model(model_path)
        assert model.n_modes == 10
        csv_path = tmp_path / "shapes.csv"
        assert cli.main(["shape-sample", "--model", str(model_path), "--count", "3",
                         "--seed", "1", "--out", str(csv_path)]) == 0
        rows = csv_path.read_text().splitlines()
        assert len(rows) == 3 and len(rows[0].split(",")) == 400

    def test_eval_texture_identical_sets_zero_kl(self, dataset_dir, tmp_path):
        out = tmp_path / "tex"
        assert cli.main(["eval-texture", "--real", str(dataset_dir / "manifest.txt"),
                         "--synthetic", str(dataset_dir / "manifest.txt"),
                         "--out", str(out)]) == 0
        lines = (out / "kl_summary.csv").read_text().splitlines()
        assert lines[0] == "feature,kl,n_real,n_synthetic"
        for ln in lines[1:]:
            feat, kl, n_r, n_s = ln.split(",")
            assert float(kl) == 0.0
            assert n_r == n_s
        feats = (out / "features.csv").read_text().splitlines()
        assert feats[0] == "lesion_id,source,energy,correlation"

    def test_preprocess_windows_and_resizes(self, tmp_path):
        src = tmp_path / "raw"
        src.mkdir()
        rng = np.random.default_rng(0)
        raw = rng.uniform(-200, 300, size=(40, 40)).astype(np.float32)
        imageio.write_raw_grid(src / "s0_img.lfg", raw)
        liver = np.zeros((40, 40), np.uint8)
        liver[5:35, 5:35] = 1
        imageio.write_grid(src / "s0_liver.lfg", imageio.LesionMask(liver))
        lesion = np.zeros((40, 40), np.uint8)
        lesion[10:16, 10:16] = 1
        imageio.write_grid(src / "s0_lesion.lfg", imageio.LesionMask(lesion))
        (src / "manifest.txt").write_text("P0,s0_img.lfg,s0_liver.lfg,s0_lesion.lfg\n")
        out = tmp_path / "prep"
        assert cli.main(["preprocess", "--manifest", str(src / "manifest.txt"),
                         "--out", str(out), "--size", "32,32"]) == 0
        recs = imageio.read_dataset(out / "manifest.txt")
        assert recs[0].image.values.shape == (32, 32)
        assert recs[0].image.values.min() >= 0 and recs[0].image.values.max() <= 1
        assert recs[0].has_lesion  # 36 px lesion survives nearest resize > 10 px
        outside = recs[0].image.values[recs[0].liver.bits == 0]
        assert outside.max() == 0.0  # liver ROI extraction applied

    def test_preprocess_rejects_empty_liver(self, tmp_path):
        src = tmp_path / "raw"
        src.mkdir()
        raw = np.zeros((16, 16), dtype=np.float32)
        imageio.write_raw_grid(src / "s0_img.lfg", raw)
        imageio.write_grid(src / "s0_liver.lfg",
                           imageio.LesionMask(np.zeros((16, 16), np.uint8)))
        (src / "manifest.txt").write_text("P0,s0_img.lfg,s0_liver.lfg\n")
        out = tmp_path / "prep"
        assert cli.main(["preprocess", "--manifest", str(src / "manifest.txt"),
                         "--out", str(out)]) == 0
        assert imageio.read_dataset(out / "manifest.txt") == []

    def test_missing_manifest_exits_4(self, tmp_path):
        assert cli.main(["shape-fit", "--manifest", str(tmp_path / "none.txt"),
                         "--out", str(tmp_path / "m.lsm")]) == 4

    def test_bad_config_exits_3(self, dataset_dir, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nbatch = -3\n")
        rc = cli.main(["synth-train", "--manifest", str(dataset_dir / "manifest.txt"),
                       "--out", str(tmp_path / "run"), "--config", str(bad)])
        assert rc == 3


class TestReport:
    def test_smooth_window(self):
        vals = [4.0, 2.0, 6.0]
        assert smooth(vals, 2) == [4.0, 3.0, 4.0]

    def test_empty_run_dir_notices(self, tmp_path):
        written = render_run_reports(tmp_path)
        assert written == ["report_manifest.txt"]
        manifest = (tmp_path / "report_manifest.txt").read_text()
        assert "telemetry.csv missing" in manifest

    def test_full_report_deterministic(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / "telemetry.csv").write_text(
            "step,gan_d,gan_g,gp,rec,perc,tex,total,wall_ms\n"
            + "\n".join(f"{s},0,0,0,0,0,0,{10.0 / s:.6e},0" for s in range(1, 40)) + "\n")
        (run / "features.csv").write_text(
            "lesion_id,source,energy,correlation\n"
            + "\n".join(f"r{i},real,{0.1 + 0.01 * i:.4f},{0.5:.4f}" for i in range(10)) + "\n"
            + "\n".join(f"s{i},synthetic,{0.12 + 0.01 * i:.4f},{0.55:.4f}" for i in range(10)) + "\n")
        (run / "kl_summary.csv").write_text("feature,kl,n_real,n_synthetic\n"
                                            "energy,0.1,10,10\ncorrelation,0.2,10,10\n")
        (run / "comparison.csv").write_text(
            "regime,seed,n,dsc_mean,dsc_std,vpsc_mean,vpsc_std,vsen_mean,vsen_std\n"
            "real,pooled,20,65.000000,10.000000,70.000000,9.000000,63.000000,8.000000\n"
            "real+syn,pooled,20,69.000000,9.500000,71.000000,8.000000,68.000000,7.000000\n"
            "delta_dsc,0,,4.000000,,,,,\n")
        first = render_run_reports(run)
        snap = {name: (run / name).read_bytes() for name in first}
        second = render_run_reports(run)
        assert first == second
        for name in first:
            assert (run / name).read_bytes() == snap[name]
        assert "loss_curve.svg" in first
        assert "histogram_energy.svg" in first and "histogram_correlation.svg" in first
        table = (run / "comparison_table.txt").read_text()
        assert "Real+Syn[PCGAN]" in table and "Real" in table
        assert "DSC delta (seed 0): +4.000" in table

    def test_report_cli(self, tmp_path):
        run = tmp_path / "r"
        run.mkdir()
        assert cli.main(["report", "--run", str(run)]) == 0
