import numpy as np
import pytest
import yaml

from pnpmbir.arrayio import read_array, write_array
from pnpmbir.cli import cmd_evaluate, cmd_reconstruct, cmd_simulate, load_config, main
from pnpmbir.errors import ConfigError
from pnpmbir.geometry import FanBeamGeometry, fbp_reconstruct
from pnpmbir.types import Sinogram


def base_config(**overrides):
    cfg = {
        "geometry": {"image_n": 64, "n_views": 90, "n_detectors": 128,
                     "source_to_iso_mm": 540.0, "source_to_detector_mm": 950.0,
                     "detector_pitch_mm": 1.0, "pixel_mm": 1.0},
        "phantom": {"kind": "shepp_logan"},
        "dose": {"ma_list": [40.0], "reference_ma": 800.0,
                 "photons_per_ray_at_reference": 1e5, "electronic_noise_sd": 5.0},
        "reconstruction": {"method": "fbp", "fbp_window": "hann",
                           "denoiser": {"kind": "identity"},
                           "solver": {"max_iters": 3}},
        "metrics": {"levels": 64},
        "seed": 77,
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and key in cfg:
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def write_config(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfig:
    def test_loads_defaults(self, tmp_path):
        cfg = load_config(write_config(tmp_path, base_config()))
        assert cfg.geometry.image_n == 64
        assert cfg.ma_list == [40.0]
        assert cfg.seed == 77

    def test_unknown_key_rejected(self, tmp_path):
        raw = base_config()
        raw["geometry"]["n_view"] = 10  # typo
        with pytest.raises(ConfigError, match="unknown"):
            load_config(write_config(tmp_path, raw))

    def test_unknown_top_level_rejected(self, tmp_path):
        raw = base_config()
        raw["extra"] = 1
        with pytest.raises(ConfigError, match="unknown"):
            load_config(write_config(tmp_path, raw))

    def test_empty_ma_list_rejected(self, tmp_path):
        raw = base_config(dose={"ma_list": []})
        with pytest.raises(ConfigError, match="ma_list"):
            load_config(write_config(tmp_path, raw))

    def test_missing_weights_rejected_at_load(self, tmp_path):
        raw = base_config(reconstruction={
            "method": "pnp",
            "denoiser": {"kind": "residual_cnn", "weights_path": "/nonexistent.pnpw"}})
        with pytest.raises(ConfigError, match="weights"):
            load_config(write_config(tmp_path, raw))

    def test_cli_exit_code_on_config_error(self, tmp_path):
        raw = base_config()
        raw["bogus"] = True
        path = write_config(tmp_path, raw)
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


class TestSimulate:
    def test_bundle_layout(self, tmp_path):
        cfg = load_config(write_config(tmp_path, base_config()))
        manifest = cmd_simulate(cfg, tmp_path / "out")
        out = tmp_path / "out"
        assert manifest.exists()
        dose_dirs = [p for p in out.iterdir() if p.is_dir() and p.name.startswith("dose_")]
        assert len(dose_dirs) == 1  # one mA entry -> one dose bundle
        assert (out / "reference").is_dir()
        for bundle in dose_dirs + [out / "reference"]:
            for name in ("counts.arr", "sino.arr", "weights.arr", "fbp.arr",
                         "counts.meta"):
                assert (bundle / name).exists(), name
        for name in ("phantom.arr", "noiseless_sino.arr", "noiseless_fbp.arr"):
            assert (out / name).exists()

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = load_config(write_config(tmp_path, base_config()))
        m1 = cmd_simulate(cfg, tmp_path / "a")
        m2 = cmd_simulate(cfg, tmp_path / "b")
        # manifests carry content hashes; equal hashes mean byte-equal arrays
        assert m1.read_text() == m2.read_text()

    def test_different_seed_changes_counts(self, tmp_path):
        cfg1 = load_config(write_config(tmp_path, base_config()))
        cfg2 = load_config(write_config(tmp_path, base_config(seed=78), name="c2.yaml"))
        cmd_simulate(cfg1, tmp_path / "a")
        cmd_simulate(cfg2, tmp_path / "b")
        a = read_array(tmp_path / "a" / "dose_mA40" / "counts.arr")
        b = read_array(tmp_path / "b" / "dose_mA40" / "counts.arr")
        assert not np.array_equal(a, b)

    def test_lower_current_has_higher_post_log_noise(self, tmp_path):
        raw = base_config(dose={"ma_list": [40.0, 200.0]})
        cfg = load_config(write_config(tmp_path, raw))
        cmd_simulate(cfg, tmp_path / "out")
        noiseless = read_array(tmp_path / "out" / "noiseless_sino.arr")
        var40 = np.var(read_array(tmp_path / "out" / "dose_mA40" / "sino.arr") - noiseless)
        var200 = np.var(read_array(tmp_path / "out" / "dose_mA200" / "sino.arr") - noiseless)
        assert var40 > var200

    def test_append_only_output_dir(self, tmp_path):
        cfg = load_config(write_config(tmp_path, base_config()))
        cmd_simulate(cfg, tmp_path / "out")
        with pytest.raises(OSError, match="append-only"):
            cmd_simulate(cfg, tmp_path / "out")

    def test_jobs_flag_gives_identical_results(self, tmp_path):
        raw = base_config(dose={"ma_list": [40.0, 100.0]})
        cfg = load_config(write_config(tmp_path, raw))
        m1 = cmd_simulate(cfg, tmp_path / "serial", jobs=1)
        m2 = cmd_simulate(cfg, tmp_path / "parallel", jobs=3)
        assert m1.read_text() == m2.read_text()


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    cfg = load_config(write_config(tmp, base_config()))
    cmd_simulate(cfg, tmp / "out")
    return cfg, tmp / "out"


class TestReconstruct:
    def test_fbp_delegates_bit_exactly(self, simulated, tmp_path):
        cfg, out = simulated
        path = cmd_reconstruct(cfg, out / "dose_mA40", tmp_path / "rec", method="fbp")
        recon = read_array(path)
        sino = Sinogram(read_array(out / "dose_mA40" / "sino.arr"))
        expected = fbp_reconstruct(cfg.geometry, sino, cfg.fbp_window).values
        assert np.array_equal(recon, expected)
        assert (tmp_path / "rec" / "recon_fbp.png").exists()

    def test_denoise_only_identity_equals_fbp(self, simulated, tmp_path):
        cfg, out = simulated
        fbp_path = cmd_reconstruct(cfg, out / "dose_mA40", tmp_path / "r1", method="fbp")
        den_path = cmd_reconstruct(cfg, out / "dose_mA40", tmp_path / "r2",
                                   method="denoise_only")
        assert np.array_equal(read_array(fbp_path), read_array(den_path))

    def test_pnp_writes_residual_csv(self, simulated, tmp_path):
        cfg, out = simulated
        cmd_reconstruct(cfg, out / "dose_mA40", tmp_path / "r3", method="pnp")
        csv_path = tmp_path / "r3" / "residuals_pnp.csv"
        assert csv_path.exists()
        assert csv_path.read_text().startswith("iter,")

    def test_missing_bundle_rejected(self, simulated, tmp_path):
        cfg, _ = simulated
        with pytest.raises(ConfigError):
            cmd_reconstruct(cfg, tmp_path / "nowhere", tmp_path / "r4")


class TestEvaluate:
    def test_self_evaluation_is_zero(self, simulated, tmp_path):
        cfg, out = simulated
        rec = tmp_path / "rec"
        cmd_reconstruct(cfg, out / "dose_mA40", rec, method="fbp")
        report = cmd_evaluate(cfg, rec, rec / "recon_fbp.arr", tmp_path / "eval")
        text = report.read_text().splitlines()
        assert len(text) == 2  # header + one method row
        row = dict(zip(text[0].split(","), text[1].split(",")))
        assert row["method"] == "fbp"
        assert float(row["emd"]) == 0.0
        assert float(row["contrast_pct_change"]) == 0.0

    def test_row_count_matches_methods(self, simulated, tmp_path):
        cfg, out = simulated
        rec = tmp_path / "rec"
        cmd_reconstruct(cfg, out / "dose_mA40", rec, method="fbp")
        cmd_reconstruct(cfg, out / "dose_mA40", rec, method="denoise_only")
        report = cmd_evaluate(cfg, rec, out / "reference" / "fbp.arr", tmp_path / "eval")
        assert len(report.read_text().strip().splitlines()) == 3

    def test_missing_fbp_baseline_rejected(self, simulated, tmp_path):
        cfg, out = simulated
        rec = tmp_path / "rec"
        rec.mkdir()
        write_array(rec / "recon_pnp.arr", np.zeros((64, 64)))
        with pytest.raises(Exception, match="fbp"):
            cmd_evaluate(cfg, rec, out / "reference" / "fbp.arr", tmp_path / "eval")

    def test_emd_monotone_in_noise_level(self, simulated, tmp_path):
        cfg, out = simulated
        reference = read_array(out / "reference" / "fbp.arr")
        rng = np.random.default_rng(5)
        rec = tmp_path / "rec"
        rec.mkdir()
        write_array(rec / "recon_fbp.arr", reference)
        scale = reference.std()
        write_array(rec / "recon_small.arr",
                    reference + 0.2 * scale * rng.standard_normal(reference.shape))
        write_array(rec / "recon_large.arr",
                    reference + 1.0 * scale * rng.standard_normal(reference.shape))
        ref_path = tmp_path / "ref.arr"
        write_array(ref_path, reference)
        report = cmd_evaluate(cfg, rec, ref_path, tmp_path / "eval")
        rows = {line.split(",")[0]: line.split(",")
                for line in report.read_text().strip().splitlines()[1:]}
        header = report.read_text().splitlines()[0].split(",")
        emd_col = header.index("emd")
        e_none = float(rows["fbp"][emd_col])
        e_small = float(rows["small"][emd_col])
        e_large = float(rows["large"][emd_col])
        assert e_none < e_small < e_large


class TestMainEntry:
    def test_full_pipeline_via_main(self, tmp_path):
        raw = base_config(reconstruction={"method": "denoise_only",
                                          "denoiser": {"kind": "gaussian",
                                                       "strength": 1.0}})
        path = write_config(tmp_path, raw)
        rc = main(["full", "--config", str(path), "--out", str(tmp_path / "run")])
        assert rc == 0
        assert (tmp_path / "run" / "eval_mA40" / "report.csv").exists()
        assert (tmp_path / "run" / "recon_mA40" / "recon_fbp.arr").exists()
        assert (tmp_path / "run" / "recon_mA40" / "recon_denoise_only.arr").exists()
