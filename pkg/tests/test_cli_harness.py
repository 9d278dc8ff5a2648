import csv
import json

import jsonschema
import numpy as np
import pytest

from patrecon import harness
from patrecon import io as pio
from patrecon.cli import main
from patrecon.config import PRESETS, build_sensors, load_config
from patrecon.errors import ConfigError
from patrecon.forward import MatrixModel, apply_H

TINY = {
    "phantom": {"kind": "disks", "size_px": 16},
    "geometry": {"nx": 48, "ny": 48, "imaging_px": 16, "sensor_radius_mm": 1.2,
                 "sensors": [4, 8]},
    "timing": {"dt": 0.02, "m_samples": 24},
    "noise": {"snr_db": [20.0, 40.0], "seeds": [0]},
    "method": {"name": "tikhonov", "lam": 1e-2, "max_cg": 50, "max_outer": 3, "n_s": 2,
               "fista_max_iters": 20},
    "benchmark": {"methods": ["tikhonov", "fista-tv"], "workers": 1},
}


@pytest.fixture
def tiny_cfg():
    return load_config(None, "desk", TINY)


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_presets_validate_and_desk_is_half_scale():
    full, desk = load_config(None, "paper"), load_config(None, "desk")
    assert full["geometry"]["nx"] == 2 * desk["geometry"]["nx"]
    assert full["geometry"]["sensor_radius_mm"] == 2 * desk["geometry"]["sensor_radius_mm"]
    c = lambda cfg: cfg["physics"]["c0"] * cfg["timing"]["m_samples"] * cfg["timing"]["dt"]
    assert c(full) == pytest.approx(2 * c(desk))
    assert PRESETS["paper"]["method"]["max_outer"] == 200


@pytest.mark.parametrize("override", [
    {"geometry": {"imaging_px": 1000}},
    {"phantom": {"size_px": 32}},
    {"method": {"name": "nope"}},
    {"method": {"q": 0.7}},
    {"unknown": 1},
    {"phantom": {"kind": "file"}},
])
def test_invalid_configs_raise(override):
    with pytest.raises(ConfigError):
        load_config(None, "desk", override)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, "huge")


def test_noiseless_simulation_is_bit_exact_apply_H(tiny_cfg, tmp_path):
    cfg = load_config(None, "desk", {**TINY, "noise": {"snr_db": [None], "seeds": [0]}})
    paths = harness.cmd_simulate(cfg, tmp_path)
    assert [p.name for p in paths] == ["meas_L4_clean_s0.bin", "meas_L8_clean_s0.bin"]
    _, truth, setup = harness.make_truth(cfg)
    meas = pio.read_measurements(paths[1])
    sensors = build_sensors(cfg, setup.grid, 8)
    expected = apply_H(setup.plan, sensors, setup.times, truth, "shell").data
    assert np.array_equal(meas.data, expected)


def test_measurement_metadata_schema(tiny_cfg, tmp_path):
    path = harness.cmd_simulate(tiny_cfg, tmp_path)[0]
    meta = pio.read_measurements(path).metadata
    harness.validate_measurement_metadata(meta)
    assert meta["l_sensors"] == 4 and meta["snr_db"] == 20.0 and meta["version"]
    assert meta["config"] == json.loads(json.dumps(tiny_cfg))
    del meta["sensor_positions"]
    with pytest.raises(jsonschema.ValidationError):
        harness.validate_measurement_metadata(meta)


def test_seeds_are_deterministic(tiny_cfg):
    _, truth, setup = harness.make_truth(tiny_cfg)
    a = harness.simulate_one(tiny_cfg, setup, truth, 4, 20.0, 3).data
    b = harness.simulate_one(tiny_cfg, setup, truth, 4, 20.0, 3).data
    c = harness.simulate_one(tiny_cfg, setup, truth, 4, 20.0, 4).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_lambda_grid_needs_truth(tiny_cfg):
    cfg = load_config(None, "desk", {**TINY, "method": {**TINY["method"], "lam_grid": [1e-3]}})
    model = MatrixModel(np.eye(4), (2, 2))
    with pytest.raises(ConfigError):
        harness.reconstruct(cfg, model, np.ones(4))


def test_identity_like_reconstruction_scores_high(tiny_cfg):
    truth = np.zeros((16, 16))
    truth[4:12, 5:10] = 1.0
    truth[7:9, 2:4] = 0.5
    model = MatrixModel(np.eye(256), truth.shape)
    for name, grid_key in (("tikhonov", "lam_grid"), ("fista-tv", "lambda_tv_grid")):
        cfg = load_config(None, "desk", {**TINY, "method": {**TINY["method"], "name": name,
                                                             grid_key: [1e-6, 1e-1]}})
        result = harness.reconstruct(cfg, model, truth.ravel(), truth)
        assert result.lam == 1e-6
        assert [s["lam"] for s in result.scan] == [1e-6, 1e-1]
        assert harness.evaluate(result.image, truth)["ssim"] > 0.99


def test_tiny_benchmark_matrix_and_resume(tiny_cfg, tmp_path, monkeypatch):
    rows = harness.cmd_benchmark(tiny_cfg, tmp_path, workers=1)
    assert len(rows) == 8
    assert {(r["sensors"], r["snr_db"], r["method"]) for r in rows} == {
        (n, s, m) for n in (4, 8) for s in (20.0, 40.0) for m in ("tikhonov", "fista-tv")}
    assert all(r["monotone"] for r in rows)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["cells"]) == 8

    def boom(*args):
        raise AssertionError("completed cell was recomputed")

    monkeypatch.setattr(harness, "run_cell", boom)
    again = harness.cmd_benchmark(tiny_cfg, tmp_path, workers=1)
    assert [r["ssim"] for r in again] == [r["ssim"] for r in rows]

    with open(tmp_path / "results.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 8 and set(table[0]) == set(harness.BENCH_FIELDS)
    lines = (tmp_path / "summary_table.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].split(",")[1] == "disks 4 trans. tikhonov ssim"


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "3")
    assert harness.worker_count({"benchmark": {"workers": 1}}) == 3
    monkeypatch.setenv(harness.WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        harness.worker_count()
    monkeypatch.delenv(harness.WORKERS_ENV)
    assert harness.worker_count({"benchmark": {"workers": 2}}) == 2


def test_cli_pipeline(tiny_file, tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--config", str(tiny_file), "-o", str(out), "--seed", "1"]
    assert main(["phantom"] + common) == 0
    assert (out / "phantom.png").is_file()
    assert main(["simulate", "--sensors", "8", "--snr", "40"] + common) == 0
    meas = out / "meas_L8_40dB_s1.bin"
    assert meas.is_file()
    capsys.readouterr()
    assert main(["reconstruct", str(meas), "--lam-grid", "1e-3,1e-2",
                 "--truth", str(out / "phantom.bin")] + common) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["method"] == "tikhonov" and 0 < summary["ssim"] <= 1
    with open(out / "lambda_scan.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    recon, meta = pio.read_image(out / "recon.bin")
    assert recon.data.shape == (48, 48) and meta["step"] == "reconstruct"

    assert main(["evaluate", str(out / "recon.bin"), "--reference", str(out / "phantom.bin"),
                 "--scanline", "8"] + common) == 0
    with open(out / "scanline.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "recon", "reference"] and len(rows) == 17
    assert main(["evaluate", str(out / "recon.bin")] + common) == 0
    assert "fom_db" in capsys.readouterr().out


def test_cli_error_exit_codes(tiny_file, tmp_path, capsys):
    common = ["--config", str(tiny_file), "-o", str(tmp_path)]
    assert main(["reconstruct", str(tmp_path / "absent.bin")] + common) == 1
    assert main(["phantom", "--config", str(tmp_path / "absent.json")]) == 1
    assert main(["simulate", "--sensors", "8", "--snr", "40"] + common) == 0
    meas = tmp_path / "meas_L8_40dB_s0.bin"
    assert main(["reconstruct", str(meas), "--lam-grid", "1e-3"] + common) == 1
    assert "ground-truth" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["reconstruct"])
