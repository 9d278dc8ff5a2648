"""Pipeline steps behind the CLI and the resumable benchmark sweep.

Every written file carries provenance: the full resolved config, the
package version, the seed and the producing step. Benchmark cells are
independent solves; completed cells are recorded in ``manifest.json``
(written atomically after each cell) and skipped on the next run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import io as pio
from .config import (build_fista, build_phantom_spec, build_sensors, build_setup, build_solver,
                     lambda_grid)
from .errors import ConfigError
from .fista import fista_tv_solve
from .forward import ForwardModel, check_wraparound, simulate_data
from .grid import Image, Measurements
from .metrics import fom, negative_mass_fraction, scanline, ssim
from .phantoms import embed_centered, make_phantom
from .solver import Problem, SolveReport, StageRecord, _quad_init, gnc_solve

log = logging.getLogger(__name__)

WORKERS_ENV = "PATRECON_WORKERS"

PROVENANCE_SCHEMA = {
    "type": "object",
    "required": ["step", "version", "seed", "config"],
    "properties": {
        "step": {"enum": ["phantom", "simulate", "reconstruct"]},
        "version": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "config": {"type": "object", "required": ["schema_version", "geometry", "timing"]},
    },
}

MEASUREMENT_SCHEMA = {
    "allOf": [PROVENANCE_SCHEMA, {
        "type": "object",
        "required": ["l_sensors", "snr_db", "noise_seed", "dt", "c0", "sensor_positions"],
        "properties": {
            "step": {"const": "simulate"},
            "l_sensors": {"type": "integer", "minimum": 1},
            "snr_db": {"type": ["number", "null"]},
            "noise_seed": {"type": "integer", "minimum": 0},
            "dt": {"type": "number", "exclusiveMinimum": 0},
            "c0": {"type": "number", "exclusiveMinimum": 0},
            "sensor_positions": {"type": "array", "items": {
                "type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
        },
    }],
}


def worker_count(cfg: dict | None = None) -> int:
    """Pool width: ``$PATRECON_WORKERS`` if set, else the config value."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{WORKERS_ENV} must be >= 1")
        return n
    return int((cfg or {}).get("benchmark", {}).get("workers", 1))


def provenance(cfg: dict, step: str, seed: int, **extra) -> dict:
    meta = {"step": step, "version": __version__, "seed": int(seed), "config": cfg}
    meta.update(extra)
    return meta


def _snr_tag(snr):
    return "clean" if snr is None else f"{float(snr):g}dB"


# -- phantom / simulate -----------------------------------------------------

def make_truth(cfg: dict):
    """Phantom image, its embedding on the computational grid, and the setup."""
    setup = build_setup(cfg)
    image = make_phantom(build_phantom_spec(cfg))
    return image, embed_centered(image, setup.grid), setup


def cmd_phantom(cfg: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    image, _, _ = make_truth(cfg)
    meta = provenance(cfg, "phantom", cfg["phantom"]["seed"], kind=cfg["phantom"]["kind"])
    paths = [out_dir / "phantom.bin", out_dir / "phantom.png"]
    meta.update(pio.png_bytes(image.data)[1])
    pio.write_image(paths[0], image, meta)
    pio.write_png(paths[1], image.data)
    return paths


def simulate_one(cfg: dict, setup, truth: np.ndarray, n_sensors: int, snr_db, seed: int,
                 engine: str = "shell") -> Measurements:
    sensors = build_sensors(cfg, setup.grid, n_sensors)
    check_wraparound(setup.grid, cfg["geometry"]["imaging_px"],
                     cfg["geometry"]["sensor_radius_mm"], setup.plan.c0, setup.times)
    meas = simulate_data(setup.plan, sensors, setup.times, truth, snr_db, seed,
                         fine_grid=cfg["noise"]["fine_grid"], engine=engine)
    meta = provenance(cfg, "simulate", seed, l_sensors=n_sensors, snr_db=snr_db,
                      noise_seed=seed, dt=setup.times.dt, c0=setup.plan.c0,
                      fine_grid=cfg["noise"]["fine_grid"],
                      sensor_positions=sensors.positions.tolist())
    return Measurements(meas.data, meas.dt, metadata=meta)


def cmd_simulate(cfg: dict, out_dir) -> list[Path]:
    """Measurements for every (L, SNR, seed) combination in the config."""
    out_dir = Path(out_dir)
    _, truth, setup = make_truth(cfg)
    paths = []
    for n_sensors in cfg["geometry"]["sensors"]:
        for snr in cfg["noise"]["snr_db"]:
            for seed in cfg["noise"]["seeds"]:
                meas = simulate_one(cfg, setup, truth, n_sensors, snr, seed)
                path = out_dir / f"meas_L{n_sensors}_{_snr_tag(snr)}_s{seed}.bin"
                pio.write_measurements(path, meas)
                paths.append(path)
    return paths


def validate_measurement_metadata(meta: dict) -> None:
    jsonschema.validate(meta, MEASUREMENT_SCHEMA)


# -- reconstruct ------------------------------------------------------------

@dataclass
class ReconResult:
    image: np.ndarray
    report: SolveReport
    method: str
    lam: float
    scan: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def model_from_measurements(cfg: dict, meas: Measurements, setup=None) -> ForwardModel:
    setup = setup or build_setup(cfg)
    positions = meas.metadata.get("sensor_positions")
    if positions is not None:
        from .grid import SensorArray
        sensors = SensorArray(setup.grid, positions, cfg["geometry"]["sensor_radius_mm"])
    else:
        sensors = build_sensors(cfg, setup.grid, meas.l_sensors)
    if len(sensors) != meas.l_sensors:
        raise ConfigError(f"measurements hold {meas.l_sensors} sensors, geometry gives {len(sensors)}")
    if meas.m_samples != setup.times.m_samples:
        raise ConfigError(f"measurements hold {meas.m_samples} samples, config M = "
                          f"{setup.times.m_samples}")
    return ForwardModel(setup.plan, sensors, setup.times)


def solve_once(cfg: dict, model, data: np.ndarray, lam: float):
    """One reconstruction with a fixed regularization weight."""
    name = cfg["method"]["name"]
    if name == "fista-tv":
        problem = Problem(model, data)
        return fista_tv_solve(problem, build_fista(cfg, lam))
    reg, solver, schedule = build_solver(cfg, lam)
    problem = Problem(model, data, reg, solver)
    if name == "tikhonov":
        t0 = time.perf_counter()
        x, info = _quad_init(problem)
        report = SolveReport(method="tikhonov", settings={"solver": asdict(solver),
                                                          "quad_init": asdict(info)})
        report.stages.append(StageRecord(0, 1.0, info.iterations,
                                         "tolerance" if info.converged else "max_cg",
                                         float("nan"), float("nan"), time.perf_counter() - t0))
        return x, report
    return gnc_solve(problem, schedule)


def reconstruct(cfg: dict, model, data: np.ndarray, truth: np.ndarray | None = None,
                region=None) -> ReconResult:
    """Fixed-λ solve, or SSIM-driven grid search when the config has a λ grid."""
    name = cfg["method"]["name"]
    grid = lambda_grid(cfg)
    t0 = time.perf_counter()
    if not grid:
        lam = cfg["method"]["lambda_tv" if name == "fista-tv" else "lam"]
        x, report = solve_once(cfg, model, data, lam)
        return ReconResult(x, report, name, lam, [], time.perf_counter() - t0)
    if truth is None:
        raise ConfigError("λ-grid tuning needs a ground-truth image")
    best = None
    scan = []
    for lam in grid:
        t1 = time.perf_counter()
        x, report = solve_once(cfg, model, data, lam)
        score = ssim(x, truth, region)
        scan.append({"lam": lam, "ssim": score, "seconds": time.perf_counter() - t1,
                     "degraded": report.degraded, "monotone": monotone(report),
                     "negative_fraction": negative_mass_fraction(x)})
        log.info("%s lam=%.3g ssim=%.4f", name, lam, score)
        if best is None or score > best[0]:
            best = (score, lam, x, report)
    _, lam, x, report = best
    report.settings["lambda_scan"] = scan
    return ReconResult(x, report, name, lam, scan, time.perf_counter() - t0)


def write_recon(out_dir, result: ReconResult, cfg: dict, grid) -> list[Path]:
    out_dir = Path(out_dir)
    meta = provenance(cfg, "reconstruct", cfg.get("seed", 0), method=result.method,
                      lam=result.lam, degraded=result.report.degraded)
    meta.update(pio.png_bytes(result.image)[1])
    paths = [out_dir / "recon.bin", out_dir / "recon.png", out_dir / "report.csv",
             out_dir / "report.json"]
    pio.write_image(paths[0], Image(grid, result.image), meta)
    pio.write_png(paths[1], result.image)
    pio.atomic_write_text(paths[2], result.report.to_csv())
    pio.atomic_write_text(paths[3], result.report.to_json())
    if result.scan:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["lam", "ssim", "seconds", "degraded", "monotone",
                                            "negative_fraction"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(result.scan)
        paths.append(out_dir / "lambda_scan.csv")
        pio.atomic_write_text(paths[-1], buf.getvalue())
    return paths


# -- evaluate ---------------------------------------------------------------

def evaluate(recon: np.ndarray, reference: np.ndarray | None = None, region=None,
             scan_index: int | None = None) -> dict:
    """SSIM against ``reference`` if given, FOM otherwise; optional scan line."""
    out = {}
    if reference is not None:
        out["ssim"] = ssim(recon, reference, region)
    else:
        out["fom_db"] = fom(recon, region)
    out["negative_fraction"] = negative_mass_fraction(recon)
    if scan_index is not None:
        out["scanline"] = scanline(recon, scan_index, region=region).tolist()
        if reference is not None:
            out["scanline_reference"] = scanline(reference, scan_index, region=region).tolist()
    return out


def scanline_csv(result: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_ref = "scanline_reference" in result
    w.writerow(["index", "recon"] + (["reference"] if has_ref else []))
    for i, v in enumerate(result["scanline"]):
        w.writerow([i, repr(v)] + ([repr(result["scanline_reference"][i])] if has_ref else []))
    return buf.getvalue()


# -- benchmark --------------------------------------------------------------

BENCH_FIELDS = ("cell", "phantom", "sensors", "snr_db", "seed", "method", "lam", "ssim",
                "fom_db", "negative_fraction", "monotone", "degraded", "iterations",
                "stop_reasons", "seconds")


def cell_key(phantom: str, n_sensors: int, snr, seed: int, method: str) -> str:
    return f"{phantom}|L{n_sensors}|{_snr_tag(snr)}|s{seed}|{method}"


def monotone(report: SolveReport) -> bool:
    return all(r.cost <= r.cost_before for r in report.records)


def run_cell(cfg: dict, n_sensors: int, snr, seed: int, method: str) -> dict:
    cfg = json.loads(json.dumps(cfg))
    cfg["method"]["name"] = method
    image, truth, setup = make_truth(cfg)
    meas = simulate_one(cfg, setup, truth, n_sensors, snr, seed)
    model = model_from_measurements(cfg, meas, setup)
    result = reconstruct(cfg, model, meas.data, truth, setup.region)
    x = result.image
    stops = ";".join(sorted({s.stop_reason for s in result.report.stages}))
    return {
        "cell": cell_key(cfg["phantom"]["kind"], n_sensors, snr, seed, method),
        "phantom": cfg["phantom"]["kind"],
        "sensors": n_sensors,
        "snr_db": snr,
        "seed": seed,
        "method": method,
        "lam": result.lam,
        "ssim": ssim(x, truth, setup.region),
        "fom_db": fom(x, setup.region),
        "negative_fraction": negative_mass_fraction(x),
        "monotone": monotone(result.report),
        "degraded": result.report.degraded,
        "iterations": len(result.report.records),
        "stop_reasons": stops,
        "seconds": result.seconds,
        "lambda_scan": result.scan,
    }


def _run_cell_args(args):
    return run_cell(*args)


def benchmark_cells(cfg: dict) -> list[tuple]:
    methods = cfg.get("benchmark", {}).get("methods", [cfg["method"]["name"]])
    cells = []
    for n_sensors in cfg["geometry"]["sensors"]:
        for snr in cfg["noise"]["snr_db"]:
            for seed in cfg["noise"]["seeds"]:
                for method in methods:
                    cells.append((n_sensors, snr, seed, method))
    return cells


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        return {"version": __version__, "cells": {}}
    return json.loads(path.read_text())


def cmd_benchmark(cfg: dict, out_dir, workers: int | None = None) -> list[dict]:
    """Run every benchmark cell not already in the manifest; write the tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = load_manifest(manifest_path)
    done = manifest["cells"]
    phantom = cfg["phantom"]["kind"]
    todo = [c for c in benchmark_cells(cfg) if cell_key(phantom, *c) not in done]
    log.info("benchmark: %d cells, %d already done", len(todo) + len(done), len(done))
    workers = workers or worker_count(cfg)

    def record(row):
        done[row["cell"]] = row
        pio.atomic_write_text(manifest_path, json.dumps(manifest, indent=1, default=str))
        log.info("cell %s: ssim %.4f (%.1f s)", row["cell"], row["ssim"], row["seconds"])

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(_run_cell_args, [(cfg,) + c for c in todo]):
                record(row)
    else:
        for c in todo:
            record(run_cell(cfg, *c))
    rows = [done[cell_key(phantom, *c)] for c in benchmark_cells(cfg)]
    pio.atomic_write_text(out_dir / "results.csv", results_csv(rows))
    pio.atomic_write_text(out_dir / "summary_table.csv", table_csv(rows))
    return rows


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def table_csv(rows: list[dict]) -> str:
    """One row per SNR, one SSIM column (and runtime column) per phantom/L/method."""
    cols = []
    for r in rows:
        c = (r["phantom"], r["sensors"], r["method"])
        if c not in cols:
            cols.append(c)
    snrs = []
    for r in rows:
        if r["snr_db"] not in snrs:
            snrs.append(r["snr_db"])
    index = {(r["phantom"], r["sensors"], r["method"], r["snr_db"]): r for r in rows}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["snr_db"]
    for p, n, m in cols:
        header += [f"{p} {n} trans. {m} ssim", f"{p} {n} trans. {m} seconds"]
    w.writerow(header)
    for snr in snrs:
        line = [_snr_tag(snr)]
        for p, n, m in cols:
            r = index.get((p, n, m, snr))
            line += ([f"{r['ssim']:.3f}", f"{r['seconds']:.1f}"] if r else ["", ""])
        w.writerow(line)
    return buf.getvalue()
