"""``patrecon`` command line: phantom, simulate, reconstruct, evaluate, benchmark.

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure
(including a reconstruction that finished degraded).

Numerical modules are imported inside :func:`main` so that
``--deterministic`` can pin BLAS/OpenMP thread counts before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _floats(text):
    return [None if v.strip().lower() in ("none", "clean", "inf") else float(v)
            for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (merged over the preset)")
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("--seed", type=int, help="seed for phantom and noise generation")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS/FFT and serial cells for bit-reproducible runs")
    common.add_argument("-o", "--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="patrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="write a phantom (binary + PNG)")
    ph.add_argument("--kind", choices=("derenzo", "vessel", "disks", "file"))
    ph.add_argument("--path", help="source image for --kind file")

    sim = sub.add_parser("simulate", parents=[common], help="simulate transducer data")
    sim.add_argument("--sensors", type=_ints, help="comma-separated transducer counts")
    sim.add_argument("--snr", type=_floats, help="comma-separated SNRs in dB ('none' = clean)")
    sim.add_argument("--phantom", help="phantom binary to use instead of the configured one")

    rec = sub.add_parser("reconstruct", parents=[common], help="reconstruct from measurements")
    rec.add_argument("measurements")
    rec.add_argument("--method", choices=("proposed-form1", "proposed-form2", "fista-tv",
                                          "tikhonov"))
    rec.add_argument("--lam", type=float, help="regularization weight")
    rec.add_argument("--lam-grid", type=_floats, help="grid of weights; best SSIM wins")
    rec.add_argument("--truth", help="ground-truth phantom binary (needed with --lam-grid)")

    ev = sub.add_parser("evaluate", parents=[common], help="SSIM against a reference, or FOM")
    ev.add_argument("recon")
    ev.add_argument("--reference", help="reference image binary (phantom or full grid)")
    ev.add_argument("--scanline", type=int, help="write the profile at this column index")
    ev.add_argument("--full-grid", action="store_true",
                    help="score the whole grid instead of the imaging region")

    bench = sub.add_parser("benchmark", parents=[common], help="run the SSIM sweep over sensors, SNRs and methods")
    bench.add_argument("--methods", help="comma-separated methods")
    bench.add_argument("--sensors", type=_ints)
    bench.add_argument("--snr", type=_floats)
    bench.add_argument("--workers", type=int)
    return p


def _overrides(args) -> dict:
    ov: dict = {}
    if args.seed is not None:
        ov["seed"] = args.seed
        ov.setdefault("phantom", {})["seed"] = args.seed
        ov.setdefault("noise", {})["seeds"] = [args.seed]
    if args.deterministic:
        ov["deterministic"] = True
    if getattr(args, "kind", None):
        ov.setdefault("phantom", {})["kind"] = args.kind
    if getattr(args, "path", None):
        ov.setdefault("phantom", {})["path"] = args.path
    if getattr(args, "sensors", None):
        ov.setdefault("geometry", {})["sensors"] = args.sensors
    if getattr(args, "snr", None):
        ov.setdefault("noise", {})["snr_db"] = args.snr
    method = ov.setdefault("method", {})
    if getattr(args, "method", None):
        method["name"] = args.method
    if getattr(args, "lam", None) is not None:
        method["lambda_tv" if method.get("name") == "fista-tv" else "lam"] = args.lam
    if getattr(args, "lam_grid", None):
        method["lam_grid"] = args.lam_grid
        method["lambda_tv_grid"] = args.lam_grid
    if getattr(args, "methods", None):
        ov.setdefault("benchmark", {})["methods"] = [m.strip() for m in args.methods.split(",")]
    if getattr(args, "workers", None):
        ov.setdefault("benchmark", {})["workers"] = args.workers
    return ov


def _load_reference(path, setup, imaging_px):
    from . import io as pio
    from .phantoms import embed_centered

    img, _ = pio.read_image(path)
    data = img.data
    if data.shape == setup.grid.shape:
        return data
    if data.shape == (imaging_px, imaging_px):
        return embed_centered(data, setup.grid)
    from .errors import ConfigError
    raise ConfigError(f"reference {path} has shape {data.shape}; expected {setup.grid.shape} "
                      f"or {(imaging_px, imaging_px)}")


def run(args) -> int:
    from pathlib import Path

    from . import harness
    from . import io as pio
    from .config import build_setup, load_config

    cfg = load_config(args.config, args.preset, _overrides(args))
    out = Path(args.out)
    if args.command == "phantom":
        for p in harness.cmd_phantom(cfg, out):
            print(p)
        return EXIT_OK

    if args.command == "simulate":
        if args.phantom:
            setup = build_setup(cfg)
            truth = _load_reference(args.phantom, setup, cfg["geometry"]["imaging_px"])
            paths = []
            for n in cfg["geometry"]["sensors"]:
                for snr in cfg["noise"]["snr_db"]:
                    for seed in cfg["noise"]["seeds"]:
                        meas = harness.simulate_one(cfg, setup, truth, n, snr, seed)
                        path = out / f"meas_L{n}_{harness._snr_tag(snr)}_s{seed}.bin"
                        pio.write_measurements(path, meas)
                        paths.append(path)
        else:
            paths = harness.cmd_simulate(cfg, out)
        for p in paths:
            print(p)
        return EXIT_OK

    if args.command == "reconstruct":
        meas = pio.read_measurements(args.measurements)
        setup = build_setup(cfg)
        truth = None
        if args.truth:
            truth = _load_reference(args.truth, setup, cfg["geometry"]["imaging_px"])
        model = harness.model_from_measurements(cfg, meas, setup)
        result = harness.reconstruct(cfg, model, meas.data, truth, setup.region)
        for p in harness.write_recon(out, result, cfg, setup.grid):
            print(p)
        summary = {"method": result.method, "lam": result.lam, "seconds": result.seconds,
                   "degraded": result.report.degraded,
                   "stop_reasons": [s.stop_reason for s in result.report.stages]}
        if truth is not None:
            summary.update(harness.evaluate(result.image, truth, setup.region))
        print(json.dumps(summary))
        if result.report.degraded:
            print(f"reconstruction degraded: {result.report.failure}", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK

    if args.command == "evaluate":
        recon, _ = pio.read_image(args.recon)
        setup = build_setup(cfg)
        imaging = cfg["geometry"]["imaging_px"]
        x = recon.data
        if x.shape == (imaging, imaging) and x.shape != setup.grid.shape:
            region = None
        else:
            region = None if args.full_grid else setup.region
        ref = None
        if args.reference:
            ref_img, _ = pio.read_image(args.reference)
            ref = ref_img.data
            if ref.shape != x.shape:
                ref = _load_reference(args.reference, setup, imaging)
        result = harness.evaluate(x, ref, region, args.scanline)
        if args.scanline is not None:
            path = out / "scanline.csv"
            pio.atomic_write_text(path, harness.scanline_csv(result))
            print(path)
            result = {k: v for k, v in result.items() if not k.startswith("scanline")}
        print(json.dumps(result))
        return EXIT_OK

    if args.command == "benchmark":
        workers = 1 if cfg.get("deterministic") else None
        rows = harness.cmd_benchmark(cfg, out, workers)
        print(out / "results.csv")
        print(out / "summary_table.csv")
        return EXIT_NUMERIC if any(r["degraded"] for r in rows) else EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        for var in _THREAD_VARS:
            os.environ[var] = "1"
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    from .errors import ConfigError, NumericError
    from .io import FileFormatError

    try:
        return run(args)
    except (ConfigError, FileFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
