"""Experiment configuration: JSON files, presets and schema validation.

A config is a nested JSON object (see ``SCHEMA``). Presets supply every
field; a file only needs the fields it changes, and CLI flags override
both. ``build_*`` helpers turn the validated dict into the library types.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .fista import FistaConfig
from .forward import SpectralPlan, TimeGrid
from .grid import ImageGrid, make_circular_array
from .phantoms import KINDS, PhantomSpec
from .regularizers import RegParams
from .solver import GncSchedule, SolverConfig

SCHEMA_VERSION = 1
METHODS = ("proposed-form1", "proposed-form2", "fista-tv", "tikhonov")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_lam_grid = {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}, "minItems": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "phantom", "geometry", "timing", "physics", "noise", "method"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "preset": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "deterministic": {"type": "boolean"},
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(KINDS)},
                "size_px": {"type": "integer", "minimum": 16},
                "amplitude": _pos,
                "seed": {"type": "integer", "minimum": 0},
                "path": {"type": ["string", "null"]},
            },
        },
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nx": {"type": "integer", "minimum": 2},
                "ny": {"type": "integer", "minimum": 2},
                "dx": _pos,
                "dy": _pos,
                "imaging_px": {"type": "integer", "minimum": 1},
                "sensor_radius_mm": {"type": "number", "minimum": 0},
                "center_mm": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "sensors": {"type": "array", "items": _posint, "minItems": 1},
            },
        },
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dt": _pos, "m_samples": _posint},
        },
        "physics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"c0": _pos},
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "snr_db": {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                          "minItems": 1},
                "fine_grid": {"type": "boolean"},
            },
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": list(METHODS)},
                "lam": {"type": "number", "minimum": 0},
                "lam_grid": _lam_grid,
                "lam_p_factor": {"type": "number", "minimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "epsilon": _pos,
                "q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "n_s": _posint,
                "eps_s": _pos,
                "eps_cg": _pos,
                "eps_o": _pos,
                "rho": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_outer": _posint,
                "max_cg": _posint,
                "max_ls": _posint,
                "precondition": {"enum": ["jacobi", "none"]},
                "lambda_tv": {"type": "number", "minimum": 0},
                "lambda_tv_grid": _lam_grid,
                "fista_max_iters": _posint,
                "fista_tol": _pos,
                "tv_inner_iters": _posint,
                "nonneg": {"type": "boolean"},
            },
        },
        "benchmark": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
                "workers": _posint,
            },
        },
    },
}

_METHOD_DEFAULTS = {
    "name": "proposed-form1",
    "lam": 1e-3,
    "lam_grid": None,
    "lam_p_factor": 10.0,
    "alpha": 0.5,
    "epsilon": 1e-6,
    "q": 0.25,
    "n_s": 10,
    "eps_s": 1e-6,
    "eps_cg": 1e-6,
    "eps_o": 1e-6,
    "rho": 0.5,
    "max_outer": 200,
    "max_cg": 200,
    "max_ls": 30,
    "precondition": "jacobi",
    "lambda_tv": 1e-3,
    "lambda_tv_grid": None,
    "fista_max_iters": 2000,
    "fista_tol": 1e-6,
    "tv_inner_iters": 20,
    "nonneg": True,
}

PRESETS = {
    # 512^2 grid of 0.1 mm, 128^2 imaging region, 12 mm ring, 100 MHz, 1600 samples
    "paper": {
        "schema_version": SCHEMA_VERSION,
        "preset": "paper",
        "seed": 0,
        "deterministic": False,
        "phantom": {"kind": "derenzo", "size_px": 128, "amplitude": 1.0, "seed": 0, "path": None},
        "geometry": {"nx": 512, "ny": 512, "dx": 0.1, "dy": 0.1, "imaging_px": 128,
                     "sensor_radius_mm": 12.0, "center_mm": [0.0, 0.0],
                     "sensors": [16, 32, 64, 128]},
        "timing": {"dt": 0.01, "m_samples": 1600},
        "physics": {"c0": 1.5},
        "noise": {"snr_db": [20.0, 30.0, 40.0], "seeds": [0], "fine_grid": False},
        "method": dict(_METHOD_DEFAULTS),
        "benchmark": {"methods": ["proposed-form1", "proposed-form2", "fista-tv"], "workers": 1},
    },
}

# Half-size analogue: every length, the ring and c0 * M * dt scale by 1/2.
# Iteration caps are set so a 16-sensor, three-SNR row fits a 20 minute
# budget on one core; solves then stop on the caps, not the 1e-6 tolerances.
PRESETS["desk"] = copy.deepcopy(PRESETS["paper"])
PRESETS["desk"].update({
    "preset": "desk",
    "phantom": {"kind": "derenzo", "size_px": 64, "amplitude": 1.0, "seed": 0, "path": None},
    "geometry": {"nx": 256, "ny": 256, "dx": 0.1, "dy": 0.1, "imaging_px": 64,
                 "sensor_radius_mm": 6.0, "center_mm": [0.0, 0.0], "sensors": [16, 32]},
    "timing": {"dt": 0.02, "m_samples": 400},
})
PRESETS["desk"]["method"].update({
    "max_outer": 10, "max_cg": 30, "eps_cg": 1e-3,
    "fista_max_iters": 300, "fista_tol": 1e-5,
})


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(cfg: dict) -> dict:
    """Check ``cfg`` against the schema and the cross-field rules."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    g = cfg["geometry"]
    if g["imaging_px"] > min(g["nx"], g["ny"]):
        raise ConfigError("imaging region larger than the computational grid")
    if cfg["phantom"]["size_px"] != g["imaging_px"]:
        raise ConfigError("phantom size_px must equal geometry.imaging_px")
    if cfg["phantom"]["kind"] == "file" and not cfg["phantom"].get("path"):
        raise ConfigError("file phantoms need phantom.path")
    return cfg


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> dict:
    """Preset, then the file at ``path``, then ``overrides``; validated."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


# -- builders ---------------------------------------------------------------

@dataclass
class Setup:
    grid: ImageGrid
    plan: SpectralPlan
    times: TimeGrid
    region: tuple


def build_setup(cfg: dict, workers: int | None = None) -> Setup:
    g = cfg["geometry"]
    grid = ImageGrid(g["nx"], g["ny"], g["dx"], g["dy"])
    plan = SpectralPlan(grid, cfg["physics"]["c0"], workers)
    times = TimeGrid(cfg["timing"]["m_samples"], cfg["timing"]["dt"])
    return Setup(grid, plan, times, grid.center_region(g["imaging_px"]))


def build_sensors(cfg: dict, grid: ImageGrid, n_sensors: int):
    g = cfg["geometry"]
    return make_circular_array(grid, tuple(g["center_mm"]), g["sensor_radius_mm"], n_sensors)


def build_phantom_spec(cfg: dict) -> PhantomSpec:
    return PhantomSpec(**cfg["phantom"])


def build_solver(cfg: dict, lam: float | None = None):
    """``(RegParams, SolverConfig, GncSchedule)`` for a proposed/tikhonov method."""
    m = cfg["method"]
    lam = m["lam"] if lam is None else lam
    form = 2 if m["name"] == "proposed-form2" else 1
    reg = RegParams(alpha=m["alpha"], epsilon=m["epsilon"], q=0.5, form=form)
    solver = SolverConfig(lam=lam, lam_p=m["lam_p_factor"] * lam, eps_s=m["eps_s"],
                          eps_cg=m["eps_cg"], eps_o=m["eps_o"], rho=m["rho"],
                          max_outer=m["max_outer"], max_cg=m["max_cg"], max_ls=m["max_ls"],
                          precondition=m["precondition"])
    return reg, solver, GncSchedule(m["q"], m["n_s"])


def build_fista(cfg: dict, lambda_tv: float | None = None) -> FistaConfig:
    m = cfg["method"]
    return FistaConfig(lambda_tv=m["lambda_tv"] if lambda_tv is None else lambda_tv,
                       max_iters=m["fista_max_iters"], tol=m["fista_tol"],
                       tv_inner_iters=m["tv_inner_iters"], nonneg=m["nonneg"])


def lambda_grid(cfg: dict) -> list[float] | None:
    m = cfg["method"]
    return m["lambda_tv_grid"] if m["name"] == "fista-tv" else m["lam_grid"]
