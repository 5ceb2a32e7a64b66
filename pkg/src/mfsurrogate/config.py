"""Experiment configuration: presets, JSON loading and object builders."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Mapping

import torch

from .discretization import WellSpec
from .esmda import DEFAULT_ALPHAS
from .geomodel import ChannelPrior, Grid, RockMap
from .simulator import FluidProps, Schedule

JOBS_ENV = "MFSURROGATE_JOBS"

_DESK_WELLS = [
    ("I1", "injector", 7, 2, (5, 8)), ("I2", "injector", 2, 8, (1, 4)), ("I3", "injector", 13, 9, (1, 4)),
    ("P1", "producer", 1, 1, (5, 8)), ("P2", "producer", 14, 1, (5, 8)), ("P3", "producer", 1, 14, (1, 4)),
    ("P4", "producer", 14, 14, (1, 4)), ("P5", "producer", 7, 7, (1, 4)),
]


def _wells(scale_xy: int, scale_z: int, bhp_inj: float = 330.0, bhp_prod: float = 310.0) -> list[dict]:
    out = []
    for name, kind, i, j, (top, bot) in _DESK_WELLS:
        out.append({"name": name, "kind": kind, "i": i * scale_xy + scale_xy // 2 if scale_xy > 1 else i,
                    "j": j * scale_xy + scale_xy // 2 if scale_xy > 1 else j,
                    "layers": [(top - 1) * scale_z + 1, bot * scale_z],
                    "bhp": bhp_inj if kind == "injector" else bhp_prod, "rw": 0.1})
    return out


DESK = {
    "grid": {"nx": 16, "ny": 16, "nz": 8, "dx": 40.0, "dy": 40.0, "dz": 2.0, "datum_depth": 1000.0},
    "rock": RockMap().to_dict(),
    "prior": {**ChannelPrior().to_dict(), "condition_wells": True},
    "wells": _wells(1, 1),
    "fluids": {},
    "schedule": {},
    "upscale": {"ratios": [4, 4, 2]},
    "data": {"n_lf": 200, "n_hf": 30, "n_test": 40, "train_seed": 1, "test_seed": 2},
    "selection": {"n_init": 10, "max_iter": 100, "max_retries": 10},
    "surrogate": {
        "widths": [16, 32, 32, 64], "n_t": 10, "dtype": "float32",
        "lambda_lf": 20.0, "lambda_hf": 1000.0, "holdout": 0.05, "batch": 4,
        "kinds": ["pressure", "saturation"],
        "step1": {"epochs": 30, "lr": 0.003},
        "step2": {"epochs": 60, "lr": 0.003},
        "step3": {"epochs": 40, "lr": 0.001},
        "reference": {"epochs": 30, "lr": 0.003},
    },
    "pca": {"n_fit": 300, "n_latent": 60, "seed": 3},
    "history_match": {
        "alphas": list(DEFAULT_ALPHAS), "n_ensemble": 100, "noise_fraction": 0.05, "noise_floor": 1.0,
        "obs_days": [150.0, 300.0], "obs_phases": ["water", "oil"], "forward": "lf",
        "truth_seed": 11, "posterior_check": 10,
    },
    "cost": {"solves_per_run": 200, "unknowns_per_cell": 2},
    "seed": 0,
}

FULL = copy.deepcopy(DESK)
FULL["grid"].update({"nx": 80, "ny": 80, "nz": 20, "dx": 20.0, "dy": 20.0})
FULL["wells"] = _wells(5, 1)
for w in FULL["wells"]:
    w["layers"] = [1, 10] if w["layers"][0] == 1 else [11, 20]
FULL["prior"].update({"width": [4.0, 8.0], "amplitude": [4.0, 12.0], "wavelength": [40.0, 80.0],
                       "thickness": [4, 8], "n_channels": [4, 7]})
FULL["data"].update({"n_lf": 2500, "n_hf": 200, "n_test": 400})
FULL["surrogate"].update({"step1": {"epochs": 70, "lr": 0.003}, "step2": {"epochs": 200, "lr": 0.003},
                           "step3": {"epochs": 100, "lr": 0.001}, "reference": {"epochs": 150, "lr": 0.003}})
FULL["pca"].update({"n_fit": 3000, "n_latent": 400})
FULL["history_match"].update({"n_ensemble": 400, "forward": "surrogate"})

PRESETS = {"desk": DESK, "full": FULL}


def deep_merge(base: Mapping, over: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, preset: str = "desk", overrides: Mapping | None = None) -> dict:
    """Preset, then the JSON file (if any), then ``overrides``; later wins."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        user = json.loads(Path(path).read_text())
        cfg = deep_merge(cfg, user.get("config", user))
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return cfg


def default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{JOBS_ENV} must be an integer, got {raw!r}") from exc
    return max(n, 1)


# ------------------------------------------------------------------ builders

def build_grid(cfg: Mapping) -> Grid:
    return Grid.from_dict(cfg["grid"])


def build_rock(cfg: Mapping) -> RockMap:
    return RockMap.from_dict(cfg["rock"])


def build_wells(cfg: Mapping) -> list[WellSpec]:
    return [WellSpec.from_dict(w) for w in cfg["wells"]]


def build_prior(cfg: Mapping) -> ChannelPrior:
    d = {k: v for k, v in cfg["prior"].items() if k != "condition_wells"}
    cond = [tuple(c) for c in d.pop("conditioning", [])]
    if cfg["prior"].get("condition_wells", False):
        grid = build_grid(cfg)
        for w in build_wells(cfg):
            cond.extend(((c, 1) for c in w.fine_cells(grid)))
    unique = sorted({(tuple(int(v) for v in c), int(f)) for c, f in cond})
    d["conditioning"] = [[list(c), f] for c, f in unique]
    return ChannelPrior.from_dict(d)


def build_fluids(cfg: Mapping) -> FluidProps:
    return FluidProps.from_dict({**FluidProps().to_dict(), **cfg.get("fluids", {})})


def build_schedule(cfg: Mapping, until: float | None = None) -> Schedule:
    """Simulation schedule; ``until`` truncates at that snapshot day."""
    base = Schedule().to_dict()
    sched = Schedule.from_dict({**base, **cfg.get("schedule", {})})
    if until is None:
        return sched
    days = [d for d in sched.snapshot_days if d <= until + 1e-9]
    if not days or abs(days[-1] - until) > 1e-9:
        raise ValueError(f"{until} is not a snapshot day")
    return Schedule.from_dict({**sched.to_dict(), "snapshot_days": days, "total_time": days[-1]})


def ratios(cfg: Mapping) -> tuple[int, int, int]:
    return tuple(int(r) for r in cfg["upscale"]["ratios"])


def bhp_bounds(cfg: Mapping) -> tuple[float, float]:
    bhps = [w["bhp"] for w in cfg["wells"]]
    return float(min(bhps)), float(max(bhps))


def torch_dtype(cfg: Mapping):
    return getattr(torch, cfg["surrogate"].get("dtype", "float64"))
