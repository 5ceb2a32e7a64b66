"""End-to-end workflow steps behind the command-line interface.

Every step reads and writes plain files under an output directory and
records a JSON manifest listing its items with SHA-256 digests. Per-sample
work (generation, upscaling, simulation, ensemble forwards) runs through
:func:`parallel_map`, whose result order never depends on the worker count.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import config as C
from .esmda import (
    EsmdaConfig, ObservationSet, data_mismatch, esmda_run, observation_std, write_ensemble, write_observations,
)
from .evaluation import (
    ErrorReport, ensemble_percentiles, lf_projection_error, pressure_error, rate_error, saturation_error,
    training_cost, write_report,
)
from .fileio import file_digest, read_json, write_csv, write_json
from .geomodel import (
    FineGeomodel, decode, fit_pca, generate_realization, read_geomodel, read_pca, write_geomodel, write_pca,
)
from .selection import response_features, select_representatives, write_selection, read_selection
from .simulator import rates_from_fields, read_sim_result, simulate, write_sim_result
from .surrogate import (
    HF, LF, PRESSURE, SATURATION, Architecture, RUNet, TrainConfig, load_checkpoint, make_training_set,
    predict, save_checkpoint, train_reference, train_step1_lf, train_step2_transfer, train_step3_finetune,
    well_block_indices,
)
from .upscaler import read_coarse_model, upscale, write_coarse_model

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ plumbing

def parallel_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map; ``jobs > 1`` uses a process pool."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def sample_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def write_manifest(directory: Path, kind: str, items: list[dict], cfg: Mapping, **extra) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.json"
    write_json(path, {"kind": kind, "items": items, **extra})
    write_json(directory / "config.resolved.json", cfg)
    return path


def read_manifest(path: str | Path) -> tuple[Path, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return path.parent, read_json(path)


# ------------------------------------------------------------------ generate

def _generate_task(args):
    cfg, seed, path = args
    model = generate_realization(C.build_prior(cfg), C.build_grid(cfg), seed, C.build_rock(cfg))
    write_geomodel(path, model)
    return file_digest(path)


def cmd_generate(cfg: Mapping, count: int, seed: int, out: str | Path, jobs: int = 1, prefix: str = "m") -> Path:
    """Draw ``count`` channelized realizations; sample ``i`` uses a seed derived from ``(seed, i)``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [sample_seed(seed, i) for i in range(count)]
    ids = [f"{prefix}{i:05d}" for i in range(count)]
    digests = parallel_map(_generate_task, [(cfg, s, out / f"{i}.bin") for s, i in zip(seeds, ids)], jobs)
    items = [{"id": i, "file": f"{i}.bin", "seed": s, "sha256": d} for i, s, d in zip(ids, seeds, digests)]
    return write_manifest(out, "geomodels", items, cfg, seed=seed)


# ------------------------------------------------------------------ upscale

def _upscale_task(args):
    cfg, src, dst, r = args
    cm = upscale(read_geomodel(src), C.build_wells(cfg), r)
    write_coarse_model(dst, cm)
    return file_digest(dst), int(cm.n_face_anomalies), int(len(cm.well_anomalies))


def cmd_upscale(cfg: Mapping, manifest: str | Path, out: str | Path, jobs: int = 1,
                ratios: Sequence[int] | None = None) -> Path:
    src_dir, man = read_manifest(manifest)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    r = tuple(ratios) if ratios is not None else C.ratios(cfg)
    tasks = [(cfg, src_dir / it["file"], out / f"{it['id']}.bin", r) for it in man["items"]]
    res = parallel_map(_upscale_task, tasks, jobs)
    items = [{"id": it["id"], "file": f"{it['id']}.bin", "sha256": d, "face_anomalies": fa, "well_anomalies": wa}
             for it, (d, fa, wa) in zip(man["items"], res)]
    return write_manifest(out, "coarse_models", items, cfg, ratios=list(r), source=os.path.relpath(src_dir, out))


# ------------------------------------------------------------------ simulate

def _simulate_task(args):
    cfg, src, dst, fidelity = args
    model = read_geomodel(src) if fidelity == HF else read_coarse_model(src)
    t0 = time.perf_counter()
    res = simulate(model, C.build_fluids(cfg), C.build_wells(cfg), C.build_schedule(cfg))
    # wall time is kept out of the file so reruns are byte-identical
    write_sim_result(dst, res)
    return file_digest(dst), time.perf_counter() - t0, int(res.log["n_steps"])


def cmd_simulate(cfg: Mapping, manifest: str | Path, fidelity: str, out: str | Path, jobs: int = 1,
                 ids: Iterable[str] | None = None) -> Path:
    """Simulate every model in a geomodel (HF) or coarse-model (LF) manifest, or the subset ``ids``."""
    if fidelity not in (HF, LF):
        raise ValueError(f"fidelity must be {HF!r} or {LF!r}")
    src_dir, man = read_manifest(manifest)
    expected = "geomodels" if fidelity == HF else "coarse_models"
    if man["kind"] != expected:
        raise ValueError(f"{fidelity} simulation needs a {expected} manifest, got {man['kind']}")
    items = man["items"]
    if ids is not None:
        wanted = set(ids)
        items = [it for it in items if it["id"] in wanted]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, src_dir / it["file"], out / f"{it['id']}.bin", fidelity) for it in items]
    res = parallel_map(_simulate_task, tasks, jobs)
    entries = [{"id": it["id"], "file": f"{it['id']}.bin", "sha256": d, "steps": n}
               for it, (d, _, n) in zip(items, res)]
    timing = {it["id"]: t for it, (_, t, _) in zip(items, res)}
    write_json(out / "timing.json", timing)
    return write_manifest(out, "simulations", entries, cfg, fidelity=fidelity, source=os.path.relpath(src_dir, out))


def load_simulations(manifest: str | Path, ids: Sequence[str] | None = None):
    d, man = read_manifest(manifest)
    items = {it["id"]: it for it in man["items"]}
    order = list(ids) if ids is not None else list(items)
    return [read_sim_result(d / items[i]["file"]) for i in order]


def load_facies(manifest: str | Path, ids: Sequence[str] | None = None) -> np.ndarray:
    d, man = read_manifest(manifest)
    items = {it["id"]: it for it in man["items"]}
    order = list(ids) if ids is not None else list(items)
    return np.stack([read_geomodel(d / items[i]["file"]).facies for i in order]).astype(np.float64)


# ------------------------------------------------------------------ select

def cmd_select(cfg: Mapping, lf_manifest: str | Path, n_select: int, seed: int, out: str | Path) -> Path:
    """Cluster LF rate responses and write the medoid sample ids to ``out`` (CSV)."""
    _, man = read_manifest(lf_manifest)
    ids = [it["id"] for it in man["items"]]
    sims = load_simulations(lf_manifest, ids)
    feats = response_features(np.stack([s.rate_matrix() for s in sims]))
    sc = cfg["selection"]
    sel = select_representatives(feats, n_select, seed, max_retries=sc["max_retries"], n_init=sc["n_init"],
                                 max_iter=sc["max_iter"])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_selection(out, sel, ids)
    return out


def selected_ids(path: str | Path) -> list[str]:
    return [r["sample_id"] for r in read_selection(path)]


# ------------------------------------------------------------------ train

@dataclass
class TrainingData:
    facies_lf: np.ndarray | None
    lf_sims: list | None
    facies_hf: np.ndarray
    hf_sims: list


def _sets(cfg: Mapping, facies, sims, fidelity: str, kind: str):
    wells = C.build_wells(cfg)
    grid = C.build_grid(cfg)
    sc = cfg["surrogate"]
    if fidelity == LF:
        cells = well_block_indices(wells, grid.shape, C.ratios(cfg))
        lam = sc["lambda_lf"]
    else:
        cells = well_block_indices(wells, grid.shape)
        lam = sc["lambda_hf"]
    fields = np.stack([s.pressure if kind == PRESSURE else s.saturation for s in sims])
    return make_training_set(facies, fields, fidelity, kind, cells, lam, C.bhp_bounds(cfg))


def architecture(cfg: Mapping) -> Architecture:
    sc = cfg["surrogate"]
    return Architecture(C.build_grid(cfg).shape, C.ratios(cfg), sc["n_t"], tuple(sc["widths"]))


def _tc(cfg: Mapping, step: str, seed: int, holdout: float = 0.0) -> TrainConfig:
    sc = cfg["surrogate"]
    return TrainConfig(int(sc[step]["epochs"]), float(sc[step]["lr"]), int(sc["batch"]), seed, holdout)


def train_multifidelity(cfg: Mapping, data: TrainingData, kind: str, seed: int, out: Path | None = None,
                        resume: bool = False) -> tuple[RUNet, dict]:
    """Steps 1-3 for one quantity; checkpoints go to ``out/<kind>/step{1,2,3}``."""
    torch.manual_seed(seed)
    net = RUNet(architecture(cfg), seed, C.torch_dtype(cfg))
    logs = {}
    ck = (lambda s: out / kind / s) if out is not None else None
    if resume and ck is not None and (ck("step1") / "manifest.json").exists():
        net, _ = load_checkpoint(ck("step1"))
        logs["step1"] = "resumed"
    else:
        lf_set = _sets(cfg, data.facies_lf, data.lf_sims, LF, kind)
        logs["step1"] = train_step1_lf(net, lf_set, _tc(cfg, "step1", seed, cfg["surrogate"]["holdout"])).__dict__
        if ck:
            save_checkpoint(net, ck("step1"), 1, kind)
    hf_set = _sets(cfg, data.facies_hf, data.hf_sims, HF, kind)
    logs["step2"] = train_step2_transfer(net, hf_set, _tc(cfg, "step2", seed)).__dict__
    if ck:
        save_checkpoint(net, ck("step2"), 2, kind)
    logs["step3"] = train_step3_finetune(net, hf_set, _tc(cfg, "step3", seed)).__dict__
    if ck:
        save_checkpoint(net, ck("step3"), 3, kind)
    return net, logs


def train_hf_reference(cfg: Mapping, facies: np.ndarray, sims: list, kind: str, seed: int,
                       out: Path | None = None) -> tuple[RUNet, dict]:
    torch.manual_seed(seed)
    net = RUNet(architecture(cfg), seed, C.torch_dtype(cfg))
    hf_set = _sets(cfg, facies, sims, HF, kind)
    rec = train_reference(net, hf_set, _tc(cfg, "reference", seed, cfg["surrogate"]["holdout"]))
    if out is not None:
        save_checkpoint(net, out / kind / "reference", "reference", kind)
    return net, {"reference": rec.__dict__}


def cmd_train(cfg: Mapping, geomodels: str | Path, hf_sims: str | Path, out: str | Path, seed: int,
              lf_sims: str | Path | None = None, selection: str | Path | None = None,
              mode: str = "multi", resume: bool = False) -> Path:
    """Train pressure and saturation networks.

    ``mode="multi"``: Step 1 on every LF simulation, Steps 2-3 on the HF
    simulations of the selected ids (all HF simulations if no selection).
    ``mode="reference"``: HF-only training on every HF simulation.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _, hf_man = read_manifest(hf_sims)
    hf_ids = [it["id"] for it in hf_man["items"]]
    if selection is not None:
        chosen = set(selected_ids(selection))
        hf_ids = [i for i in hf_ids if i in chosen]
        if len(hf_ids) != len(chosen):
            raise ValueError("some selected samples have no HF simulation")
    summary = {"mode": mode, "seed": seed, "hf_ids": hf_ids, "logs": {}}
    for kind in cfg["surrogate"]["kinds"]:
        if mode == "multi":
            if lf_sims is None:
                raise ValueError("multifidelity training needs LF simulations")
            _, lf_man = read_manifest(lf_sims)
            lf_ids = [it["id"] for it in lf_man["items"]]
            data = TrainingData(load_facies(geomodels, lf_ids), load_simulations(lf_sims, lf_ids),
                                load_facies(geomodels, hf_ids), load_simulations(hf_sims, hf_ids))
            _, logs = train_multifidelity(cfg, data, kind, seed, out, resume)
        elif mode == "reference":
            _, logs = train_hf_reference(cfg, load_facies(geomodels, hf_ids), load_simulations(hf_sims, hf_ids),
                                         kind, seed, out)
        else:
            raise ValueError(f"mode must be 'multi' or 'reference', got {mode!r}")
        summary["logs"][kind] = logs
    write_json(out / "training.json", summary)
    write_json(out / "config.resolved.json", cfg)
    return out


# ------------------------------------------------------------------ evaluate

def surrogate_rates(cfg: Mapping, facies: np.ndarray, pressure: np.ndarray, saturation: np.ndarray) -> dict:
    """Well rates implied by predicted fields through the fine-grid well model."""
    model = FineGeomodel(C.build_grid(cfg), facies.astype(np.uint8), C.build_rock(cfg))
    return rates_from_fields(pressure, saturation, model, C.build_wells(cfg), C.build_fluids(cfg))


def evaluate_predictions(cfg: Mapping, label: str, pressure: np.ndarray, saturation: np.ndarray,
                         truth: list, facies: np.ndarray | None = None, rates: list | None = None) -> ErrorReport:
    p_min, p_max = C.bhp_bounds(cfg)
    dp = np.array([pressure_error(p, t.pressure, p_min, p_max) for p, t in zip(pressure, truth)])
    ds = np.array([saturation_error(s, t.saturation) for s, t in zip(saturation, truth)])
    dr = None
    if rates is None and facies is not None:
        rates = [surrogate_rates(cfg, f, p, s) for f, p, s in zip(facies, pressure, saturation)]
    if rates is not None:
        kinds = {w.name: w.kind for w in C.build_wells(cfg)}
        dr = np.array([rate_error(r, t.rates, t.snapshot_days, kinds).value for r, t in zip(rates, truth)])
    return ErrorReport(label, dp, ds, dr)


def lf_projection_report(cfg: Mapping, lf: list, truth: list) -> ErrorReport:
    p_min, p_max = C.bhp_bounds(cfg)
    r = C.ratios(cfg)
    errs = [lf_projection_error(a.pressure, a.saturation, t.pressure, t.saturation, r, p_min, p_max)
            for a, t in zip(lf, truth)]
    kinds = {w.name: w.kind for w in C.build_wells(cfg)}
    dr = np.array([rate_error(a.rates, t.rates, t.snapshot_days, kinds).value for a, t in zip(lf, truth)])
    return ErrorReport("lf_sim", np.array([e[0] for e in errs]), np.array([e[1] for e in errs]), dr)


def predict_fields(cfg: Mapping, nets: Mapping[str, RUNet], facies: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bounds = C.bhp_bounds(cfg)
    return (predict(nets[PRESSURE], facies, HF, PRESSURE, bounds),
            predict(nets[SATURATION], facies, HF, SATURATION))


def cmd_evaluate(cfg: Mapping, checkpoints: Mapping[str, str | Path], geomodels: str | Path,
                 hf_sims: str | Path, out: str | Path, lf_sims: str | Path | None = None) -> Path:
    """Error reports for each checkpoint set (label -> directory holding
    ``pressure/<step>`` and ``saturation/<step>``) and, optionally, the LF projection."""
    _, man = read_manifest(hf_sims)
    ids = [it["id"] for it in man["items"]]
    truth = load_simulations(hf_sims, ids)
    facies = load_facies(geomodels, ids)
    reports = []
    for label, directory in checkpoints.items():
        nets ={k: find_checkpoint(Path(directory), k) for k in (PRESSURE, SATURATION)}
        p, s = predict_fields(cfg, nets, facies)
        reports.append(evaluate_predictions(cfg, label, p, s, truth, facies))
    if lf_sims is not None:
        reports.append(lf_projection_report(cfg, load_simulations(lf_sims, ids), truth))
    write_report(out, reports, ids)
    return Path(out)


def find_checkpoint(directory: Path, kind: str) -> RUNet:
    """Most refined checkpoint for ``kind``: step 3, then reference, then step 2."""
    for step in ("step3", "reference", "step2"):
        d = directory / kind / step
        if (d / "manifest.json").exists():
            return load_checkpoint(d)[0]
    raise FileNotFoundError(f"no trained {kind} checkpoint under {directory}")


# ------------------------------------------------------------------ history matching

class LatentForward:
    """Picklable map from a latent vector to observed well data.

    ``mode`` is ``"lf"`` (decode, upscale, coarse simulation), ``"hf"``
    (decode, fine simulation) or ``"surrogate"`` (decode, network fields,
    well model on the fine grid).
    """

    def __init__(self, cfg: Mapping, pca, mode: str, checkpoints: str | Path | None = None):
        self.cfg = dict(cfg)
        self.pca = pca
        self.mode = mode
        hm = cfg["history_match"]
        self.days = [float(d) for d in hm["obs_days"]]
        self.phases = list(hm["obs_phases"])
        self.producers = [w.name for w in C.build_wells(cfg) if w.kind == "producer"]
        self.checkpoints = checkpoints
        self._nets = None
        if mode not in ("lf", "hf", "surrogate"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "surrogate" and checkpoints is None:
            raise ValueError("surrogate forward needs checkpoints")

    def descriptors(self) -> list[tuple[str, str, float]]:
        return [(w, p, d) for w in self.producers for p in self.phases for d in self.days]

    def rates(self, xi: np.ndarray) -> tuple[dict, np.ndarray]:
        cfg = self.cfg
        model = decode(self.pca, np.asarray(xi, dtype=np.float64))
        wells = C.build_wells(cfg)
        if self.mode == "surrogate":
            if self._nets is None:
                self._nets = {k: find_checkpoint(Path(self.checkpoints), k) for k in (PRESSURE, SATURATION)}
            p, s = predict_fields(cfg, self._nets, model.facies[None].astype(np.float64))
            rates = rates_from_fields(p[0], s[0], model, wells, C.build_fluids(cfg))
            days = C.build_schedule(cfg).snapshot_days
        else:
            sched = C.build_schedule(cfg, until=max(self.days))
            target = upscale(model, wells, C.ratios(cfg)) if self.mode == "lf" else model
            res = simulate(target, C.build_fluids(cfg), wells, sched)
            rates, days = res.rates, res.snapshot_days
        return rates, np.asarray(days)

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        rates, days = self.rates(xi)
        idx = [int(np.argmin(np.abs(days - d))) for d in self.days]
        return np.array([rates[w][p][i] for w in self.producers for p in self.phases for i in idx])


def _pca(cfg: Mapping, out: Path, jobs: int):
    path = out / "pca.bin"
    if path.exists():
        return read_pca(path)
    pc = cfg["pca"]
    prior, grid, rock = C.build_prior(cfg), C.build_grid(cfg), C.build_rock(cfg)
    models = [generate_realization(prior, grid, sample_seed(pc["seed"], i), rock) for i in range(pc["n_fit"])]
    param = fit_pca(models, int(pc["n_latent"]), conditioning=prior.conditioning)
    write_pca(path, param)
    return param


class _PoolMapper:
    def __init__(self, jobs: int):
        self.jobs = jobs

    def __call__(self, fn, items):
        return parallel_map(fn, list(items), self.jobs)


def cmd_history_match(cfg: Mapping, out: str | Path, seed: int, jobs: int = 1,
                      checkpoints: str | Path | None = None, forward: str | None = None) -> dict:
    """Synthetic-truth ESMDA over the PCA latent space.

    Observations are the forward response of a truth latent vector plus
    Gaussian noise with std ``noise_fraction * value`` (floored). Writes
    prior/posterior ensembles, observations, predicted-data percentiles and
    a JSON summary with prior and posterior data mismatch.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    hm = cfg["history_match"]
    pca = _pca(cfg, out, jobs)
    fwd = LatentForward(cfg, pca, forward or hm["forward"], checkpoints)
    rng = np.random.default_rng([seed, 1])
    xi_true = np.random.default_rng([hm["truth_seed"], 0]).standard_normal(pca.n_latent)
    d_true = fwd(xi_true)
    std = observation_std(d_true, hm["noise_fraction"], hm["noise_floor"])
    d_obs = d_true + std * rng.standard_normal(len(d_true))
    obs = ObservationSet(d_obs, std, fwd.descriptors())
    n = int(hm["n_ensemble"])
    prior = np.random.default_rng([seed, 2]).standard_normal((n, pca.n_latent))
    ecfg = EsmdaConfig(tuple(hm["alphas"]), n, hm["noise_fraction"], hm["noise_floor"], seed)
    resample = _Resampler(seed, pca.n_latent)
    res = esmda_run(prior, fwd, obs, ecfg, mapper=_PoolMapper(jobs), resample=resample)
    write_ensemble(out / "prior.bin", res.ensembles[0], {"stage": "prior"})
    write_ensemble(out / "posterior.bin", res.posterior, {"stage": "posterior"})
    write_ensemble(out / "truth.bin", xi_true[None], {"stage": "truth"})
    write_observations(out / "observations.csv", obs)
    rows = []
    for stage, D in (("prior", res.predictions[0]), ("posterior", res.predictions[-1])):
        q = ensemble_percentiles(D, (10, 50, 90))
        for j, (w, p, d) in enumerate(obs.descriptors):
            rows.append((stage, w, p, d, float(q[0, j]), float(q[1, j]), float(q[2, j]), float(obs.values[j])))
    write_csv(out / "predictions.csv", ("stage", "well", "phase", "day", "p10", "p50", "p90", "observed"), rows)
    m_prior = data_mismatch(res.predictions[0], obs)
    m_post = data_mismatch(res.predictions[-1], obs)
    summary = {"forward": fwd.mode, "n_ensemble": n, "n_data": len(obs), "alphas": list(ecfg.alphas),
               "median_mismatch_prior": float(np.median(m_prior)),
               "median_mismatch_posterior": float(np.median(m_post)),
               "resampled": res.resampled}
    n_check = int(hm.get("posterior_check", 0))
    if n_check > 0 and len(ecfg.alphas) > 0:
        summary["posterior_check"] = _posterior_check(cfg, pca, res.posterior[:n_check], fwd, obs, jobs)
    write_json(out / "summary.json", summary)
    write_json(out / "config.resolved.json", cfg)
    return summary


class _Resampler:
    def __init__(self, seed: int, n: int):
        self.seed, self.n = seed, n

    def __call__(self, member: int, iteration: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 3, member, iteration]).standard_normal(self.n)


def _posterior_check(cfg, pca, members, fwd: LatentForward, obs: ObservationSet, jobs: int) -> dict:
    """Fine-grid simulation of a few posterior members compared with their forward data."""
    hf = LatentForward(cfg, pca, "hf")
    d_hf = np.array(parallel_map(hf, list(members), jobs))
    d_fwd = np.array(parallel_map(fwd, list(members), jobs))
    return {"members": int(len(members)),
            "median_mismatch_hf": float(np.median(data_mismatch(d_hf, obs))),
            "median_mismatch_forward": float(np.median(data_mismatch(d_fwd, obs)))}


# ------------------------------------------------------------------ cost

def cmd_cost(cfg: Mapping, out: str | Path | None = None, n_lf: int | None = None,
             n_hf: int | None = None) -> dict:
    grid = C.build_grid(cfg)
    r = C.ratios(cfg)
    cell_ratio = 1.0 / (r[0] * r[1] * r[2])
    data = cfg["data"]
    cost = training_cost(data["n_lf"] if n_lf is None else n_lf, data["n_hf"] if n_hf is None else n_hf,
                         cell_ratio, cfg["cost"]["solves_per_run"], cfg["cost"]["unknowns_per_cell"])
    result = {**cost.to_dict(), "cell_ratio": cell_ratio, "fine_cells": grid.n_cells}
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(Path(out) / "cost.json", result)
    return result


# ------------------------------------------------------------------ datasets

def _step(manifest: Path, fn: Callable, *args, **kw) -> Path:
    if manifest.exists():
        return manifest
    return fn(*args, **kw)


def prepare_dataset(cfg: Mapping, root: str | Path, jobs: int = 1) -> dict[str, Path]:
    """Training and test sets with HF and LF simulations of every model.

    Layout under ``root``: ``{train,test}/{models,coarse,hf,lf}``. Steps
    whose manifest already exists are skipped, so an interrupted build
    resumes where it stopped.
    """
    root = Path(root)
    d = cfg["data"]
    paths = {}
    for split, n, seed, prefix in (("train", d["n_lf"], d["train_seed"], "m"),
                                   ("test", d["n_test"], d["test_seed"], "t")):
        base = root / split
        _step(base / "models" / "manifest.json", cmd_generate, cfg, n, seed, base / "models", jobs, prefix)
        _step(base / "coarse" / "manifest.json", cmd_upscale, cfg, base / "models", base / "coarse", jobs)
        _step(base / "lf" / "manifest.json", cmd_simulate, cfg, base / "coarse", LF, base / "lf", jobs)
        _step(base / "hf" / "manifest.json", cmd_simulate, cfg, base / "models", HF, base / "hf", jobs)
        paths.update({f"{split}_{k}": base / k for k in ("models", "coarse", "lf", "hf")})
    return paths


def config_digest(cfg: Mapping, keys: Sequence[str] = ("grid", "rock", "prior", "wells", "fluids", "schedule",
                                                       "upscale", "data")) -> str:
    """Short hash of the config sections that determine simulated data."""
    blob = json.dumps({k: cfg.get(k) for k in keys}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
