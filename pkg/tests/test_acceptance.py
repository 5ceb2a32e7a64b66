"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line.

The desk pipeline test (criterion 6) simulates 240 HF and LF models and trains
four networks per seed. Simulations and trained checkpoints are cached under
``$MFSURROGATE_CACHE`` (default ``<repo>/.cache``), keyed by a digest of the
config sections that produce them, so a rerun only repeats the evaluation.
Set ``MFSURROGATE_CACHE`` to an empty directory to rebuild from scratch.
"""
import os
import time
from pathlib import Path

import numpy as np
import torch

from mfsurrogate import config as C
from mfsurrogate import pipeline as P
from mfsurrogate.autodiff import (
    batch_norm, conv3d, conv_lstm, deconv3d, finite_difference_check, init_batch_norm, init_conv, load_tensors,
    save_tensors,
)
from mfsurrogate.discretization import WellSpec
from mfsurrogate.esmda import (
    DEFAULT_ALPHAS, ObservationSet, check_alphas, read_ensemble, read_observations, write_ensemble,
    write_observations,
)
from mfsurrogate.evaluation import training_cost
from mfsurrogate.fileio import file_digest
from mfsurrogate.geomodel import (
    FineGeomodel, Grid, RockMap, fit_pca, generate_realization, read_geomodel, read_pca, write_geomodel, write_pca,
)
from mfsurrogate.selection import read_selection, select_representatives, write_selection
from mfsurrogate.simulator import FluidProps, Schedule, read_sim_result, simulate, write_sim_result
from mfsurrogate.surrogate import (
    HF, LF, PRESSURE, SATURATION, SHARED, Architecture, RUNet, TrainConfig, TrainingSet, load_checkpoint,
    save_checkpoint, train_step1_lf, train_step2_transfer, train_step3_finetune, well_block_indices,
)
from mfsurrogate.upscaler import read_coarse_model, solve_single_phase, upscale, write_coarse_model
from oracles import coarse_transmissibility_oracle, linear_gaussian_trial, random_upscaling_cases, run_buckley_leverett

CACHE = Path(os.environ.get("MFSURROGATE_CACHE", Path(__file__).resolve().parents[1] / ".cache"))
D = torch.float64


def _line_drive(grid, inj=330.0, prod=310.0):
    return ([WellSpec(f"I{j}", "injector", 0, j, (1, grid.nz), inj) for j in range(grid.ny)]
            + [WellSpec(f"P{j}", "producer", grid.nx - 1, j, (1, grid.nz), prod) for j in range(grid.ny)])


# ------------------------------------------------------------------ 1

def test_c01_upscaling_exact_on_homogeneous_model(acceptance_report):
    t0 = time.perf_counter()
    grid = Grid(16, 16, 8, 20.0, 20.0, 2.0)
    m = FineGeomodel(grid, np.ones(grid.shape, np.uint8), RockMap(0.2, 0.2, 100.0, 100.0))
    wells = _line_drive(grid)
    cm = upscale(m, wells, (2, 2, 2))
    d = (40.0, 40.0, 4.0)
    t_err = 0.0
    for t, axis in ((cm.tx, 0), (cm.ty, 1), (cm.tz, 2)):
        analytic = 100.0 * d[0] * d[1] * d[2] / d[axis] ** 2
        t_err = max(t_err, float(np.max(np.abs(t - analytic) / analytic)))
    fine = solve_single_phase(m, wells).total_rates()
    coarse = solve_single_phase(cm, wells).total_rates()
    q_err = max(abs(coarse[w] - fine[w]) / abs(fine[w]) for w in fine)
    elapsed = time.perf_counter() - t0
    ok = t_err < 1e-8 and q_err < 1e-6 and elapsed < 10
    acceptance_report("1", "homogeneous upscaling", ok,
                      f"T rel err {t_err:.1e}, rate rel err {q_err:.1e}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 2

def test_c02_upscaling_matches_brute_force_oracle(acceptance_report):
    t0 = time.perf_counter()
    cases, wells = random_upscaling_cases(20)
    worst, flags_ok = 0.0, True
    for m in cases:
        cm = upscale(m, wells, (2, 2, 2))
        oracle = coarse_transmissibility_oracle(m, wells, (2, 2, 2))
        for (t, f), ours, flags in zip(oracle, (cm.tx, cm.ty, cm.tz), (cm.anomaly_x, cm.anomaly_y, cm.anomaly_z)):
            flags_ok &= bool(np.array_equal(f, flags))
            worst = max(worst, float(np.max(np.abs(ours - t) / np.abs(t))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and flags_ok and elapsed < 120
    acceptance_report("2", "heterogeneous upscaling oracle", ok,
                      f"max rel err {worst:.1e}, flags agree {flags_ok}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 3

def test_c03_simulator_front_and_mass_balance(acceptance_report):
    t0 = time.perf_counter()
    num, ana, pvi, r = run_buckley_leverett(nx=200)
    residuals = [max(r.log["mass_residual"])]
    # regression cases: compressible 3-D model with gravity, and its coarse counterpart
    grid = Grid(8, 8, 4, 30.0, 30.0, 3.0)
    fac = (np.random.default_rng(4).random(grid.shape) < 0.5).astype(np.uint8)
    m = FineGeomodel(grid, fac)
    wells = [WellSpec("I", "injector", 0, 0, (1, 4), 330.0), WellSpec("P", "producer", 7, 7, (1, 4), 310.0)]
    sched = Schedule(total_time=300.0, snapshot_days=(100.0, 300.0))
    for model in (m, upscale(m, wells, (2, 2, 2))):
        residuals.append(max(simulate(model, FluidProps(), wells, sched).log["mass_residual"]))
    elapsed = time.perf_counter() - t0
    ok = abs(num - ana) < 1.5 and abs(pvi - 0.5) < 0.01 and max(residuals) < 1e-6 and elapsed < 60
    acceptance_report("3", "simulator physics", ok,
                      f"front error {abs(num - ana):.2f} cells at {pvi:.3f} PVI, "
                      f"max mass residual {max(residuals):.1e}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 4

def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _rand(*shape, seed):
    return torch.randn(*shape, generator=_gen(seed), dtype=D)


def _req(params):
    return [t.requires_grad_() for t in params.tensors().values()]


def test_c04_gradient_checks(acceptance_report):
    t0 = time.perf_counter()
    errs = {}
    x = _rand(2, 2, 4, 4, 4, seed=1).requires_grad_()
    p = init_conv(2, 3, _gen(2))
    p.bias.copy_(_rand(3, seed=3))
    w = _rand(2, 3, 4, 4, 4, seed=4)
    errs["conv3d"] = finite_difference_check(lambda: torch.sum(w * torch.tanh(conv3d(x, p))), [x] + _req(p))
    q = init_conv(2, 3, _gen(5))
    q.bias.copy_(_rand(3, seed=6))
    w2 = _rand(2, 3, 8, 8, 8, seed=7)
    errs["deconv3d"] = finite_difference_check(lambda: torch.sum(w2 * torch.tanh(deconv3d(x, q, 2))),
                                               [x] + _req(q))
    bn = init_batch_norm(2)
    bn.gamma.copy_(1.0 + 0.1 * _rand(2, seed=8))
    w3 = _rand(2, 2, 4, 4, 4, seed=9)
    errs["batch_norm"] = finite_difference_check(lambda: torch.sum(w3 * batch_norm(x, bn, train=True) ** 2),
                                                 [x, bn.gamma.requires_grad_(), bn.beta.requires_grad_()])
    xl = _rand(1, 2, 2, 2, 2, seed=10).requires_grad_()
    lp = init_conv(5, 12, _gen(11))
    lp.bias.copy_(0.1 * _rand(12, seed=12))
    w4, w5 = _rand(1, 3, 2, 2, 2, seed=13), _rand(1, 3, 2, 2, 2, seed=14)

    def lstm_loss():
        h1, h2 = conv_lstm([xl, 0.5 * xl], lp, 3)
        return torch.sum(w4 * h1) + torch.sum(w5 * h2)
    errs["conv_lstm"] = finite_difference_check(lstm_loss, [xl] + _req(lp))
    arch = Architecture((4, 4, 4), (2, 2, 2), n_t=2, widths=(2, 2, 2, 2))
    net = RUNet(arch, seed=3)
    m = torch.as_tensor((np.random.default_rng(1).random((2, 4, 4, 4)) < 0.4).astype(float))
    w6 = _rand(2, 2, 4, 4, 4, seed=15)
    params = [v.requires_grad_() for k, v in net.params.items() if not k.startswith("out_lf")]
    errs["runet_hf"] = finite_difference_check(lambda: torch.sum(w6 * net.forward(m, HF, train=True)), params,
                                               max_entries=6, rng=np.random.default_rng(0))
    lf_params = [v.requires_grad_() for k, v in net.params.items() if not k.startswith("out_hf")]
    w7 = _rand(2, 2, 2, 2, 2, seed=16)
    errs["runet_lf"] = finite_difference_check(lambda: torch.sum(w7 * net.forward(m, LF, train=True)),
                                               lf_params, max_entries=6, rng=np.random.default_rng(1))
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and elapsed < 300
    acceptance_report("4", "autodiff gradient checks", ok,
                      ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 5

def test_c05_freeze_contract(acceptance_report):
    arch = Architecture((8, 8, 4), (2, 2, 2), n_t=3, widths=(2, 3, 3, 4))
    rng = np.random.default_rng(0)
    x = (rng.random((6, 8, 8, 4)) < 0.4).astype(float)
    hf = np.stack([x * (t + 1) / 4 for t in range(3)], 1)
    lf = hf.reshape(6, 3, 4, 2, 4, 2, 2, 2).mean(axis=(3, 5, 7))
    wells = [WellSpec("I1", "injector", 1, 1, (1, 4), 330.0), WellSpec("P1", "producer", 6, 6, (1, 4), 310.0)]
    lf_set = TrainingSet(x, lf, LF, SATURATION, well_block_indices(wells, arch.fine_shape, (2, 2, 2)), 20.0)
    hf_set = TrainingSet(x, hf, HF, SATURATION, well_block_indices(wells, arch.fine_shape), 1000.0)
    net = RUNet(arch, seed=0)
    train_step1_lf(net, lf_set, TrainConfig(5, 0.003))
    after1 = {k: v.clone() for k, v in net.state().items() if k.split(".")[0] in SHARED}
    train_step2_transfer(net, hf_set, TrainConfig(5, 0.003))
    same = all(torch.equal(v, net.state()[k]) for k, v in after1.items())
    train_step3_finetune(net, hf_set, TrainConfig(2, 0.001))
    differs = any(not torch.equal(v, net.state()[k]) for k, v in after1.items())
    ok = same and differs
    acceptance_report("5", "transfer-learning freeze contract", ok,
                      f"identical after step 2 {same}, changed after step 3 {differs}")
    assert ok


# ------------------------------------------------------------------ 6

def _desk_runs(cfg, seed, data, run_root):
    """Select, train multifidelity and reference networks for one seed (cached)."""
    out = run_root / f"seed{seed}"
    sel = out / "selection.csv"
    if not sel.exists():
        P.cmd_select(cfg, data["train_lf"], cfg["data"]["n_hf"], seed, sel)
    if not (out / "multi" / "training.json").exists():
        P.cmd_train(cfg, data["train_models"], data["train_hf"], out / "multi", seed, lf_sims=data["train_lf"],
                    selection=sel, mode="multi", resume=True)
    if not (out / "reference" / "training.json").exists():
        P.cmd_train(cfg, data["train_models"], data["train_hf"], out / "reference", seed, mode="reference")
    return out


def test_c06_desk_pipeline_ordering(acceptance_report):
    t0 = time.perf_counter()
    cfg = C.load_config()
    jobs = C.default_jobs()
    root = CACHE / f"desk-{P.config_digest(cfg)}"
    data = P.prepare_dataset(cfg, root, jobs)
    run_root = root / f"runs-{P.config_digest(cfg, ('surrogate', 'selection', 'data', 'upscale'))}"
    _, man = P.read_manifest(data["test_hf"])
    ids = [it["id"] for it in man["items"]]
    truth = P.load_simulations(data["test_hf"], ids)
    facies = P.load_facies(data["test_models"], ids)
    lf_report = P.lf_projection_report(cfg, P.load_simulations(data["test_lf"], ids), truth)
    lf_p, lf_s = float(np.median(lf_report.delta_p)), float(np.median(lf_report.delta_s))
    details, ok = [f"LF projection dp {lf_p:.4f} dS {lf_s:.4f}"], True
    for seed in (0, 1, 2):
        out = _desk_runs(cfg, seed, data, run_root)
        med = {}
        for label in ("multi", "reference"):
            nets = {k: P.find_checkpoint(out / label, k) for k in (PRESSURE, SATURATION)}
            p, s = P.predict_fields(cfg, nets, facies)
            rep = P.evaluate_predictions(cfg, label, p, s, truth)
            med[label] = (float(np.median(rep.delta_p)), float(np.median(rep.delta_s)))
        (mp, ms), (rp, rs) = med["multi"], med["reference"]
        seed_ok = ms < lf_s and mp < lf_p and rp <= 1.5 * mp and rs <= 1.5 * ms
        ok &= seed_ok
        details.append(f"seed {seed}: MF dp {mp:.4f} dS {ms:.4f}, HF-only dp {rp:.4f} dS {rs:.4f}"
                       f" -> {'ok' if seed_ok else 'violated'}")
    details.append(f"{time.perf_counter() - t0:.0f} s")
    acceptance_report("6", "desk pipeline ordering", ok, "; ".join(details))
    assert ok


# ------------------------------------------------------------------ 7

def test_c07_cost_model(acceptance_report):
    cost = training_cost(2500, 200, 1 / 32, 200)
    parts = (round(cost.upscale), round(cost.lf), round(cost.hf))
    ok = cost.total == 284 and parts == (6, 78, 200) and abs(100 * cost.savings - 88.6) <= 0.1
    acceptance_report("7", "cost model", ok, f"{parts[0]} + {parts[1]} + {parts[2]} = {cost.total}, "
                                             f"savings {100 * cost.savings:.2f}%")
    assert ok


# ------------------------------------------------------------------ 8

def test_c08a_alpha_sequence(acceptance_report):
    s = check_alphas(DEFAULT_ALPHAS)
    ok = abs(s - 1.0) <= 1e-3
    acceptance_report("8a", "ESMDA inflation coefficients", ok, f"sum 1/alpha = {s:.6f}")
    assert ok


def test_c08b_linear_gaussian_posterior(acceptance_report):
    t0 = time.perf_counter()
    hits = np.concatenate([linear_gaussian_trial(seed, N=2000) for seed in range(20)])
    frac = float(hits.mean())
    ok = frac >= 0.95
    acceptance_report("8b", "ESMDA linear-Gaussian posterior", ok,
                      f"{100 * frac:.1f}% of {hits.size} components within 3 SE, {time.perf_counter() - t0:.0f} s")
    assert ok


def test_c08c_desk_history_match(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    cfg = C.load_config(overrides={"history_match": {"posterior_check": 0}})
    summary = P.cmd_history_match(cfg, tmp_path, seed=0, jobs=C.default_jobs())
    ratio = summary["median_mismatch_prior"] / summary["median_mismatch_posterior"]
    elapsed = time.perf_counter() - t0
    ok = summary["n_data"] == 20 and summary["n_ensemble"] == 100 and ratio >= 2 and elapsed < 1800
    acceptance_report("8c", "desk history match", ok,
                      f"median mismatch {summary['median_mismatch_prior']:.1f} -> "
                      f"{summary['median_mismatch_posterior']:.2f} ({ratio:.1f}x), {elapsed:.0f} s")
    assert ok


# ------------------------------------------------------------------ 9

def _blobs(k, rng, n_per=15, dim=4):
    centres = rng.normal(0, 10, (k, dim))
    return np.concatenate([c + rng.normal(0, 1, (n_per, dim)) for c in centres])


def _exhaustive_medoid(points):
    best, best_cost = None, np.inf
    for i in range(len(points)):
        cost = sum(np.sqrt(np.sum((points[i] - points[j]) ** 2)) for j in range(len(points)))
        if cost < best_cost - 1e-12:
            best, best_cost = i, cost
    return best


def test_c09_selection_medoids(acceptance_report):
    t0 = time.perf_counter()
    good, total = 0, 0
    for k in (2, 4):
        for trial in range(50):
            X = _blobs(k, np.random.default_rng([k, trial]))
            sel = select_representatives(X, k, seed=trial)
            ok_trial = all(sel.indices[c] == np.flatnonzero(sel.labels == c)[_exhaustive_medoid(
                X[sel.labels == c])] for c in range(k))
            good += ok_trial
            total += 1
    elapsed = time.perf_counter() - t0
    ok = good == total and elapsed < 60
    acceptance_report("9", "selection medoids", ok, f"{good}/{total} trials exact, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------------ 10

def _tree_digest(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): file_digest(p)
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "timing.json"}


def _roundtrips(tmp: Path) -> dict:
    cfg = C.load_config()
    grid = C.build_grid(cfg)
    model = generate_realization(C.build_prior(cfg), grid, 3, C.build_rock(cfg))
    wells = C.build_wells(cfg)
    ok = {}
    write_geomodel(tmp / "g.bin", model)
    back = read_geomodel(tmp / "g.bin")
    write_geomodel(tmp / "g2.bin", back)
    ok["geomodel"] = np.array_equal(back.facies, model.facies) and file_digest(tmp / "g.bin") == file_digest(
        tmp / "g2.bin")
    cm = upscale(model, wells, (4, 4, 2))
    write_coarse_model(tmp / "c.bin", cm)
    cb = read_coarse_model(tmp / "c.bin")
    write_coarse_model(tmp / "c2.bin", cb)
    ok["coarse model"] = (all(np.array_equal(getattr(cm, n), getattr(cb, n)) for n in ("tx", "ty", "tz", "porosity"))
                          and cm.well_indices == cb.well_indices
                          and file_digest(tmp / "c.bin") == file_digest(tmp / "c2.bin"))
    sim = simulate(cb, C.build_fluids(cfg), wells, C.build_schedule(cfg, until=150.0))
    write_sim_result(tmp / "s.bin", sim)
    ok["simulation"] = read_sim_result(tmp / "s.bin") == sim
    pca = fit_pca([generate_realization(C.build_prior(cfg), grid, s) for s in range(6)], 4)
    write_pca(tmp / "p.bin", pca)
    pb = read_pca(tmp / "p.bin")
    ok["pca"] = np.array_equal(pb.basis, pca.basis) and np.array_equal(pb.mean_model, pca.mean_model)
    net = RUNet(Architecture((8, 8, 4), (2, 2, 2), n_t=2, widths=(2, 2, 2, 2)), seed=4)
    save_checkpoint(net, tmp / "ck", 1, SATURATION)
    nb, _ = load_checkpoint(tmp / "ck")
    ok["checkpoint"] = all(torch.equal(v, nb.state()[k]) for k, v in net.state().items())
    X = np.random.default_rng(0).standard_normal((5, 3))
    write_ensemble(tmp / "e.bin", X)
    ok["ensemble"] = np.array_equal(read_ensemble(tmp / "e.bin")[0], X)
    obs = ObservationSet([1.25, 3.5e-7], [0.1, 1.0], [("P1", "water", 150.0), ("P2", "oil", 300.0)])
    write_observations(tmp / "o.csv", obs)
    ob = read_observations(tmp / "o.csv")
    ok["observations"] = (np.array_equal(ob.values, obs.values) and np.array_equal(ob.std, obs.std)
                          and ob.descriptors == obs.descriptors)
    sel = select_representatives(np.random.default_rng(1).standard_normal((12, 3)), 3, seed=0)
    write_selection(tmp / "sel.csv", sel, [f"m{i:05d}" for i in range(12)])
    rows = read_selection(tmp / "sel.csv")
    ok["selection"] = ([r["sample_id"] for r in rows] == [f"m{i:05d}" for i in sel.indices]
                       and [r["inertia"] for r in rows] == list(sel.inertia))
    t = {"a": torch.randn(3, 4, dtype=D)}
    save_tensors(tmp / "t", t)
    ok["tensors"] = torch.equal(load_tensors(tmp / "t")[0]["a"], t["a"])
    return ok


def _workflow(cfg, out: Path, jobs: int) -> None:
    P.cmd_generate(cfg, 4, 7, out / "models", jobs)
    P.cmd_upscale(cfg, out / "models", out / "coarse", jobs)
    P.cmd_simulate(cfg, out / "coarse", LF, out / "lf", jobs)
    P.cmd_select(cfg, out / "lf", 2, 7, out / "sel" / "selection.csv")
    P.cmd_simulate(cfg, out / "models", HF, out / "hf", jobs, ids=P.selected_ids(out / "sel" / "selection.csv"))
    P.cmd_train(cfg, out / "models", out / "hf", out / "train", 7, lf_sims=out / "lf",
                selection=out / "sel" / "selection.csv")
    P.cmd_evaluate(cfg, {"mf": out / "train"}, out / "models", out / "hf", out / "eval", lf_sims=out / "lf")
    P.cmd_history_match(cfg, out / "hm", 7, jobs)
    P.cmd_cost(cfg, out / "cost")


def test_c10_determinism_and_roundtrip(acceptance_report, tmp_path):
    rt = _roundtrips(tmp_path)
    # a miniature end-to-end run: every command, serial twice and in parallel once
    small = C.load_config(overrides={
        "schedule": {"total_time": 300.0, "snapshot_days": [50.0, 100.0, 150.0, 300.0]},
        "surrogate": {"widths": [2, 2, 2, 4], "n_t": 4, "holdout": 0.0, "step1": {"epochs": 1},
                      "step2": {"epochs": 1}, "step3": {"epochs": 1}},
        "pca": {"n_fit": 8, "n_latent": 3},
        "history_match": {"n_ensemble": 4, "alphas": [2.0, 2.0], "posterior_check": 0, "obs_days": [150.0, 300.0]},
    })
    trees = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        _workflow(small, tmp_path / name, jobs)
        trees.append(_tree_digest(tmp_path / name))
    hash_stable = trees[0] == trees[1]
    parallel = trees[0] == trees[2]
    ok = all(rt.values()) and hash_stable and parallel
    bad = [k for k, v in rt.items() if not v]
    failed = f" (failed: {', '.join(bad)})" if bad else ""
    acceptance_report("10", "determinism and round-trip", ok,
                      f"{len(rt) - len(bad)}/{len(rt)} formats round-trip{failed}, {len(trees[0])} files "
                      f"hash-stable {hash_stable}, parallel = serial {parallel}")
    assert ok
