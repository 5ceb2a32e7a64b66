import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfsurrogate.discretization import FlowModel, WellSpec, flow_model, well_index
from mfsurrogate.geomodel import FineGeomodel, Grid, RockMap
from mfsurrogate.simulator import (
    DARCY, FluidProps, Schedule, SimulationError, _linear_solve, _props, _System, initial_state,
    read_sim_result, simulate, well_rates, wellbore_pressures, write_sim_result,
)
from oracles import run_buckley_leverett


def homogeneous(shape, d=(20.0, 20.0, 2.0), perm=100.0, phi=0.2):
    g = Grid(*shape, *d)
    return FineGeomodel(g, np.ones(shape, np.uint8), RockMap(phi, phi, perm, perm))


# ------------------------------------------------------------ fluids, wells

def test_relperm_endpoints_and_monotone():
    fl = FluidProps()
    s = np.linspace(0, 1, 201)
    krw, dkrw, kro, dkro = fl.relperm(s)
    assert fl.relperm(fl.swr)[0] == 0 and fl.relperm(1 - fl.sor)[2] == 0
    assert np.all(np.diff(krw) >= 0) and np.all(np.diff(kro) <= 0)
    assert krw.min() >= 0 and krw.max() <= 1 and kro.max() <= 1
    h = 1e-7
    mid = s[(s > fl.swr + 0.01) & (s < 1 - fl.sor - 0.01)]
    fd = (fl.relperm(mid + h)[0] - fl.relperm(mid - h)[0]) / (2 * h)
    assert np.allclose(fl.relperm(mid)[1], fd, rtol=1e-6)


def test_oil_viscosity_reference_point():
    assert FluidProps().mu_o(325.0) == pytest.approx(1.14)
    assert FluidProps().mu_o(335.0) < 1.14


def test_fluid_props_validation():
    with pytest.raises(ValueError):
        FluidProps(mu_w=0.0)
    with pytest.raises(ValueError):
        FluidProps(swr=0.6, sor=0.5)


def test_well_index_values():
    assert float(well_index(100.0, 2.0, 5 * math.e, 1.0)) == pytest.approx(2 * math.pi * 100 * 2)
    expect = 2 * math.pi * 100 * 2 / math.log(0.2 * 20 / 0.1)
    assert float(well_index(100.0, 2.0, 20.0, 0.1)) == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        well_index(100.0, 2.0, 20.0, 4.0)
    with pytest.raises(ValueError):
        well_index(100.0, 2.0, 20.0, 0.1, dy=10.0)


def test_wellspec_validation():
    with pytest.raises(ValueError):
        WellSpec("a", "observer", 0, 0, (1, 1), 300)
    with pytest.raises(ValueError):
        WellSpec("a", "producer", 0, 0, (3, 2), 300)
    w = WellSpec("a", "producer", 5, 5, (1, 9), 300)
    with pytest.raises(ValueError):
        w.fine_cells(Grid(8, 8, 8, 1, 1, 1))
    assert WellSpec.from_dict(w.to_dict()) == w


def test_well_rates_zero_when_balanced():
    for kind in ("producer", "injector"):
        w = WellSpec("W", kind, 0, 0, (1, 2), 320.0)
        r = well_rates(np.full(2, 320.0), np.array([0.1, 0.5]), np.array([50.0, 50.0]), np.array([1.0, 3.0]),
                       w, FluidProps(gravity=0.0))
        assert np.all(r["water"] == 0) and np.all(r["oil"] == 0) and r["crossflow"] == 0


def test_well_rates_single_perforation_by_hand():
    fl = FluidProps()
    w = WellSpec("P", "producer", 0, 0, (1, 1), 310.0)
    wi, p, sw = 40.0, 315.0, 0.5
    r = well_rates(np.array([p]), np.array([sw]), np.array([wi]), np.array([1.0]), w, fl)
    se = (sw - 0.1) / 0.7
    krw, kro = 0.7 * se ** 2, 0.9 * (1 - se) ** 2
    rho_w = 1000 * (1 + 4e-5 * (p - 325))
    rho_o = 800 * (1 + 1e-4 * (p - 325))
    mu_o = 1.14 / (1 + 5e-4 * (p - 325))
    conv = 9.869233e-16 * 1e5 / 1e-3 * 86400
    assert r["water"][0] == pytest.approx(conv * wi * krw * rho_w / 0.31 * 5.0, rel=1e-12)
    assert r["oil"][0] == pytest.approx(conv * wi * kro * rho_o / mu_o * 5.0, rel=1e-12)


def test_injector_uses_total_mobility_and_clamps():
    fl = FluidProps()
    w = WellSpec("I", "injector", 0, 0, (1, 1), 330.0)
    r = well_rates(np.array([325.0]), np.array([0.1]), np.array([10.0]), np.array([1.0]), w, fl)
    krw, _, kro, _ = fl.relperm(0.1)
    lt = krw / fl.mu_w + kro / fl.mu_o(325.0)
    assert r["water"][0] == pytest.approx(DARCY * 10 * fl.rho_w(325.0) * lt * (325 - 330), rel=1e-12)
    assert r["oil"][0] == 0
    back = well_rates(np.array([335.0]), np.array([0.1]), np.array([10.0]), np.array([1.0]), w, fl)
    assert back["water"][0] == 0 and back["crossflow"] == 1


def test_wellbore_pressure_increases_with_depth():
    pw = wellbore_pressures(300.0, np.array([1.0, 3.0, 5.0]), np.array([1000.0, 1000.0, 1000.0]), 9.80665)
    assert np.allclose(np.diff(pw), 1000 * 9.80665 * 2 / 1e5)
    assert np.allclose(wellbore_pressures(300.0, np.array([1.0, 3.0]), np.full(2, 900.0), 0.0), 300.0)


# --------------------------------------------------------------- assembly

def _two_cell_system():
    g = Grid(2, 1, 1, 10.0, 10.0, 10.0)
    fm = FlowModel(g, np.full(2, 100.0), np.full(2, 5.0), np.array([0]), np.array([1]),
                   np.array([50.0]), np.array([0]), [])
    return _System(fm, FluidProps(gravity=0.0))


def test_upstream_weighting_follows_potential():
    sysm = _two_cell_system()
    fl = sysm.fl
    sw = np.array([0.6, 0.2])
    for p in (np.array([330.0, 320.0]), np.array([320.0, 330.0])):
        pr = _props(p, sw, fl)
        acc = (sysm.fm.pore_volume * pr.rw * sw, sysm.fm.pore_volume * pr.ro * (1 - sw))
        R, *_ = sysm.residual(p, sw, acc, 1.0, np.zeros(0), jacobian=False)
        up = 0 if p[0] > p[1] else 1
        assert R[0] == pytest.approx(sysm.ct[0] * pr.mw[up] * (p[0] - p[1]), rel=1e-12)


def _small_model():
    rng = np.random.default_rng(5)
    g = Grid(6, 5, 3, 30.0, 30.0, 3.0, datum_depth=1000.0)
    m = FineGeomodel(g, (rng.random(g.shape) < 0.5).astype(np.uint8))
    wells = [WellSpec("I", "injector", 0, 0, (1, 3), 330.0), WellSpec("P", "producer", 5, 4, (2, 3), 310.0)]
    return m, wells


def test_jacobian_matches_finite_differences():
    m, wells = _small_model()
    fm = flow_model(m, wells)
    sysm = _System(fm, FluidProps())
    rng = np.random.default_rng(0)
    p = 320 + 8 * rng.random(fm.n_cells)
    sw = 0.15 + 0.6 * rng.random(fm.n_cells)
    pr = _props(p, sw, sysm.fl)
    acc = (fm.pore_volume * pr.rw * 0.3, fm.pore_volume * pr.ro * 0.7)
    pw = sysm.wellbore(p, sw, pr)
    R, J, *_ = sysm.residual(p, sw, acc, 3.0, pw)
    J = J.toarray()
    x = np.empty(2 * fm.n_cells)
    x[0::2], x[1::2] = p, sw
    for col in rng.choice(2 * fm.n_cells, 25, replace=False):
        h = 1e-5 if col % 2 == 0 else 1e-7
        xp, xm = x.copy(), x.copy()
        xp[col] += h
        xm[col] -= h
        Rp, *_ = sysm.residual(xp[0::2], xp[1::2], acc, 3.0, pw, jacobian=False)
        Rm, *_ = sysm.residual(xm[0::2], xm[1::2], acc, 3.0, pw, jacobian=False)
        fd = (Rp - Rm) / (2 * h)
        scale = np.abs(J[:, col]).max() + 1e-12
        assert np.abs(fd - J[:, col]).max() < 1e-5 * scale


def test_linear_solve_accuracy():
    m, wells = _small_model()
    fm = flow_model(m, wells)
    sysm = _System(fm, FluidProps())
    p, sw = initial_state(fm, sysm.fl, Schedule())
    pr = _props(p, sw, sysm.fl)
    acc = (fm.pore_volume * pr.rw * sw, fm.pore_volume * pr.ro * (1 - sw))
    R, J, *_ = sysm.residual(p, sw, acc, 1.0, sysm.wellbore(p, sw, pr))
    x = _linear_solve(J, -R, sysm.fl)
    assert np.linalg.norm(J @ x + R) <= 1e-8 * np.linalg.norm(R)


# ------------------------------------------------------------- simulations

def test_equilibrium_gives_zero_rates():
    m = homogeneous((4, 4, 2))
    fl = FluidProps(gravity=0.0)
    wells = [WellSpec("I", "injector", 0, 0, (1, 2), 325.0), WellSpec("P", "producer", 3, 3, (1, 2), 325.0)]
    r = simulate(m, fl, wells, Schedule(total_time=100.0, snapshot_days=(50.0, 100.0)))
    assert np.all(r.pressure == 325.0) and np.all(r.saturation == 0.1)
    assert all(np.all(r.rates[w][ph] == 0) for w in ("I", "P") for ph in ("water", "oil"))


def test_buckley_leverett_front():
    num, ana, pvi, r = run_buckley_leverett()
    assert abs(pvi - 0.5) < 0.01
    assert abs(num - ana) < 1.5
    assert max(r.log["mass_residual"]) < 1e-6


def test_incompressible_volume_balance():
    m, wells = _small_model()
    fl = FluidProps(c_w=0.0, c_o=0.0, c_mu=0.0)
    sch = Schedule(total_time=200.0, snapshot_days=(100.0, 200.0))
    r = simulate(m, fl, wells, sch)
    pv = (m.porosity * m.grid.cell_volume)
    dt = np.array(r.log["step_dt"])
    q = np.array(r.log["step_well_mass_rates"])  # (steps, wells, 2) production positive
    water_out = np.sum(dt * q[:, :, 0].sum(axis=1)) / fl.rho_w_ref
    oil_out = np.sum(dt * q[:, :, 1].sum(axis=1)) / fl.rho_o_ref
    d_water = np.sum(pv * (r.saturation[-1] - 0.1))
    tol = 1e-6 * pv.sum() * len(dt)
    assert abs(d_water + water_out) < tol
    assert abs(-d_water + oil_out) < tol
    assert oil_out > 0


def test_compressible_mass_balance_per_step():
    m, wells = _small_model()
    fl = FluidProps()
    r = simulate(m, fl, wells, Schedule(total_time=300.0, snapshot_days=(150.0, 300.0)))
    assert max(r.log["mass_residual"]) < 1e-6
    sw_lo, sw_hi = fl.swr, 1 - fl.sor
    assert r.saturation.min() >= sw_lo - 1e-6 and r.saturation.max() <= sw_hi + 1e-6
    assert r.rates["P"]["oil"][0] > 0 and r.rates["I"]["water"][0] > 0
    assert r.rates["I"]["oil"].max() == 0


def test_time_step_refinement_trend():
    m, wells = _small_model()
    fl = FluidProps()
    out = []
    for dt_max in (40.0, 20.0, 10.0):
        sch = Schedule(total_time=200.0, snapshot_days=(200.0,), dt_initial=min(1.0, dt_max), dt_max=dt_max)
        out.append(simulate(m, fl, wells, sch).saturation[-1])
    d1 = np.abs(out[0] - out[1]).max()
    d2 = np.abs(out[1] - out[2]).max()
    assert d2 < d1


def test_determinism_and_file_roundtrip(tmp_path):
    m, wells = _small_model()
    sch = Schedule(total_time=100.0, snapshot_days=(50.0, 100.0))
    a = simulate(m, FluidProps(), wells, sch)
    b = simulate(m, FluidProps(), wells, sch)
    assert a == b
    write_sim_result(tmp_path / "r.bin", a)
    c = read_sim_result(tmp_path / "r.bin")
    assert c == a
    write_sim_result(tmp_path / "s.bin", c)
    assert (tmp_path / "r.bin").read_bytes() == (tmp_path / "s.bin").read_bytes()
    assert (tmp_path / "r.bin.rates.csv").read_bytes() == (tmp_path / "s.bin.rates.csv").read_bytes()


def test_newton_failure_reports_diagnostics():
    m, wells = _small_model()
    sch = Schedule(total_time=10.0, snapshot_days=(10.0,), max_newton=0, dt_min=0.5)
    with pytest.raises(SimulationError, match="Newton failed"):
        simulate(m, FluidProps(), wells, sch)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(total_time=100.0, snapshot_days=(50.0, 40.0, 100.0))
    with pytest.raises(ValueError):
        Schedule(total_time=100.0, snapshot_days=(50.0,))
    s = Schedule.scaled_default_days(100.0)
    assert s.snapshot_days[-1] == 100.0 and len(s.snapshot_days) == 10


@settings(max_examples=25, deadline=None)
@given(st.floats(300, 340), st.floats(0.1, 0.8), st.floats(1, 200))
def test_producer_rates_nonnegative(p, sw, wi):
    w = WellSpec("P", "producer", 0, 0, (1, 1), 320.0)
    r = well_rates(np.array([p]), np.array([sw]), np.array([wi]), np.array([1.0]), w, FluidProps())
    assert r["water"][0] >= 0 and r["oil"][0] >= 0
    if p < 320.0:
        assert r["water"][0] == 0 and r["oil"][0] == 0 and r["crossflow"] == 1
