"""Fully implicit two-phase (oil-water) finite-volume simulator.

Units: pressure in bar, permeability in md, lengths in m, viscosity in cp,
time in days, densities in kg/m3. Residuals are phase mass balances in kg/day.
Unknowns are interleaved per cell as ``[p_0, Sw_0, p_1, Sw_1, ...]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import INJECTOR, PRODUCER, FlowModel, WellSpec, flow_model, well_index
from .fileio import read_blob, read_csv, write_blob, write_csv
from .geomodel import Grid

log = logging.getLogger(__name__)

# m3/day delivered by 1 md*m of transmissibility, 1 bar drop and 1 cp viscosity
DARCY = 9.869233e-16 * 1e5 / 1e-3 * 86400.0
DEFAULT_SNAPSHOT_DAYS = (50.0, 100.0, 150.0, 300.0, 400.0, 500.0, 600.0, 700.0, 850.0, 1000.0)

__all__ = [
    "DARCY", "FluidProps", "Schedule", "SimResult", "SimulationError", "WellSpec",
    "simulate", "well_index", "well_rates", "wellbore_pressures", "rates_from_fields",
    "write_sim_result", "read_sim_result", "DEFAULT_SNAPSHOT_DAYS",
]


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidProps:
    mu_w: float = 0.31
    mu_o_ref: float = 1.14
    p_ref: float = 325.0
    c_mu: float = 5e-4
    rho_w_ref: float = 1000.0
    rho_o_ref: float = 800.0
    c_w: float = 4e-5
    c_o: float = 1e-4
    swr: float = 0.1
    sor: float = 0.2
    n_w: float = 2.0
    n_o: float = 2.0
    krw0: float = 0.7
    kro0: float = 0.9
    gravity: float = 9.80665

    def __post_init__(self):
        for name in ("mu_w", "mu_o_ref", "rho_w_ref", "rho_o_ref", "n_w", "n_o", "krw0", "kro0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.swr and 0 <= self.sor and self.swr + self.sor < 1):
            raise ValueError("residual saturations must satisfy 0 <= swr, sor and swr + sor < 1")
        if self.krw0 > 1 or self.kro0 > 1:
            raise ValueError("relative permeability endpoints must lie in (0, 1]")
        if min(self.c_w, self.c_o, self.c_mu) < 0 or self.gravity < 0:
            raise ValueError("compressibilities and gravity must be nonnegative")

    def mu_o(self, p):
        return self.mu_o_ref / (1.0 + self.c_mu * (np.asarray(p) - self.p_ref))

    def rho_w(self, p):
        return self.rho_w_ref * (1.0 + self.c_w * (np.asarray(p) - self.p_ref))

    def rho_o(self, p):
        return self.rho_o_ref * (1.0 + self.c_o * (np.asarray(p) - self.p_ref))

    def relperm(self, sw):
        """Corey curves and their derivatives: ``(krw, dkrw, kro, dkro)``."""
        span = 1.0 - self.swr - self.sor
        raw = (np.asarray(sw, dtype=np.float64) - self.swr) / span
        se = np.clip(raw, 0.0, 1.0)
        mobile = (raw > 0.0) & (raw < 1.0)
        krw = self.krw0 * se ** self.n_w
        kro = self.kro0 * (1.0 - se) ** self.n_o
        dkrw = np.where(mobile, self.krw0 * self.n_w * se ** (self.n_w - 1.0) / span, 0.0)
        dkro = np.where(mobile, -self.kro0 * self.n_o * (1.0 - se) ** (self.n_o - 1.0) / span, 0.0)
        return krw, dkrw, kro, dkro

    def check_pressure(self, p) -> None:
        p = np.asarray(p)
        if np.any(1.0 + self.c_mu * (p - self.p_ref) <= 0) or np.any(self.rho_w(p) <= 0) \
                or np.any(self.rho_o(p) <= 0):
            raise SimulationError("pressure outside the range where fluid properties are positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FluidProps":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class Schedule:
    total_time: float = 1000.0
    snapshot_days: tuple = DEFAULT_SNAPSHOT_DAYS
    dt_initial: float = 1.0
    dt_growth: float = 2.0
    dt_max: float = 50.0
    dt_min: float = 1e-3
    max_newton: int = 15
    tolerance: float = 1e-6
    initial_pressure: float = 325.0
    initial_sw: float = 0.1
    hydrostatic_init: bool = True

    def __post_init__(self):
        days = tuple(float(t) for t in self.snapshot_days)
        object.__setattr__(self, "snapshot_days", days)
        if not days or any(b <= a for a, b in zip(days, days[1:])) or days[0] <= 0:
            raise ValueError("snapshot days must be positive and strictly increasing")
        if not math.isclose(days[-1], self.total_time):
            raise ValueError("last snapshot must equal the total time")
        if not (0 < self.dt_min <= self.dt_initial <= self.dt_max) or self.dt_growth < 1:
            raise ValueError("inconsistent time-step controls")
        if not 0 <= self.initial_sw <= 1:
            raise ValueError("initial saturation must lie in [0, 1]")

    @classmethod
    def scaled_default_days(cls, total_time: float, **kw) -> "Schedule":
        days = tuple(t * total_time / 1000.0 for t in DEFAULT_SNAPSHOT_DAYS)
        return cls(total_time=total_time, snapshot_days=days, **kw)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["snapshot_days"] = list(self.snapshot_days)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        if "snapshot_days" in d:
            d["snapshot_days"] = tuple(d["snapshot_days"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SimResult:
    """Snapshot fields and well rates.

    ``pressure`` and ``saturation`` have shape ``(n_t, nx, ny, nz)``.
    ``rates[well][phase]`` holds nonnegative surface-volume rates (m3/day)
    at each snapshot: injection for injectors, production for producers.
    """

    grid: Grid
    snapshot_days: np.ndarray
    pressure: np.ndarray
    saturation: np.ndarray
    well_names: tuple
    well_kinds: tuple
    rates: dict
    log: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("snapshot_days", "pressure", "saturation"):
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def rate(self, well: str, phase: str) -> np.ndarray:
        return self.rates[well][phase]

    def rate_matrix(self) -> np.ndarray:
        """``(n_wells, 2, n_t)`` array of water/oil rates, wells in file order."""
        return np.array([[self.rates[w]["water"], self.rates[w]["oil"]] for w in self.well_names])

    def __eq__(self, other):
        if not isinstance(other, SimResult):
            return NotImplemented
        return (self.grid == other.grid and self.well_names == other.well_names
                and self.well_kinds == other.well_kinds
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("snapshot_days", "pressure", "saturation"))
                and np.array_equal(self.rate_matrix(), other.rate_matrix())
                and self.log == other.log)

    __hash__ = None


# ----------------------------------------------------------------- properties

@dataclass
class _Props:
    rw: np.ndarray
    ro: np.ndarray
    drw: float
    dro: float
    mw: np.ndarray
    mo: np.ndarray
    dmw_dp: np.ndarray
    dmw_ds: np.ndarray
    dmo_dp: np.ndarray
    dmo_ds: np.ndarray
    lt: np.ndarray       # total volumetric mobility
    dlt_dp: np.ndarray
    dlt_ds: np.ndarray


def _props(p: np.ndarray, sw: np.ndarray, fl: FluidProps) -> _Props:
    dp = p - fl.p_ref
    rw = fl.rho_w_ref * (1.0 + fl.c_w * dp)
    ro = fl.rho_o_ref * (1.0 + fl.c_o * dp)
    drw = fl.rho_w_ref * fl.c_w
    dro = fl.rho_o_ref * fl.c_o
    imo = (1.0 + fl.c_mu * dp) / fl.mu_o_ref
    dimo = fl.c_mu / fl.mu_o_ref
    krw, dkrw, kro, dkro = fl.relperm(sw)
    return _Props(
        rw=rw, ro=ro, drw=drw, dro=dro,
        mw=rw * krw / fl.mu_w, mo=ro * kro * imo,
        dmw_dp=drw * krw / fl.mu_w, dmw_ds=rw * dkrw / fl.mu_w,
        dmo_dp=kro * (dro * imo + ro * dimo), dmo_ds=ro * dkro * imo,
        lt=krw / fl.mu_w + kro * imo, dlt_dp=kro * dimo, dlt_ds=dkrw / fl.mu_w + dkro * imo,
    )


def wellbore_pressures(bhp: float, depths: np.ndarray, densities: np.ndarray, gravity: float) -> np.ndarray:
    """March the wellbore pressure down the perforations.

    ``p_w[0] = bhp`` at the uppermost perforation and each next perforation
    adds ``rho_avg * g * dz`` with ``rho_avg`` the mean of the two blocks'
    fluid densities.
    """
    pw = np.empty(len(depths))
    if len(depths) == 0:
        return pw
    pw[0] = bhp
    for n in range(1, len(depths)):
        rho = 0.5 * (densities[n - 1] + densities[n])
        pw[n] = pw[n - 1] + rho * gravity * (depths[n] - depths[n - 1]) / 1e5
    return pw


def _column_density(kind: str, pr: _Props, cells: np.ndarray, sw: np.ndarray) -> np.ndarray:
    if kind == INJECTOR:
        return pr.rw[cells]
    lw = pr.mw[cells] / pr.rw[cells]
    lo = pr.mo[cells] / pr.ro[cells]
    tot = lw + lo
    s = sw[cells]
    sat_mix = s * pr.rw[cells] + (1.0 - s) * pr.ro[cells]
    with np.errstate(invalid="ignore", divide="ignore"):
        mob_mix = (lw * pr.rw[cells] + lo * pr.ro[cells]) / tot
    return np.where(tot > 0, mob_mix, sat_mix)


def well_rates(p_cells: np.ndarray, sw_cells: np.ndarray, wi: np.ndarray, depths: np.ndarray,
               spec: WellSpec, fluids: FluidProps) -> dict:
    """Per-perforation phase mass rates ``WI (kr rho / mu) (p - p_w)``.

    Returns ``{"water", "oil"}`` mass rates (kg/day, positive = out of the
    reservoir), ``"pw"`` wellbore pressures and ``"crossflow"`` (count of
    perforations whose drive had the wrong sign and were clamped to zero).
    Injectors inject water only, using the block's total mobility.
    """
    p_cells = np.asarray(p_cells, dtype=np.float64)
    sw_cells = np.asarray(sw_cells, dtype=np.float64)
    pr = _props(p_cells, sw_cells, fluids)
    idx = np.arange(p_cells.size)
    rho = _column_density(spec.kind, pr, idx, sw_cells)
    pw = wellbore_pressures(spec.bhp, np.asarray(depths, dtype=np.float64), rho, fluids.gravity)
    drive = p_cells - pw
    wi = np.asarray(wi, dtype=np.float64)
    if spec.kind == PRODUCER:
        act = drive > 0
        qw = DARCY * wi * pr.mw * drive * act
        qo = DARCY * wi * pr.mo * drive * act
    else:
        act = drive < 0
        qw = DARCY * wi * pr.rw * pr.lt * drive * act
        qo = np.zeros_like(qw)
    cross = int(np.count_nonzero(~act & (drive != 0)))
    return {"water": qw, "oil": qo, "pw": pw, "crossflow": cross}


def rates_from_fields(pressure: np.ndarray, saturation: np.ndarray, model, wells: Sequence[WellSpec],
                      fluids: FluidProps) -> dict:
    """Well surface rates implied by snapshot fields, in :class:`SimResult` layout.

    ``pressure``/``saturation`` are ``(n_t, nx, ny, nz)`` on the grid of ``model``.
    """
    fm = flow_model(model, wells)
    P = np.stack([np.asarray(x).ravel(order="F") for x in pressure])
    S = np.stack([np.asarray(x).ravel(order="F") for x in saturation])
    out = {}
    for perf in fm.perfs:
        w, o = [], []
        for t in range(P.shape[0]):
            r = well_rates(P[t, perf.cells], S[t, perf.cells], perf.wi, perf.depths, perf.well, fluids)
            w.append(abs(r["water"].sum()) / fluids.rho_w_ref)
            o.append(abs(r["oil"].sum()) / fluids.rho_o_ref)
        out[perf.well.name] = {"water": np.array(w), "oil": np.array(o)}
    return out


def unflatten(a: np.ndarray, grid: Grid) -> np.ndarray:
    """``(n_t, n_cells)`` x-fastest rows to ``(n_t, nx, ny, nz)``."""
    a = np.asarray(a)
    return a.reshape((a.shape[0],) + grid.shape[::-1]).transpose(0, 3, 2, 1)


# ------------------------------------------------------------------- assembly

class _System:
    def __init__(self, fm: FlowModel, fluids: FluidProps):
        self.fm = fm
        self.fl = fluids
        n = fm.n_cells
        self.n = n
        self.G = fluids.gravity / 1e5
        a, b = fm.conn_a, fm.conn_b
        self.a, self.b = a, b
        self.ct = DARCY * fm.trans
        self.dz = fm.depth[a] - fm.depth[b]
        self.pcells = np.concatenate([p.cells for p in fm.perfs]) if fm.perfs else np.zeros(0, int)
        self.pwi = DARCY * np.concatenate([p.wi for p in fm.perfs]) if fm.perfs else np.zeros(0)
        self.pinj = np.concatenate([np.full(p.cells.size, p.well.kind == INJECTOR) for p in fm.perfs]) \
            if fm.perfs else np.zeros(0, bool)

    def wellbore(self, p, sw, pr: _Props) -> np.ndarray:
        out = []
        for perf in self.fm.perfs:
            rho = _column_density(perf.well.kind, pr, perf.cells, sw)
            out.append(wellbore_pressures(perf.well.bhp, perf.depths, rho, self.fl.gravity))
        return np.concatenate(out) if out else np.zeros(0)

    def residual(self, p, sw, acc_old, dt, pw, jacobian=True):
        """Mass residuals ``R`` (2n,) and optionally the sparse Jacobian."""
        n, a, b, ct, dz, G = self.n, self.a, self.b, self.ct, self.dz, self.G
        pv = self.fm.pore_volume
        pr = _props(p, sw, self.fl)
        R = np.zeros(2 * n)
        rows, cols, vals = [], [], []

        # accumulation
        acc_w = pv * pr.rw * sw
        acc_o = pv * pr.ro * (1.0 - sw)
        R[0::2] += (acc_w - acc_old[0]) / dt
        R[1::2] += (acc_o - acc_old[1]) / dt
        if jacobian:
            cells = np.arange(n)
            rows += [2 * cells, 2 * cells, 2 * cells + 1, 2 * cells + 1]
            cols += [2 * cells, 2 * cells + 1, 2 * cells, 2 * cells + 1]
            vals += [pv * pr.drw * sw / dt, pv * pr.rw / dt,
                     pv * pr.dro * (1.0 - sw) / dt, -pv * pr.ro / dt]

        # inter-cell fluxes, phase-potential upwinding
        for ph, (rho, drho, m, dm_dp, dm_ds) in enumerate((
                (pr.rw, pr.drw, pr.mw, pr.dmw_dp, pr.dmw_ds),
                (pr.ro, pr.dro, pr.mo, pr.dmo_dp, pr.dmo_ds))):
            rho_avg = 0.5 * (rho[a] + rho[b])
            dphi = p[a] - p[b] - rho_avg * G * dz
            up_a = dphi >= 0
            m_up = np.where(up_a, m[a], m[b])
            F = ct * m_up * dphi
            np.add.at(R, 2 * a + ph, F)
            np.add.at(R, 2 * b + ph, -F)
            if jacobian:
                grav = 0.5 * drho * G * dz
                dF_pa = ct * (np.where(up_a, dm_dp[a], 0.0) * dphi + m_up * (1.0 - grav))
                dF_pb = ct * (np.where(up_a, 0.0, dm_dp[b]) * dphi + m_up * (-1.0 - grav))
                dF_sa = ct * np.where(up_a, dm_ds[a], 0.0) * dphi
                dF_sb = ct * np.where(up_a, 0.0, dm_ds[b]) * dphi
                for eq, sign in ((2 * a + ph, 1.0), (2 * b + ph, -1.0)):
                    rows += [eq, eq, eq, eq]
                    cols += [2 * a, 2 * a + 1, 2 * b, 2 * b + 1]
                    vals += [sign * dF_pa, sign * dF_sa, sign * dF_pb, sign * dF_sb]

        # wells
        qmass = np.zeros((self.pcells.size, 2))
        if self.pcells.size:
            c, wi, inj = self.pcells, self.pwi, self.pinj
            drive = p[c] - pw
            prod_act = (~inj) & (drive > 0)
            inj_act = inj & (drive < 0)
            qw = np.where(prod_act, wi * pr.mw[c] * drive, 0.0) + \
                np.where(inj_act, wi * pr.rw[c] * pr.lt[c] * drive, 0.0)
            qo = np.where(prod_act, wi * pr.mo[c] * drive, 0.0)
            np.add.at(R, 2 * c, qw)
            np.add.at(R, 2 * c + 1, qo)
            qmass[:, 0] = qw
            qmass[:, 1] = qo
            if jacobian:
                dqw_p = np.where(prod_act, wi * (pr.dmw_dp[c] * drive + pr.mw[c]), 0.0) + \
                    np.where(inj_act, wi * ((pr.drw * pr.lt[c] + pr.rw[c] * pr.dlt_dp[c]) * drive
                                            + pr.rw[c] * pr.lt[c]), 0.0)
                dqw_s = np.where(prod_act, wi * pr.dmw_ds[c] * drive, 0.0) + \
                    np.where(inj_act, wi * pr.rw[c] * pr.dlt_ds[c] * drive, 0.0)
                dqo_p = np.where(prod_act, wi * (pr.dmo_dp[c] * drive + pr.mo[c]), 0.0)
                dqo_s = np.where(prod_act, wi * pr.dmo_ds[c] * drive, 0.0)
                rows += [2 * c, 2 * c, 2 * c + 1, 2 * c + 1]
                cols += [2 * c, 2 * c + 1, 2 * c, 2 * c + 1]
                vals += [dqw_p, dqw_s, dqo_p, dqo_s]

        J = None
        if jacobian:
            J = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(2 * n, 2 * n))
        return R, J, qmass, pr

    def normalized(self, R, dt) -> np.ndarray:
        pv = self.fm.pore_volume
        return np.stack([np.abs(R[0::2]) * dt / (pv * self.fl.rho_w_ref),
                         np.abs(R[1::2]) * dt / (pv * self.fl.rho_o_ref)])


def _linear_solve(J, rhs, fl: FluidProps):
    """Solve ``J x = rhs`` after a per-cell row recombination.

    Rows become (volume-weighted total, water) per cell so that both diagonal
    entries are positive; the factorization then runs without pivoting on a
    minimum-degree ordering of the symmetric pattern, which keeps fill low.
    """
    n = J.shape[0] // 2
    cells = np.arange(n)
    L = sp.csr_matrix((np.concatenate([np.full(n, 1.0 / fl.rho_w_ref), np.full(n, 1.0 / fl.rho_o_ref),
                                       np.ones(n)]),
                       (np.concatenate([2 * cells, 2 * cells, 2 * cells + 1]),
                        np.concatenate([2 * cells, 2 * cells + 1, 2 * cells]))), shape=J.shape)
    A = (L @ J).tocsc()
    b = L @ rhs
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError:
        lu = spla.splu(A)
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("singular Jacobian")
    if np.linalg.norm(A @ x - b) > 1e-8 * max(np.linalg.norm(b), 1e-300):
        x = x + lu.solve(b - A @ x)
    return x


def initial_state(fm: FlowModel, fluids: FluidProps, schedule: Schedule):
    sw = np.full(fm.n_cells, schedule.initial_sw)
    p = np.full(fm.n_cells, schedule.initial_pressure, dtype=np.float64)
    if schedule.hydrostatic_init and fluids.gravity > 0:
        top = fm.grid.datum_depth + 0.5 * fm.grid.dz
        p0 = schedule.initial_pressure
        rho = schedule.initial_sw * fluids.rho_w(p0) + (1 - schedule.initial_sw) * fluids.rho_o(p0)
        p = p0 + rho * fluids.gravity * (fm.depth - top) / 1e5
    return p, sw


def simulate(model, fluids: FluidProps, wells: Sequence[WellSpec], schedule: Schedule) -> SimResult:
    """Run the two-phase simulation on a fine geomodel, coarse model or FlowModel.

    Time steps start at ``dt_initial``, grow by ``dt_growth`` up to
    ``dt_max``, are cut to land exactly on snapshot days and halve on Newton
    failure down to ``dt_min``. Newton converges when every cell's phase mass
    residual, expressed as a saturation-equivalent over one step, is below
    ``schedule.tolerance``.
    """
    fm = flow_model(model, wells)
    names = [p.well.name for p in fm.perfs]
    if len(set(names)) != len(names):
        raise ValueError("well names must be unique")
    sysm = _System(fm, fluids)
    p, sw = initial_state(fm, fluids, schedule)
    fluids.check_pressure(p)

    snaps = list(schedule.snapshot_days)
    n_t = len(snaps)
    P = np.empty((n_t, fm.n_cells))
    S = np.empty((n_t, fm.n_cells))
    rates = {n: {"water": np.zeros(n_t), "oil": np.zeros(n_t)} for n in names}
    steps_t, steps_dt, steps_newton, steps_res, step_q = [], [], [], [], []
    cuts = 0
    crossflow = 0

    t = 0.0
    dt_nom = schedule.dt_initial
    si = 0
    perf_slices = np.cumsum([0] + [p_.cells.size for p_ in fm.perfs])
    while si < n_t:
        target = snaps[si]
        dt = min(dt_nom, schedule.dt_max, target - t)
        lands = math.isclose(t + dt, target, rel_tol=0, abs_tol=1e-9) or t + dt >= target
        pr0 = _props(p, sw, fluids)
        acc_old = (fm.pore_volume * pr0.rw * sw, fm.pore_volume * pr0.ro * (1.0 - sw))
        ok, p_new, sw_new, iters, res, qm = _newton(sysm, p, sw, acc_old, dt, schedule)
        if not ok:
            cuts += 1
            dt_nom = dt / 2.0
            if dt_nom < schedule.dt_min:
                raise SimulationError(
                    f"Newton failed at t={t:.6g} d with dt={dt:.3g} d below floor {schedule.dt_min}; "
                    f"last normalized residual {res:.3e} after {iters} iterations")
            continue
        p, sw = p_new, sw_new
        t = target if lands else t + dt
        steps_t.append(t)
        steps_dt.append(dt)
        steps_newton.append(iters)
        steps_res.append(res)
        step_q.append([[float(qm[perf_slices[k]:perf_slices[k + 1], ph].sum()) for ph in (0, 1)]
                       for k in range(len(fm.perfs))])
        if dt >= dt_nom:
            dt_nom = min(dt_nom * schedule.dt_growth, schedule.dt_max)
        if lands:
            P[si], S[si] = p, sw
            for k, perf in enumerate(fm.perfs):
                q = qm[perf_slices[k]:perf_slices[k + 1]]
                rates[perf.well.name]["water"][si] = abs(q[:, 0].sum()) / fluids.rho_w_ref
                rates[perf.well.name]["oil"][si] = abs(q[:, 1].sum()) / fluids.rho_o_ref
            si += 1

    for perf, pw in zip(fm.perfs, np.split(sysm.wellbore(p, sw, _props(p, sw, fluids)), perf_slices[1:-1])):
        bad = (p[perf.cells] - pw < 0) if perf.well.kind == PRODUCER else (p[perf.cells] - pw > 0)
        crossflow += int(bad.sum())
    if crossflow:
        log.info("%d perforations clamped against cross-flow at final state", crossflow)

    g = fm.grid
    run_log = {
        "step_days": steps_t, "step_dt": steps_dt, "newton_iterations": steps_newton,
        "mass_residual": steps_res, "cuts": cuts, "n_steps": len(steps_t),
        "step_well_mass_rates": step_q, "crossflow_final": crossflow,
    }
    return SimResult(
        grid=g, snapshot_days=np.array(snaps),
        pressure=unflatten(P, g), saturation=unflatten(S, g),
        well_names=tuple(names), well_kinds=tuple(p_.well.kind for p_ in fm.perfs),
        rates=rates, log=run_log,
    )


def _newton(sysm: _System, p0, sw0, acc_old, dt, schedule: Schedule):
    p, sw = p0.copy(), sw0.copy()
    res = math.inf
    for it in range(schedule.max_newton + 1):
        pr = _props(p, sw, sysm.fl)
        # wellbore heads follow the current iterate but are held fixed in the Jacobian
        pw = sysm.wellbore(p, sw, pr)
        R, J, qm, _ = sysm.residual(p, sw, acc_old, dt, pw)
        if not np.all(np.isfinite(R)):
            return False, p, sw, it, math.inf, None
        res = float(sysm.normalized(R, dt).max())
        if res < schedule.tolerance:
            return True, p, sw, it, res, qm
        if it == schedule.max_newton:
            break
        try:
            dx = _linear_solve(J, -R, sysm.fl)
        except (np.linalg.LinAlgError, RuntimeError):
            return False, p, sw, it, res, None
        dp, ds = dx[0::2], dx[1::2]
        ds = np.clip(ds, -0.2, 0.2)
        p = p + dp
        sw = np.clip(sw + ds, 0.0, 1.0)
        if np.any(1.0 + sysm.fl.c_mu * (p - sysm.fl.p_ref) <= 0):
            return False, p, sw, it, res, None
    return False, p, sw, schedule.max_newton, res, None


# --------------------------------------------------------------- file format

def write_sim_result(path: str | Path, result: SimResult) -> None:
    path = Path(path)
    n_t = len(result.snapshot_days)
    header = {
        "kind": "simresult", "grid": result.grid.to_dict(),
        "well_names": list(result.well_names), "well_kinds": list(result.well_kinds),
        "snapshot_days": [float(x) for x in result.snapshot_days], "log": result.log,
    }
    P = np.stack([result.pressure[t].ravel(order="F") for t in range(n_t)])
    S = np.stack([result.saturation[t].ravel(order="F") for t in range(n_t)])
    write_blob(path, header, [("pressure", P, "<f8"), ("saturation", S, "<f8")])
    rows = []
    for w in result.well_names:
        for ph in ("water", "oil"):
            for day, r in zip(result.snapshot_days, result.rates[w][ph]):
                rows.append((w, ph, float(day), float(r)))
    write_csv(rates_path(path), ("well", "phase", "day", "rate"), rows)


def rates_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".rates.csv")


def read_sim_result(path: str | Path) -> SimResult:
    header, arrays = read_blob(path)
    grid = Grid.from_dict(header["grid"])
    n_t = len(header["snapshot_days"])
    P = np.stack([arrays["pressure"][t].reshape(grid.shape, order="F") for t in range(n_t)])
    S = np.stack([arrays["saturation"][t].reshape(grid.shape, order="F") for t in range(n_t)])
    rates = {w: {"water": np.zeros(n_t), "oil": np.zeros(n_t)} for w in header["well_names"]}
    days = header["snapshot_days"]
    for row in read_csv(rates_path(path)):
        t = days.index(float(row["day"]))
        rates[row["well"]][row["phase"]][t] = float(row["rate"])
    return SimResult(grid, np.array(days), P, S, tuple(header["well_names"]),
                     tuple(header["well_kinds"]), rates, header["log"])
