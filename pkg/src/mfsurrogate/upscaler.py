"""Global single-phase flow-based upscaling of transmissibilities and well indices.

A steady, unit-mobility pressure problem driven by the wells (no-flow outer
boundaries, no gravity) is solved on the fine grid. Coarse face
transmissibilities are then the summed fine fluxes through each coarse face
divided by the drop in block-averaged pressure; coarse well indices are the
summed fine well rates in a coarse well block divided by the drawdown between
the block-averaged pressure and the well pressure.

Fluxes use the convention ``f = T (p_minus - p_plus)``, i.e. positive flow runs
in the increasing index direction, so that ``T* = sum(f) / (<p>_minus - <p>_plus)``
is positive for well-behaved faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import FlowModel, WellSpec, flow_model, flow_model_from_coarse
from .fileio import read_blob, read_csv, write_blob, write_csv
from .geomodel import FineGeomodel, Grid

# anomaly thresholds for T* and WI*
SMALL_DROP = 1e-8     # relative to the global BHP spread
MAX_RATIO = 50.0      # against the aggregated harmonic-average value


class SingularSystemError(ValueError):
    """The single-phase problem has no driving pressure difference."""


@dataclass
class SinglePhaseSolution:
    """Steady single-phase state.

    Fields are stored, in extended precision, for the normalized drive
    ``u = (p - p_low) / spread`` where ``p_low`` is the lowest BHP and
    ``spread`` the BHP range; the
    physical pressure, face fluxes (md*bar per unit mobility) and well rates
    are exposed as properties. Face fluxes are shaped like the
    transmissibility arrays; well rates are per perforation with production
    positive, ``f = WI (p - p_w)``.
    """

    grid: Grid
    potential: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    uz: np.ndarray
    well_potential_flux: dict[str, np.ndarray]
    well_cells: dict[str, np.ndarray]
    bhp: dict[str, float]

    @property
    def bhp_spread(self) -> float:
        v = list(self.bhp.values())
        return max(v) - min(v)

    def _scaled(self, x, offset=0.0) -> np.ndarray:
        return (offset + np.longdouble(self.bhp_spread) * x).astype(np.float64)

    @property
    def pressure(self) -> np.ndarray:
        return self._scaled(self.potential, np.longdouble(min(self.bhp.values())))

    @property
    def fx(self) -> np.ndarray:
        return self._scaled(self.ux)

    @property
    def fy(self) -> np.ndarray:
        return self._scaled(self.uy)

    @property
    def fz(self) -> np.ndarray:
        return self._scaled(self.uz)

    @property
    def well_flux(self) -> dict[str, np.ndarray]:
        return {w: self._scaled(q) for w, q in self.well_potential_flux.items()}

    def total_rates(self) -> dict[str, float]:
        return {w: float(q.sum()) for w, q in self.well_flux.items()}


@dataclass(eq=False)
class CoarseModel:
    grid: Grid
    ratios: tuple[int, int, int]
    tx: np.ndarray
    ty: np.ndarray
    tz: np.ndarray
    porosity: np.ndarray
    well_indices: dict[tuple[str, int], float]
    anomaly_x: np.ndarray
    anomaly_y: np.ndarray
    anomaly_z: np.ndarray
    well_anomalies: dict[tuple[str, int], bool] = field(default_factory=dict)

    def __post_init__(self):
        self.ratios = tuple(int(r) for r in self.ratios)
        nx, ny, nz = self.grid.shape
        expect = {"tx": (nx - 1, ny, nz), "ty": (nx, ny - 1, nz), "tz": (nx, ny, nz - 1),
                  "porosity": (nx, ny, nz)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {shape}")
        if min(self.tx.min(initial=0), self.ty.min(initial=0), self.tz.min(initial=0)) < 0:
            raise ValueError("negative coarse transmissibility")

    @property
    def n_face_anomalies(self) -> int:
        return int(self.anomaly_x.sum() + self.anomaly_y.sum() + self.anomaly_z.sum())

    @property
    def pore_volume(self) -> np.ndarray:
        return self.porosity * self.grid.cell_volume

    def flow_model(self, wells: Sequence[WellSpec]) -> FlowModel:
        return flow_model_from_coarse(self, wells)

    def __eq__(self, other):
        if not isinstance(other, CoarseModel):
            return NotImplemented
        arrays = ("tx", "ty", "tz", "porosity", "anomaly_x", "anomaly_y", "anomaly_z")
        return (self.grid == other.grid and self.ratios == other.ratios
                and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.well_indices == other.well_indices
                and self.well_anomalies == other.well_anomalies)

    __hash__ = None


# ------------------------------------------------------------ fine solve

def solve_single_phase(model, wells: Sequence[WellSpec]) -> SinglePhaseSolution:
    """Steady unit-mobility pressure solve driven by BHP wells.

    ``model`` may be a :class:`FineGeomodel`, a :class:`CoarseModel` or a
    prebuilt :class:`FlowModel`.
    """
    if not wells:
        raise SingularSystemError("no wells: the single-phase problem has no driving term")
    bhps = [w.bhp for w in wells]
    if max(bhps) == min(bhps):
        raise SingularSystemError("all well BHPs are equal: no flow to upscale")
    fm = flow_model(model, wells)
    n = fm.n_cells
    # solve for u = (p - p_low) / spread so the answer is independent of the drive scale
    p_low, spread = np.longdouble(min(bhps)), np.longdouble(max(bhps)) - np.longdouble(min(bhps))
    a, b, t = fm.conn_a, fm.conn_b, fm.trans
    # diagonal sums are accumulated in extended precision as well
    diag = np.zeros(n, dtype=np.longdouble)
    np.add.at(diag, a, t)
    np.add.at(diag, b, t)
    rhs = np.zeros(n, dtype=np.longdouble)
    for pf in fm.perfs:
        np.add.at(diag, pf.cells, pf.wi)
        np.add.at(rhs, pf.cells, pf.wi.astype(np.longdouble) * ((np.longdouble(pf.well.bhp) - p_low) / spread))
    A = sp.csc_matrix((np.concatenate([diag, -t.astype(np.longdouble), -t.astype(np.longdouble)]),
                       (np.concatenate([np.arange(n), a, b]), np.concatenate([np.arange(n), b, a]))),
                      shape=(n, n))
    u = _refined_solve(A, rhs)

    grid = fm.grid
    nx, ny, nz = grid.shape
    U = u.reshape(grid.shape, order="F")
    flux = t.astype(np.longdouble) * (u[a] - u[b])
    sizes = [(nx - 1) * ny * nz, nx * (ny - 1) * nz]
    fx_, fy_, fz_ = np.split(flux, np.cumsum(sizes))
    fx = fx_.reshape((nx - 1, ny, nz), order="F")
    fy = fy_.reshape((nx, ny - 1, nz), order="F")
    fz = fz_.reshape((nx, ny, nz - 1), order="F")
    well_flux = {pf.well.name: pf.wi.astype(np.longdouble)
                 * (u[pf.cells] - (np.longdouble(pf.well.bhp) - p_low) / spread) for pf in fm.perfs}
    well_cells = {pf.well.name: pf.cells.copy() for pf in fm.perfs}
    return SinglePhaseSolution(grid, U, fx, fy, fz, well_flux, well_cells, {w.name: w.bhp for w in wells})


def _refined_solve(A: sp.csc_matrix, rhs: np.ndarray, max_iter: int = 8) -> np.ndarray:
    """Sparse LU solve refined against extended-precision residuals.

    Coarse quantities divide by block-pressure differences that can be many
    orders of magnitude below the pressures themselves, so the potential is
    carried in ``np.longdouble`` until it stops changing.
    """
    A_ext = A.astype(np.longdouble)
    lu = spla.splu(A.astype(np.float64))
    u = lu.solve(np.asarray(rhs, dtype=np.float64)).astype(np.longdouble)
    for _ in range(max_iter):
        r = rhs - A_ext @ u
        du = lu.solve(r.astype(np.float64))
        u += du.astype(np.longdouble)
        if np.abs(du).max() <= 1e-18 * max(float(np.abs(u).max()), 1e-300):
            break
    return u


# ------------------------------------------------------- coarse quantities

def block_average(field_: np.ndarray, ratios: Sequence[int]) -> np.ndarray:
    rx, ry, rz = ratios
    nx, ny, nz = field_.shape
    return field_.reshape(nx // rx, rx, ny // ry, ry, nz // rz, rz, order="C").mean(axis=(1, 3, 5))


def _path_weights(r: int) -> np.ndarray:
    """Fraction of each of the 2r fine cells lying between two coarse-block centers."""
    lo, hi = 0.5 * r, 1.5 * r
    i = np.arange(2 * r, dtype=np.float64)
    return np.clip(np.minimum(i + 1, hi) - np.maximum(i, lo), 0.0, 1.0)


def aggregated_harmonic(perm: np.ndarray, grid: Grid, ratios: Sequence[int], axis: int) -> np.ndarray:
    """Coarse-face transmissibility from fine permeabilities alone.

    Each fine row normal to the face contributes the series resistance of its
    cells between the two coarse-block centers; rows add in parallel. For a
    homogeneous medium this is ``k A_c / L_c``.
    """
    r = int(ratios[axis])
    d = (grid.dx, grid.dy, grid.dz)
    area = d[0] * d[1] * d[2] / d[axis]
    k = np.moveaxis(np.asarray(perm, dtype=np.float64), axis, 0)
    nb = k.shape[0] // r
    w = _path_weights(r)
    # resistance of every fine row between consecutive coarse centers
    res = np.stack([np.tensordot(w, 1.0 / k[I * r:(I + 2) * r], axes=(0, 0)) for I in range(nb - 1)]) \
        if nb > 1 else np.zeros((0,) + k.shape[1:])
    row_t = area / (d[axis] * res)
    # sum the transverse fine rows belonging to each coarse face
    other = [ax for ax in range(3) if ax != axis]
    ro = [int(ratios[ax]) for ax in other]
    n1, n2 = row_t.shape[1], row_t.shape[2]
    agg = row_t.reshape(nb - 1, n1 // ro[0], ro[0], n2 // ro[1], ro[1]).sum(axis=(2, 4))
    return np.moveaxis(agg, 0, axis)


def _face_flux_sums(f: np.ndarray, ratios: Sequence[int], axis: int) -> np.ndarray:
    r = int(ratios[axis])
    g = np.moveaxis(f, axis, 0)
    g = g[r - 1::r]   # fine faces lying on coarse faces
    other = [ax for ax in range(3) if ax != axis]
    ro = [int(ratios[ax]) for ax in other]
    n1, n2 = g.shape[1], g.shape[2]
    s = g.reshape(g.shape[0], n1 // ro[0], ro[0], n2 // ro[1], ro[1]).sum(axis=(2, 4))
    return np.moveaxis(s, 0, axis)


def upscale_transmissibility(sol: SinglePhaseSolution, perm: np.ndarray, ratios: Sequence[int]):
    """Coarse face transmissibilities and anomaly masks, ordered x, y, z."""
    # evaluated on the normalized drive, where the BHP spread is one
    grid = sol.grid
    grid.coarsen(ratios)
    ubar = block_average(sol.potential, ratios)
    out = []
    for axis, f in enumerate((sol.ux, sol.uy, sol.uz)):
        um = np.moveaxis(ubar, axis, 0)
        drop = np.moveaxis(um[:-1] - um[1:], 0, axis)
        total = _face_flux_sums(f, ratios, axis)
        ref = aggregated_harmonic(perm, grid, ratios, axis)
        small = np.abs(drop) < SMALL_DROP
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(small, np.nan, (total / np.where(small, 1.0, drop)).astype(np.float64))
        bad = small | ~(t >= 0) | (t > MAX_RATIO * ref)
        out.append((np.where(bad, ref, t), bad))
    return out


def fallback_well_index(perm: np.ndarray, grid: Grid, ratios: Sequence[int], well: WellSpec,
                        coarse_k: int) -> float:
    """Peaceman index of the coarse block built from the perforated fine layers.

    Square blocks use ``r0 = 0.2 dx``; rectangular ones the isotropic
    ``r0 = 0.14 sqrt(dx^2 + dy^2)``.
    """
    cg = grid.coarsen(ratios)
    rz = ratios[2]
    if math.isclose(cg.dx, cg.dy):
        r0 = 0.2 * cg.dx
    else:
        r0 = 0.14 * math.hypot(cg.dx, cg.dy)
    if well.rw >= r0:
        raise ValueError(f"well {well.name}: rw {well.rw} not below coarse r0 {r0}")
    total = 0.0
    for (i, j, k) in well.fine_cells(grid):
        if k // rz == coarse_k:
            total += 2.0 * math.pi * float(perm[i, j, k]) * grid.dz / math.log(r0 / well.rw)
    return total


def upscale_well_index(sol: SinglePhaseSolution, wells: Sequence[WellSpec], perm: np.ndarray,
                       ratios: Sequence[int]):
    """WI* per (well, coarse layer) and the matching anomaly flags."""
    grid = sol.grid
    ubar = block_average(sol.potential, ratios)
    p_low, spread = min(sol.bhp.values()), sol.bhp_spread
    rz = ratios[2]
    wi, flags = {}, {}
    for w in wells:
        q = sol.well_potential_flux[w.name]
        cells = w.fine_cells(grid)
        for (ci, cj, ck) in w.coarse_cells(ratios):
            sel = [n for n, c in enumerate(cells) if c[2] // rz == ck]
            total = q[sel].sum()
            drop = ubar[ci, cj, ck] - (np.longdouble(w.bhp) - np.longdouble(p_low)) / np.longdouble(spread)
            ref = fallback_well_index(perm, grid, ratios, w, ck)
            bad = abs(drop) < SMALL_DROP
            val = math.nan if bad else float(total / drop)
            bad = bad or not val >= 0 or val > MAX_RATIO * ref
            wi[(w.name, ck)] = ref if bad else val
            flags[(w.name, ck)] = bool(bad)
    return wi, flags


def coarse_porosity(model: FineGeomodel, ratios: Sequence[int]) -> np.ndarray:
    """Pore-volume-weighted porosity; fine cells share one volume, so a plain mean."""
    return block_average(model.porosity, ratios)


def upscale(model: FineGeomodel, wells: Sequence[WellSpec], ratios: Sequence[int]) -> CoarseModel:
    ratios = tuple(int(r) for r in ratios)
    cgrid = model.grid.coarsen(ratios)
    sol = solve_single_phase(model, wells)
    perm = model.permeability
    (tx, ax), (ty, ay), (tz, az) = upscale_transmissibility(sol, perm, ratios)
    wi, wflags = upscale_well_index(sol, wells, perm, ratios)
    return CoarseModel(cgrid, ratios, tx, ty, tz, coarse_porosity(model, ratios), wi, ax, ay, az, wflags)


# -------------------------------------------------------------- file format

def wells_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".wells.csv")


def write_coarse_model(path: str | Path, cm: CoarseModel) -> None:
    header = {"kind": "coarsemodel", "grid": cm.grid.to_dict(), "ratios": list(cm.ratios)}
    flat = lambda a: np.asarray(a).ravel(order="F")
    write_blob(path, header, [
        ("porosity", flat(cm.porosity), "<f8"), ("tx", flat(cm.tx), "<f8"),
        ("ty", flat(cm.ty), "<f8"), ("tz", flat(cm.tz), "<f8"),
        ("anomaly_x", flat(cm.anomaly_x), "<u1"), ("anomaly_y", flat(cm.anomaly_y), "<u1"),
        ("anomaly_z", flat(cm.anomaly_z), "<u1"),
    ])
    rows = [(name, k, wi, int(cm.well_anomalies.get((name, k), False)))
            for (name, k), wi in cm.well_indices.items()]
    write_csv(wells_path(path), ("well", "coarse_layer", "wi", "anomaly"), rows)


def read_coarse_model(path: str | Path) -> CoarseModel:
    header, arr = read_blob(path)
    grid = Grid.from_dict(header["grid"])
    nx, ny, nz = grid.shape
    shp = lambda a, s: np.asarray(a).reshape(s, order="F")
    wi, flags = {}, {}
    for row in read_csv(wells_path(path)):
        key = (row["well"], int(row["coarse_layer"]))
        wi[key] = float(row["wi"])
        flags[key] = row["anomaly"] == "1"
    return CoarseModel(
        grid, tuple(header["ratios"]),
        shp(arr["tx"], (nx - 1, ny, nz)), shp(arr["ty"], (nx, ny - 1, nz)), shp(arr["tz"], (nx, ny, nz - 1)),
        shp(arr["porosity"], (nx, ny, nz)), wi,
        shp(arr["anomaly_x"], (nx - 1, ny, nz)).astype(bool), shp(arr["anomaly_y"], (nx, ny - 1, nz)).astype(bool),
        shp(arr["anomaly_z"], (nx, ny, nz - 1)).astype(bool), flags)
