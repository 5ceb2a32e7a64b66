"""Two-point flux connectivity and well perforations for fine and coarse grids.

Both the two-phase simulator and the single-phase upscaling solve work on a
:class:`FlowModel`, which is built either from a :class:`FineGeomodel`
(harmonic-average transmissibilities, Peaceman well indices) or from an
upscaled coarse model (upscaled transmissibilities and well indices).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geomodel import FineGeomodel, Grid

INJECTOR = "injector"
PRODUCER = "producer"


@dataclass(frozen=True)
class WellSpec:
    """Vertical BHP-controlled well.

    ``layers`` is the 1-based inclusive perforated range ``(top, bottom)``;
    ``bhp`` (bar) applies at the uppermost perforation.
    """

    name: str
    kind: str
    i: int
    j: int
    layers: tuple[int, int]
    bhp: float
    rw: float = 0.1

    def __post_init__(self):
        if self.kind not in (INJECTOR, PRODUCER):
            raise ValueError(f"well {self.name}: kind must be 'injector' or 'producer'")
        top, bot = self.layers
        object.__setattr__(self, "layers", (int(top), int(bot)))
        if top < 1 or bot < top:
            raise ValueError(f"well {self.name}: bad layer range {self.layers}")
        if not self.rw > 0:
            raise ValueError(f"well {self.name}: rw must be positive")

    def fine_cells(self, grid: Grid) -> list[tuple[int, int, int]]:
        top, bot = self.layers
        if not (0 <= self.i < grid.nx and 0 <= self.j < grid.ny) or bot > grid.nz:
            raise ValueError(f"well {self.name} at ({self.i}, {self.j}, layers {self.layers}) "
                             f"lies outside grid {grid.shape}")
        return [(self.i, self.j, k - 1) for k in range(top, bot + 1)]

    def coarse_cells(self, ratios: Sequence[int]) -> list[tuple[int, int, int]]:
        rx, ry, rz = ratios
        top, bot = self.layers
        ks = sorted({(k - 1) // rz for k in range(top, bot + 1)})
        return [(self.i // rx, self.j // ry, k) for k in ks]

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "i": self.i, "j": self.j,
                "layers": list(self.layers), "bhp": self.bhp, "rw": self.rw}

    @classmethod
    def from_dict(cls, d: dict) -> "WellSpec":
        return cls(d["name"], d["kind"], int(d["i"]), int(d["j"]), tuple(d["layers"]),
                   float(d["bhp"]), float(d.get("rw", 0.1)))


def well_index(k: float | np.ndarray, dz: float, dx: float, rw: float, dy: float | None = None):
    """Peaceman well index ``2 pi k dz / ln(r0 / rw)`` with ``r0 = 0.2 dx``.

    Units follow the inputs (md and m give md*m). Requires a square block.
    """
    if dy is not None and not math.isclose(dx, dy):
        raise ValueError("Peaceman r0 = 0.2*dx assumes dx == dy")
    r0 = 0.2 * dx
    if rw >= r0:
        raise ValueError(f"wellbore radius {rw} must be below r0 = 0.2*dx = {r0}")
    return 2.0 * math.pi * np.asarray(k, dtype=np.float64) * dz / math.log(r0 / rw)


@dataclass
class Perforations:
    well: WellSpec
    cells: np.ndarray    # flat cell indices, top to bottom
    wi: np.ndarray       # md*m
    depths: np.ndarray


@dataclass
class FlowModel:
    grid: Grid
    pore_volume: np.ndarray  # m3, flat
    depth: np.ndarray
    conn_a: np.ndarray
    conn_b: np.ndarray
    trans: np.ndarray        # md*m
    conn_axis: np.ndarray    # 0, 1, 2
    perfs: list[Perforations]

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells


def _connections(grid: Grid):
    """Flat (a, b, axis) index triples for interior faces, ordered x, y, z."""
    idx = np.arange(grid.n_cells).reshape(grid.shape, order="F")
    a = [idx[:-1, :, :].ravel(order="F"), idx[:, :-1, :].ravel(order="F"), idx[:, :, :-1].ravel(order="F")]
    b = [idx[1:, :, :].ravel(order="F"), idx[:, 1:, :].ravel(order="F"), idx[:, :, 1:].ravel(order="F")]
    ax = [np.full(x.size, n, dtype=np.int64) for n, x in enumerate(a)]
    return np.concatenate(a), np.concatenate(b), np.concatenate(ax)


def harmonic_transmissibility(perm: np.ndarray, grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face transmissibilities (md*m) with harmonic permeability averaging.

    Returned arrays have shapes ``(nx-1, ny, nz)``, ``(nx, ny-1, nz)`` and
    ``(nx, ny, nz-1)``.
    """
    k = np.asarray(perm, dtype=np.float64)

    def hm(k1, k2):
        return 2.0 * k1 * k2 / (k1 + k2)

    # geometric factor (face area / center distance) first, then the mean
    tx = hm(k[:-1], k[1:]) * (grid.dy * grid.dz / grid.dx)
    ty = hm(k[:, :-1], k[:, 1:]) * (grid.dx * grid.dz / grid.dy)
    tz = hm(k[:, :, :-1], k[:, :, 1:]) * (grid.dx * grid.dy / grid.dz)
    return tx, ty, tz


def _flat_trans(tx, ty, tz) -> np.ndarray:
    return np.concatenate([tx.ravel(order="F"), ty.ravel(order="F"), tz.ravel(order="F")])


def flow_model_from_fine(model: FineGeomodel, wells: Sequence[WellSpec]) -> FlowModel:
    grid = model.grid
    a, b, ax = _connections(grid)
    trans = _flat_trans(*harmonic_transmissibility(model.permeability, grid))
    pv = (model.porosity * grid.cell_volume).ravel(order="F")
    depth = grid.cell_depths()
    perm = model.permeability
    perfs = []
    for w in wells:
        cells = w.fine_cells(grid)
        flat = np.array([grid.flat_index(*c) for c in cells], dtype=np.int64)
        wi = np.array([well_index(perm[c], grid.dz, grid.dx, w.rw, grid.dy) for c in cells], dtype=np.float64)
        perfs.append(Perforations(w, flat, wi, depth[flat]))
    return FlowModel(grid, pv, depth, a, b, trans, ax, perfs)


def flow_model_from_coarse(coarse, wells: Sequence[WellSpec]) -> FlowModel:
    grid = coarse.grid
    a, b, ax = _connections(grid)
    trans = _flat_trans(coarse.tx, coarse.ty, coarse.tz)
    pv = (np.asarray(coarse.porosity) * grid.cell_volume).ravel(order="F")
    depth = grid.cell_depths()
    perfs = []
    for w in wells:
        cells = w.coarse_cells(coarse.ratios)
        flat = np.array([grid.flat_index(*c) for c in cells], dtype=np.int64)
        wi = np.array([coarse.well_indices[(w.name, c[2])] for c in cells], dtype=np.float64)
        perfs.append(Perforations(w, flat, wi, depth[flat]))
    return FlowModel(grid, pv, depth, a, b, trans, ax, perfs)


def flow_model(model, wells: Sequence[WellSpec]) -> FlowModel:
    if isinstance(model, FlowModel):
        return model
    if isinstance(model, FineGeomodel):
        return flow_model_from_fine(model, wells)
    return flow_model_from_coarse(model, wells)
