"""Structured grid, binary channelized realizations and a PCA latent space.

Cell arrays are stored with shape ``(nx, ny, nz)``; flattening with
``order="F"`` gives the x-fastest, then y, then z ordering used on disk and by
the flow solvers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fileio import read_blob, write_blob

SAND = 1
MUD = 0


class ConditioningError(RuntimeError):
    """Raised when a realization cannot honor its hard data."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    datum_depth: float = 0.0  # depth of the top surface; layer k center sits at datum + (k + 0.5) dz

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def layer_depths(self) -> np.ndarray:
        return self.datum_depth + (np.arange(self.nz) + 0.5) * self.dz

    def cell_depths(self) -> np.ndarray:
        """Depth of every cell center, flattened x-fastest."""
        d = np.broadcast_to(self.layer_depths()[None, None, :], self.shape)
        return np.ascontiguousarray(d).ravel(order="F")

    def flat_index(self, i: int, j: int, k: int) -> int:
        return i + self.nx * (j + self.ny * k)

    def contains(self, i: int, j: int, k: int) -> bool:
        return 0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz

    def coarsen(self, ratios: Sequence[int]) -> "Grid":
        rx, ry, rz = (int(r) for r in ratios)
        if self.nx % rx or self.ny % ry or self.nz % rz:
            raise ValueError(f"grid {self.shape} not divisible by ratios {tuple(ratios)}")
        return Grid(self.nx // rx, self.ny // ry, self.nz // rz,
                    self.dx * rx, self.dy * ry, self.dz * rz, self.datum_depth)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz, "dx": self.dx, "dy": self.dy,
                "dz": self.dz, "datum_depth": self.datum_depth}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["nx"]), int(d["ny"]), int(d["nz"]), float(d["dx"]), float(d["dy"]),
                   float(d["dz"]), float(d.get("datum_depth", 0.0)))


@dataclass(frozen=True)
class RockMap:
    """Facies to (porosity, permeability in md)."""

    sand_porosity: float = 0.25
    mud_porosity: float = 0.1
    sand_perm: float = 2000.0
    mud_perm: float = 20.0

    def __post_init__(self):
        for name in ("sand_porosity", "mud_porosity", "sand_perm", "mud_perm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def to_dict(self) -> dict:
        return {"sand": [self.sand_porosity, self.sand_perm], "mud": [self.mud_porosity, self.mud_perm]}

    @classmethod
    def from_dict(cls, d: dict) -> "RockMap":
        return cls(float(d["sand"][0]), float(d["mud"][0]), float(d["sand"][1]), float(d["mud"][1]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FineGeomodel:
    grid: Grid
    facies: np.ndarray
    rock_map: RockMap = field(default_factory=RockMap)

    def __post_init__(self):
        fac = np.asarray(self.facies)
        if fac.shape != self.grid.shape:
            raise ValueError(f"facies shape {fac.shape} != grid shape {self.grid.shape}")
        if not np.isin(fac, (MUD, SAND)).all():
            raise ValueError("facies values must be 0 or 1")
        object.__setattr__(self, "facies", _frozen(fac.astype(np.uint8)))

    @property
    def porosity(self) -> np.ndarray:
        rm = self.rock_map
        return np.where(self.facies == SAND, rm.sand_porosity, rm.mud_porosity)

    @property
    def permeability(self) -> np.ndarray:
        rm = self.rock_map
        return np.where(self.facies == SAND, rm.sand_perm, rm.mud_perm)

    @property
    def sand_fraction(self) -> float:
        return float(self.facies.mean())

    def __eq__(self, other):
        if not isinstance(other, FineGeomodel):
            return NotImplemented
        return (self.grid == other.grid and self.rock_map == other.rock_map
                and np.array_equal(self.facies, other.facies))

    __hash__ = None


@dataclass(frozen=True)
class ChannelPrior:
    """Distributions for the procedural sinusoidal channel generator.

    Ranges are ``(low, high)`` and sampled uniformly; lengths are in grid
    units, orientation in degrees from the x axis. ``conditioning`` lists
    ``((i, j, k), facies)`` hard data, zero-based.
    """

    n_channels: tuple[int, int] = (3, 5)
    width: tuple[float, float] = (2.0, 3.5)
    amplitude: tuple[float, float] = (1.0, 3.0)
    wavelength: tuple[float, float] = (10.0, 20.0)
    orientation: tuple[float, float] = (-20.0, 20.0)
    thickness: tuple[int, int] = (2, 4)
    conditioning: tuple = ()
    max_retries: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "conditioning",
                           tuple((tuple(int(c) for c in cell), int(f)) for cell, f in self.conditioning))
        for name in ("n_channels", "width", "amplitude", "wavelength", "orientation", "thickness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: low > high")
            if name != "orientation" and lo < 0:
                raise ValueError(f"{name}: support must be nonnegative")
        if self.wavelength[0] <= 0:
            raise ValueError("wavelength must be positive")
        if self.thickness[0] < 1:
            raise ValueError("thickness must be at least one layer")
        seen = {}
        for cell, fac in self.conditioning:
            if fac not in (MUD, SAND):
                raise ValueError(f"conditioning cell {cell}: facies {fac} not in {{0, 1}}")
            if seen.get(cell, fac) != fac:
                raise ConditioningError(f"conditioning cell {cell} requires both facies")
            seen[cell] = fac

    def check_grid(self, grid: Grid) -> None:
        for cell, _ in self.conditioning:
            if not grid.contains(*cell):
                raise ConditioningError(f"conditioning cell {cell} lies outside grid {grid.shape}")

    def to_dict(self) -> dict:
        return {
            "n_channels": list(self.n_channels), "width": list(self.width),
            "amplitude": list(self.amplitude), "wavelength": list(self.wavelength),
            "orientation": list(self.orientation), "thickness": list(self.thickness),
            "conditioning": [[list(c), f] for c, f in self.conditioning],
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelPrior":
        kw = {k: tuple(v) for k, v in d.items() if k in
              ("n_channels", "width", "amplitude", "wavelength", "orientation", "thickness")}
        kw["conditioning"] = tuple((tuple(c), int(f)) for c, f in d.get("conditioning", ()))
        if "max_retries" in d:
            kw["max_retries"] = int(d["max_retries"])
        return cls(**kw)


@dataclass(frozen=True)
class Channel:
    cx: float
    cy: float
    angle: float  # radians
    amplitude: float
    wavelength: float
    phase: float
    width: float
    k_top: int
    thickness: int


def sample_channels(prior: ChannelPrior, grid: Grid, rng: np.random.Generator) -> list[Channel]:
    lo, hi = prior.n_channels
    n = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(n):
        thick = int(rng.integers(prior.thickness[0], prior.thickness[1] + 1))
        thick = min(thick, grid.nz)
        out.append(Channel(
            cx=float(rng.uniform(0, grid.nx)),
            cy=float(rng.uniform(0, grid.ny)),
            angle=math.radians(float(rng.uniform(*prior.orientation))),
            amplitude=float(rng.uniform(*prior.amplitude)),
            wavelength=float(rng.uniform(*prior.wavelength)),
            phase=float(rng.uniform(0.0, 2 * math.pi)),
            width=float(rng.uniform(*prior.width)),
            k_top=int(rng.integers(0, grid.nz - thick + 1)),
            thickness=thick,
        ))
    return out


def rasterize(grid: Grid, channels: Sequence[Channel]) -> np.ndarray:
    """Binary facies array: a cell is sand when its center lies strictly
    within half a width of some channel's sinusoidal centerline."""
    x = (np.arange(grid.nx) + 0.5)[:, None]
    y = (np.arange(grid.ny) + 0.5)[None, :]
    fac = np.zeros(grid.shape, dtype=np.uint8)
    for ch in channels:
        c, s = math.cos(ch.angle), math.sin(ch.angle)
        u = (x - ch.cx) * c + (y - ch.cy) * s
        v = -(x - ch.cx) * s + (y - ch.cy) * c
        centre = ch.amplitude * np.sin(2 * np.pi * u / ch.wavelength + ch.phase)
        inside = np.abs(v - centre) < 0.5 * ch.width
        fac[:, :, ch.k_top:ch.k_top + ch.thickness] |= inside[:, :, None].astype(np.uint8)
    return fac


def _violations(fac: np.ndarray, conditioning) -> list:
    return [(cell, f) for cell, f in conditioning if fac[cell] != f]


def generate_realization(prior: ChannelPrior, grid: Grid, seed: int,
                         rock_map: RockMap | None = None, strict: bool = False) -> FineGeomodel:
    """Draw one conditioned channelized realization.

    Candidates are drawn until one honors every conditioning cell, up to
    ``prior.max_retries``. Past the cap the candidate with the fewest
    violations is kept and its conditioning cells are overwritten, unless
    ``strict`` is set, in which case :class:`ConditioningError` names the
    first offending cell.
    """
    prior.check_grid(grid)
    rng = np.random.default_rng(seed)
    best, best_bad = None, None
    for _ in range(max(1, prior.max_retries)):
        fac = rasterize(grid, sample_channels(prior, grid, rng))
        bad = _violations(fac, prior.conditioning)
        if not bad:
            best, best_bad = fac, bad
            break
        if best is None or len(bad) < len(best_bad):
            best, best_bad = fac, bad
    if best_bad:
        if strict:
            cell, f = best_bad[0]
            raise ConditioningError(
                f"conditioning cell {cell} (facies {f}) not honored after {prior.max_retries} retries")
        best = best.copy()
        for cell, f in prior.conditioning:
            best[cell] = f
    return FineGeomodel(grid, best, rock_map or RockMap())


@dataclass(frozen=True, eq=False)
class PcaParameterization:
    """Truncated PCA of binary realizations with a standard-normal latent prior.

    continuous(xi) = mean + basis @ (singular_values * xi); facies are the
    continuous field thresholded (ties go to sand) with hard data forced.
    """

    grid: Grid
    mean_model: np.ndarray        # (n_cells,) x-fastest
    basis: np.ndarray             # (n_cells, n_latent), orthonormal columns
    singular_values: np.ndarray   # (n_latent,)
    threshold: float = 0.5
    truncation_error: float = 0.0
    conditioning: tuple = ()
    rock_map: RockMap = field(default_factory=RockMap)

    def __post_init__(self):
        for name in ("mean_model", "basis", "singular_values"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.float64)))
        if self.basis.shape != (self.grid.n_cells, self.singular_values.size):
            raise ValueError("basis shape inconsistent with grid and singular values")
        object.__setattr__(self, "conditioning",
                           tuple((tuple(int(c) for c in cell), int(f)) for cell, f in self.conditioning))

    @property
    def n_latent(self) -> int:
        return self.singular_values.size

    def continuous(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape != (self.n_latent,):
            raise ValueError(f"latent vector must have shape ({self.n_latent},), got {xi.shape}")
        return self.mean_model + self.basis @ (self.singular_values * xi)

    def encode(self, model: FineGeomodel) -> np.ndarray:
        centred = model.facies.ravel(order="F").astype(np.float64) - self.mean_model
        proj = self.basis.T @ centred
        out = np.zeros(self.n_latent)
        nz = self.singular_values > 0
        out[nz] = proj[nz] / self.singular_values[nz]
        return out

    def __eq__(self, other):
        if not isinstance(other, PcaParameterization):
            return NotImplemented
        return (self.grid == other.grid and self.threshold == other.threshold
                and self.truncation_error == other.truncation_error
                and self.conditioning == other.conditioning and self.rock_map == other.rock_map
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("mean_model", "basis", "singular_values")))

    __hash__ = None


def fit_pca(realizations: Sequence[FineGeomodel], n_latent: int, threshold: float = 0.5,
            conditioning=()) -> PcaParameterization:
    n = len(realizations)
    if n_latent < 1 or n_latent > n - 1:
        raise ValueError(f"n_latent={n_latent} needs at least n_latent + 1 realizations (got {n})")
    grid = realizations[0].grid
    if any(r.grid != grid for r in realizations):
        raise ValueError("all realizations must share one grid")
    X = np.stack([r.facies.ravel(order="F").astype(np.float64) for r in realizations])
    mean = X.mean(axis=0)
    A = (X - mean) / math.sqrt(n - 1)
    _, s, vt = np.linalg.svd(A, full_matrices=False)
    basis = vt[:n_latent].T.copy()
    # sign convention: largest-magnitude entry of each mode is positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(n_latent)])
    flip[flip == 0] = 1.0
    basis *= flip
    total = float(np.sum(s ** 2))
    resid = float(np.sum(s[n_latent:] ** 2))
    trunc = math.sqrt(resid / total) if total > 0 else 0.0
    return PcaParameterization(grid, mean, basis, s[:n_latent].copy(), threshold, trunc,
                               tuple(conditioning), realizations[0].rock_map)


def decode(param: PcaParameterization, xi: np.ndarray) -> FineGeomodel:
    cont = param.continuous(xi)
    fac = (cont >= param.threshold).astype(np.uint8).reshape(param.grid.shape, order="F")
    for cell, f in param.conditioning:
        fac[cell] = f
    return FineGeomodel(param.grid, fac, param.rock_map)


def encode(param: PcaParameterization, model: FineGeomodel) -> np.ndarray:
    return param.encode(model)


# ---------------------------------------------------------------- file formats

def write_geomodel(path: str | Path, model: FineGeomodel) -> None:
    header = {"kind": "geomodel", **model.grid.to_dict(), "rock_map": model.rock_map.to_dict()}
    write_blob(path, header, [("facies", model.facies.ravel(order="F"), "<u1")])


def read_geomodel(path: str | Path) -> FineGeomodel:
    header, arrays = read_blob(path)
    grid = Grid.from_dict(header)
    fac = arrays["facies"].reshape(grid.shape, order="F")
    return FineGeomodel(grid, fac, RockMap.from_dict(header["rock_map"]))


def write_pca(path: str | Path, param: PcaParameterization) -> None:
    header = {
        "kind": "pca", "grid": param.grid.to_dict(), "threshold": param.threshold,
        "truncation_error": param.truncation_error, "n_latent": param.n_latent,
        "conditioning": [[list(c), f] for c, f in param.conditioning],
        "rock_map": param.rock_map.to_dict(),
    }
    write_blob(path, header, [
        ("mean", param.mean_model, "<f8"),
        ("basis", param.basis.T, "<f8"),  # mode-major
        ("singular_values", param.singular_values, "<f8"),
    ])


def read_pca(path: str | Path) -> PcaParameterization:
    header, arrays = read_blob(path)
    return PcaParameterization(
        Grid.from_dict(header["grid"]), arrays["mean"], arrays["basis"].T.copy(),
        arrays["singular_values"], float(header["threshold"]), float(header["truncation_error"]),
        tuple((tuple(c), int(f)) for c, f in header["conditioning"]),
        RockMap.from_dict(header["rock_map"]),
    )
