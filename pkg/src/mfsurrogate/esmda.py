"""Ensemble smoother with multiple data assimilation over latent PCA variables."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .fileio import read_blob, read_csv, write_blob, write_csv

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (57.017, 35.0, 25.0, 20.0, 18.0, 15.0, 12.0, 8.0, 5.0, 3.0)


class ForwardError(RuntimeError):
    pass


def check_alphas(alphas: Sequence[float], tol: float = 1e-3) -> float:
    """Return ``sum(1 / alpha)``; raise unless it is 1 within ``tol``."""
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        return 0.0
    if np.any(a <= 0):
        raise ValueError("inflation coefficients must be positive")
    s = float(np.sum(1.0 / a))
    if abs(s - 1.0) > tol:
        raise ValueError(f"sum of 1/alpha is {s:.6f}, expected 1 within {tol}")
    return s


@dataclass
class EsmdaConfig:
    alphas: tuple = DEFAULT_ALPHAS
    n_ensemble: int = 400
    noise_fraction: float = 0.05
    noise_floor: float = 0.0
    seed: int = 0
    rcond: float = 1e-12

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        check_alphas(self.alphas)
        if self.n_ensemble < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.noise_fraction < 0 or self.noise_floor < 0:
            raise ValueError("noise parameters must be nonnegative")

    @property
    def n_assimilations(self) -> int:
        return len(self.alphas)


@dataclass
class ObservationSet:
    values: np.ndarray
    std: np.ndarray
    descriptors: list = field(default_factory=list)  # (well, phase, day) per entry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.values.ndim != 1 or self.std.shape != self.values.shape:
            raise ValueError("values and std must be equal-length vectors")
        if np.any(self.std < 0):
            raise ValueError("observation std must be nonnegative")
        if self.descriptors and len(self.descriptors) != len(self.values):
            raise ValueError("one descriptor per observation expected")

    def __len__(self):
        return len(self.values)

    @property
    def variance(self) -> np.ndarray:
        return self.std ** 2


def observation_std(values, fraction: float, floor: float = 0.0) -> np.ndarray:
    """Noise std as a fraction of each value, never below ``floor``."""
    return np.maximum(fraction * np.abs(np.asarray(values, dtype=np.float64)), floor)


def perturb_observations(d_obs, alpha: float, cd_var, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """``d_obs + sqrt(alpha) e`` with ``e ~ N(0, diag(cd_var))``; ``n`` rows if given."""
    d = np.asarray(d_obs, dtype=np.float64)
    sd = np.sqrt(np.asarray(cd_var, dtype=np.float64))
    shape = d.shape if n is None else (n,) + d.shape
    return d + math.sqrt(alpha) * sd * rng.standard_normal(shape)


def _solve(C: np.ndarray, R: np.ndarray, rcond: float) -> np.ndarray:
    """``C^{-1} R`` for symmetric positive (semi)definite ``C``."""
    try:
        if np.linalg.cond(C) > 1.0 / rcond:
            raise np.linalg.LinAlgError("ill-conditioned")
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(C), R)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        warnings.warn("innovation covariance is singular; using pseudo-inverse", RuntimeWarning, stacklevel=3)
        return np.linalg.pinv(C, rcond=rcond, hermitian=True) @ R


def esmda_update(X: np.ndarray, D: np.ndarray, d_obs, cd_var, alpha: float,
                 rng: np.random.Generator, rcond: float = 1e-12) -> np.ndarray:
    """One smoother step on member-major ``X (N, n_x)`` with predictions ``D (N, n_d)``.

    Covariances come from the forecast ensemble with ``1 / (N - 1)``
    normalization. Each member gets its own perturbed observation vector.
    """
    X = np.asarray(X, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    n = len(X)
    dX = X - X.mean(axis=0)
    dD = D - D.mean(axis=0)
    c_xd = dX.T @ dD / (n - 1)
    c_dd = dD.T @ dD / (n - 1)
    C = c_dd + alpha * np.diag(np.asarray(cd_var, dtype=np.float64))
    Dp = perturb_observations(d_obs, alpha, cd_var, rng, n)
    K = _solve(C, (Dp - D).T, rcond)
    return X + (c_xd @ K).T


@dataclass
class EsmdaResult:
    posterior: np.ndarray
    predictions: list  # forecast data per iteration, then the posterior forecast
    ensembles: list
    resampled: list = field(default_factory=list)


def _evaluate(forward: Callable, X: np.ndarray, mapper: Callable, resample: Callable | None,
              resampled: list, iteration: int) -> tuple[np.ndarray, np.ndarray]:
    """Run ``forward`` on every member; a failing member is redrawn once."""
    out = list(mapper(_safe(forward), list(X)))
    X = X.copy()
    for i, d in enumerate(out):
        if isinstance(d, Exception):
            if resample is None:
                raise ForwardError(f"forward model failed on member {i}: {d}") from d
            X[i] = resample(i, iteration)
            try:
                d = forward(X[i])
            except Exception as exc:  # noqa: BLE001 - reported with the member index
                raise ForwardError(f"forward model failed on member {i} after resampling: {exc}") from exc
            resampled.append((iteration, i))
            out[i] = d
    return X, np.array([np.asarray(d, dtype=np.float64) for d in out])


class _safe:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, x):
        try:
            return self.fn(x)
        except Exception as exc:  # noqa: BLE001 - handled by the caller
            return exc


def esmda_run(prior: np.ndarray, forward: Callable[[np.ndarray], np.ndarray], obs: ObservationSet,
              cfg: EsmdaConfig, mapper: Callable = map, resample: Callable | None = None) -> EsmdaResult:
    """Assimilate ``obs`` with the configured inflation sequence.

    ``forward`` maps one latent vector to predicted data. ``mapper`` applies
    it over the ensemble (builtin ``map`` or a pool's ``map``).
    ``resample(member, iteration)`` draws a replacement latent vector for a
    member whose forward run failed.
    """
    X = np.array(prior, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("prior ensemble must be (members, latent)")
    ensembles = [X.copy()]
    predictions = []
    resampled: list = []
    for k, alpha in enumerate(cfg.alphas):
        X, D = _evaluate(forward, X, mapper, resample, resampled, k)
        ensembles[-1] = X.copy()
        if D.shape != (len(X), len(obs)):
            raise ValueError(f"forward returned {D.shape[1:]} data, expected {len(obs)}")
        predictions.append(D)
        rng = np.random.default_rng([cfg.seed, k])
        X = esmda_update(X, D, obs.values, obs.variance, alpha, rng, cfg.rcond)
        ensembles.append(X.copy())
        log.info("ESMDA iteration %d/%d (alpha %.3f)", k + 1, cfg.n_assimilations, alpha)
    X, D = _evaluate(forward, X, mapper, resample, resampled, len(cfg.alphas))
    ensembles[-1] = X.copy()
    predictions.append(D)
    return EsmdaResult(X, predictions, ensembles, resampled)


def data_mismatch(D: np.ndarray, obs: ObservationSet) -> np.ndarray:
    """Per-member normalized squared mismatch ``sum(((d - d_obs) / std)^2) / N_d``.

    Entries with zero std are compared unscaled.
    """
    sd = np.where(obs.std > 0, obs.std, 1.0)
    return np.mean(((np.asarray(D) - obs.values) / sd) ** 2, axis=1)


# ------------------------------------------------------------------ files

def write_ensemble(path: str | Path, X: np.ndarray, meta: dict | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    write_blob(path, {"kind": "ensemble", "members": X.shape[0], "size": X.shape[1], **(meta or {})},
               [("ensemble", X, "<f8")])


def read_ensemble(path: str | Path) -> tuple[np.ndarray, dict]:
    header, arrays = read_blob(path)
    return arrays["ensemble"], header


def write_observations(path: str | Path, obs: ObservationSet) -> None:
    rows = [(w, p, float(day), float(v), float(s)) for (w, p, day), v, s in zip(obs.descriptors, obs.values, obs.std)]
    write_csv(path, ("well", "phase", "day", "value", "std"), rows)


def read_observations(path: str | Path) -> ObservationSet:
    rows = read_csv(path)
    return ObservationSet([float(r["value"]) for r in rows], [float(r["std"]) for r in rows],
                          [(r["well"], r["phase"], float(r["day"])) for r in rows])
