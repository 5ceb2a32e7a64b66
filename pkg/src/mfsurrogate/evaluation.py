"""Error metrics, ensemble statistics and the training-data cost model."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fileio import write_csv, write_json

INJECTOR = "injector"
PRODUCER = "producer"


# ------------------------------------------------------------------ field errors

def pressure_error(pred, truth, p_min: float, p_max: float) -> float:
    """Mean over cells and snapshots of ``|p_pred - p_true| / (p_max - p_min)``."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if not p_max > p_min:
        raise ValueError("p_max must exceed p_min")
    return float(np.mean(np.abs(pred - truth)) / (p_max - p_min))


def saturation_error(pred, truth) -> float:
    """Mean over cells and snapshots of ``|S_pred - S_true| / S_true``."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if np.any(truth <= 0):
        raise ValueError("true saturation must be positive in every cell")
    return float(np.mean(np.abs(pred - truth) / truth))


def project_coarse(field, ratios: Sequence[int]) -> np.ndarray:
    """Piecewise-constant injection of coarse values into their fine cells (last three axes)."""
    out = np.asarray(field, dtype=np.float64)
    for ax, r in zip((-3, -2, -1), ratios):
        out = np.repeat(out, int(r), axis=ax)
    return out


def lf_projection_error(lf_pressure, lf_saturation, hf_pressure, hf_saturation, ratios,
                        p_min: float, p_max: float) -> tuple[float, float]:
    """Pressure and saturation errors of an LF solution projected to the fine grid."""
    return (pressure_error(project_coarse(lf_pressure, ratios), hf_pressure, p_min, p_max),
            saturation_error(project_coarse(lf_saturation, ratios), hf_saturation))


# ------------------------------------------------------------------ rate error

@dataclass
class RateError:
    value: float
    terms: dict
    excluded: list = field(default_factory=list)


def rate_error(pred: Mapping, truth: Mapping, days: Sequence[float], kinds: Mapping[str, str]) -> RateError:
    """Injector-water plus producer-water plus producer-oil relative rate errors.

    ``pred[well][phase]`` and ``truth[well][phase]`` are series on ``days``;
    ``kinds[well]`` is ``"injector"`` or ``"producer"``. Each term averages,
    over the wells it covers, the trapezoid integral of the absolute mismatch
    divided by the integral of the true rate. Wells whose true integral is
    zero are left out of their term and listed in ``excluded``.
    """
    t = np.asarray(days, dtype=np.float64)
    groups = {("injector", "water"): [], ("producer", "water"): [], ("producer", "oil"): []}
    excluded = []
    for well, kind in kinds.items():
        for (k, phase), vals in groups.items():
            if k != kind:
                continue
            q = np.asarray(truth[well][phase], dtype=np.float64)
            qh = np.asarray(pred[well][phase], dtype=np.float64)
            den = np.trapezoid(q, t)
            if den <= 0:
                excluded.append((well, phase))
                continue
            vals.append(np.trapezoid(np.abs(qh - q), t) / den)
    terms = {f"{k}_{p}": (float(np.mean(v)) if v else 0.0) for (k, p), v in groups.items()}
    return RateError(float(sum(terms.values())), terms, excluded)


# ------------------------------------------------------------------ summaries

def ensemble_percentiles(series, probs: Sequence[float] = (10, 50, 90)) -> np.ndarray:
    """Per-snapshot percentiles of ``(members, n_t)`` series; shape ``(len(probs), n_t)``."""
    s = np.asarray(series, dtype=np.float64)
    if s.ndim == 1:
        s = s[None]
    return np.percentile(s, probs, axis=0, method="linear")


def box_summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    p25, p50, p75 = np.percentile(v, (25, 50, 75))
    return {"min": float(v.min()), "p25": float(p25), "p50": float(p50), "p75": float(p75),
            "max": float(v.max()), "n": int(v.size)}


def histogram(values, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    return np.histogram(np.asarray(values, dtype=np.float64), bins=bins)


@dataclass
class ErrorReport:
    label: str
    delta_p: np.ndarray
    delta_s: np.ndarray
    delta_r: np.ndarray | None = None

    def summary(self) -> dict:
        out = {"label": self.label, "delta_p": box_summary(self.delta_p), "delta_s": box_summary(self.delta_s)}
        if self.delta_r is not None:
            out["delta_r"] = box_summary(self.delta_r)
        return out


def write_report(directory: str | Path, reports: Sequence[ErrorReport], sample_ids: Sequence, extra=None) -> None:
    """Per-sample CSV per report plus a JSON summary of medians and quartiles."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for r in reports:
        cols = ["sample_id", "delta_p", "delta_s"] + (["delta_r"] if r.delta_r is not None else [])
        rows = []
        for i, sid in enumerate(sample_ids):
            row = [sid, float(r.delta_p[i]), float(r.delta_s[i])]
            if r.delta_r is not None:
                row.append(float(r.delta_r[i]))
            rows.append(row)
        write_csv(d / f"errors_{r.label}.csv", cols, rows)
    write_json(d / "summary.json", {"reports": [r.summary() for r in reports], **(extra or {})})


# ------------------------------------------------------------------ cost model

@dataclass(frozen=True)
class TrainingCost:
    """Simulation cost in units of one HF run.

    ``upscale`` and ``lf`` hold the unrounded terms; ``total`` adds the
    terms rounded to whole HF runs, the way the published estimate is
    quoted. ``total_exact`` is the unrounded, linear sum.
    """
    upscale: float
    lf: float
    hf: float
    reference: float

    @property
    def total_exact(self) -> float:
        return self.upscale + self.lf + self.hf

    @property
    def total(self) -> int:
        return int(round(self.upscale)) + int(round(self.lf)) + int(round(self.hf))

    @property
    def savings(self) -> float:
        return 1.0 - self.total / self.reference if self.reference else 0.0

    def to_dict(self) -> dict:
        return {"upscale": self.upscale, "lf": self.lf, "hf": self.hf, "total_exact": self.total_exact,
                "total": self.total, "reference": self.reference, "savings": self.savings}


def training_cost(n_lf: int, n_hf: int, cell_ratio: float, solves_per_run: float,
                  unknowns_per_cell: int = 2, n_reference: int | None = None) -> TrainingCost:
    """Multifidelity data cost, assuming linear-solver work linear in unknowns.

    An LF run costs ``cell_ratio`` HF runs. Upscaling one model is a single
    linear solve with one unknown per cell, i.e. ``1 / (solves_per_run *
    unknowns_per_cell)`` of an HF run. The reference is an all-HF training
    set of ``n_reference`` runs (``n_lf`` when not given).
    """
    if n_lf < 0 or n_hf < 0 or cell_ratio <= 0 or solves_per_run <= 0:
        raise ValueError("counts must be nonnegative and ratios positive")
    up = n_lf / solves_per_run / unknowns_per_cell
    ref = n_lf if n_reference is None else n_reference
    return TrainingCost(up, n_lf * cell_ratio, float(n_hf), float(ref))
