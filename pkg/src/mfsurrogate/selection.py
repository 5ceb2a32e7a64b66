"""Representative-sample selection: k-means on normalized LF responses, then
one medoid per cluster."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .fileio import read_csv, write_csv


class SelectionError(RuntimeError):
    pass


@dataclass
class Selection:
    """``indices[r]`` is the medoid of cluster ``clusters[r]``; ``inertia[r]`` is
    that cluster's share of the k-means inertia (squared distances to its centroid)."""
    indices: np.ndarray
    clusters: np.ndarray
    inertia: np.ndarray
    labels: np.ndarray


def response_features(rates: np.ndarray) -> np.ndarray:
    """Flatten per-sample ``(wells, phases, n_t)`` rates and z-score each feature.

    Features with zero spread across samples are set to 0.
    """
    X = np.asarray(rates, dtype=np.float64).reshape(len(rates), -1)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    out = np.zeros_like(X)
    ok = sd > 0
    out[:, ok] = (X[:, ok] - mu[ok]) / sd[ok]
    return out


def medoid(points: np.ndarray) -> tuple[int, float]:
    """Row index minimizing the summed Euclidean distance to all rows (ties: smallest)."""
    diff = points[:, None, :] - points[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2)).sum(axis=1)
    i = int(np.argmin(cost))
    return i, float(cost[i])


def select_representatives(features: np.ndarray, n_select: int, seed: int = 0,
                           max_retries: int = 10, n_init: int = 10, max_iter: int = 100) -> Selection:
    """k-means (k-means++, ``n_init`` restarts) into ``n_select`` clusters and a medoid per cluster.

    Clusters are ranked by their smallest member index so the output does
    not depend on k-means label numbering.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D (samples, features) array")
    n = len(X)
    if not 1 <= n_select <= n:
        raise ValueError(f"cannot select {n_select} representatives from {n} samples")
    if n_select == n:
        idx = np.arange(n)
        return Selection(idx, idx.copy(), np.zeros(n), idx.copy())
    for attempt in range(max_retries + 1):
        km = KMeans(n_clusters=n_select, init="k-means++", n_init=n_init, max_iter=max_iter,
                    random_state=int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0]))
        labels = km.fit_predict(X)
        if len(np.unique(labels)) == n_select:
            break
    else:
        raise SelectionError(f"k-means left empty clusters after {max_retries + 1} attempts")
    firsts = sorted(range(n_select), key=lambda c: int(np.flatnonzero(labels == c)[0]))
    relabel = np.empty(n_select, dtype=np.int64)
    relabel[firsts] = np.arange(n_select)
    labels = relabel[labels]
    indices, inertia = [], []
    for c in range(n_select):
        members = np.flatnonzero(labels == c)
        j, _ = medoid(X[members])
        indices.append(int(members[j]))
        centre = X[members].mean(axis=0)
        inertia.append(float(np.sum((X[members] - centre) ** 2)))
    return Selection(np.array(indices), np.arange(n_select), np.array(inertia), labels)


def write_selection(path: str | Path, sel: Selection, sample_ids=None) -> None:
    """CSV columns: rank, sample_id, cluster, inertia."""
    ids = list(sample_ids) if sample_ids is not None else list(range(len(sel.labels)))
    rows = [(r, ids[i], int(c), float(k)) for r, (i, c, k) in enumerate(zip(sel.indices, sel.clusters, sel.inertia))]
    write_csv(path, ("rank", "sample_id", "cluster", "inertia"), rows)


def read_selection(path: str | Path) -> list[dict]:
    return [{"rank": int(r["rank"]), "sample_id": r["sample_id"], "cluster": int(r["cluster"]),
             "inertia": float(r["inertia"])} for r in read_csv(path)]
