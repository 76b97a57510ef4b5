"""Evaluation kernels: ranking metrics, distribution distances and stratified reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from .errors import DataError


def _check_binary(scores: np.ndarray, labels: np.ndarray, index: Optional[int] = None) -> None:
    where = "" if index is None else f" (label index {index})"
    if scores.shape != labels.shape:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} differ{where}")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataError(f"need at least one positive and one negative{where}")


def _binary_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    # Mann-Whitney U with average ranks is the concordance count with ties as 1/2
    ranks = rankdata(scores, method="average")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _binary_auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # one operating point per distinct score
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    n_pos = int(labels.sum())
    precision = tp / (tp + fp)
    d_tp = np.diff(np.r_[0, tp])
    return math.fsum((d_tp / n_pos) * precision)


def _per_label(fn: Callable, scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.ndim == 1:
        _check_binary(scores, labels)
        return fn(scores, labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be matching 1-D or 2-D arrays")
    vals = []
    for j in range(scores.shape[1]):
        _check_binary(scores[:, j], labels[:, j], j)
        vals.append(fn(scores[:, j], labels[:, j]))
    return float(np.mean(vals))


def auroc(scores, labels) -> float:
    """Area under the ROC curve; macro-averaged over columns for 2-D input."""
    return _per_label(_binary_auroc, scores, labels)


def auprc(scores, labels) -> float:
    """Average precision (step-wise PR integration); macro-averaged for 2-D input."""
    return _per_label(_binary_auprc, scores, labels)


def _flatten(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:]))) if x.ndim > 1 else x[:, None]


def gaussian_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    x = _flatten(samples)
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 samples for a covariance, got {x.shape[0]}")
    return x.mean(0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(samples_a, samples_b, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two sample sets."""
    mu_a, cov_a = gaussian_stats(samples_a)
    mu_b, cov_b = gaussian_stats(samples_b)
    if mu_a.shape != mu_b.shape:
        raise DataError(f"dimension mismatch {mu_a.shape} vs {mu_b.shape}")
    dim = mu_a.size
    if min(_flatten(samples_a).shape[0], _flatten(samples_b).shape[0]) <= dim:
        cov_a = cov_a + eps * np.eye(dim)
        cov_b = cov_b + eps * np.eye(dim)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if not np.all(np.isfinite(covmean)):
        off = eps * np.eye(dim)
        covmean = linalg.sqrtm((cov_a + off) @ (cov_b + off))
    covmean = np.real(covmean)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(fd, 0.0)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between two 1-D empirical distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DataError("empty sample set")
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    # integrate squared quantile differences over merged cdf levels
    levels = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.r_[0.0, levels])
    mid = levels - widths / 2.0
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


def sliced_wasserstein(samples_a, samples_b, n_projections: int = 128, seed: int = 0) -> float:
    """Mean over random unit directions of the 1-D W2 distance of the projections."""
    a, b = _flatten(samples_a), _flatten(samples_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise DataError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if n_projections < 1:
        raise DataError("n_projections must be >= 1")
    dim = a.shape[1]
    if dim == 1:
        dirs = np.ones((n_projections, 1))
    else:
        dirs = np.random.default_rng(seed).standard_normal((n_projections, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, i], pb[:, i]) for i in range(n_projections)]))


def fid(images_a, images_b, embedder: Callable[[np.ndarray], np.ndarray]) -> float:
    """Frechet distance between embedded image sets; ``embedder`` maps (N, H, W) to (N, D)."""
    return frechet_distance(embedder(np.asarray(images_a)), embedder(np.asarray(images_b)))


def flatten_embedder(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64).reshape(len(images), -1)


def generation_distances(generated, target, n_projections: int = 128, seed: int = 0) -> Dict[str, float]:
    """FD and sliced WD in latent space, raw and normalized by dimension."""
    g, t = _flatten(generated), _flatten(target)
    dim = g.shape[1]
    fd = frechet_distance(g, t)
    wd = sliced_wasserstein(g, t, n_projections, seed)
    return {"fd": fd, "fd_per_dim": fd / dim, "wd": wd * math.sqrt(dim), "wd_per_dim": wd}


# ---------------------------------------------------------------------------
# Stratified reporting

STRATUM_OVERALL = "overall"


def stratum_names(edges: Sequence[float]) -> List[str]:
    names = [f"delta<{edges[0]:g}"]
    names += [f"{lo:g}<=delta<{hi:g}" for lo, hi in zip(edges[:-1], edges[1:])]
    names.append(f"delta>={edges[-1]:g}")
    return names


def assign_strata(gaps: Sequence[float], edges: Sequence[float] = (12.0, 24.0, 36.0)) -> np.ndarray:
    """Index of the half-open bin ``[lo, hi)`` for each gap."""
    return np.searchsorted(np.asarray(edges, dtype=np.float64), np.asarray(gaps, dtype=np.float64), side="right")


@dataclass
class StratumResult:
    name: str
    count: int
    prevalence: Optional[float]
    metrics: Dict[str, Optional[Dict[str, float]]] = field(default_factory=dict)


@dataclass
class StratifiedReport:
    strata: List[StratumResult]

    def __getitem__(self, name: str) -> StratumResult:
        for s in self.strata:
            if s.name == name:
                return s
        raise KeyError(name)

    def rows(self) -> List[dict]:
        out = []
        for s in self.strata:
            for metric, val in s.metrics.items():
                out.append({
                    "metric": metric,
                    "stratum": s.name,
                    "mean": None if val is None else val["mean"],
                    "std": None if val is None else val["std"],
                    "count": s.count,
                    "prevalence": s.prevalence,
                })
        return out


def stratified_eval(predictions: Dict[int, np.ndarray], labels, gaps,
                    edges: Sequence[float] = (12.0, 24.0, 36.0)) -> StratifiedReport:
    """Per-stratum mean/std over seeds of AUROC and AUPRC.

    ``predictions`` maps seed -> scores shaped like ``labels``. Strata whose
    labels are empty or single-class report ``None`` for the metric.
    """
    labels = np.asarray(labels).astype(bool)
    gaps = np.asarray(gaps, dtype=np.float64)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
        predictions = {k: np.asarray(v).reshape(-1) for k, v in predictions.items()}
    bins = assign_strata(gaps, edges)
    groups = [(STRATUM_OVERALL, np.ones(len(gaps), dtype=bool))]
    groups += [(name, bins == i) for i, name in enumerate(stratum_names(edges))]
    seeds = sorted(predictions)
    strata = []
    for name, sel in groups:
        count = int(sel.sum())
        prevalence = float(labels[sel].mean()) if count else None
        result = StratumResult(name, count, prevalence)
        for metric, fn in (("auroc", auroc), ("auprc", auprc)):
            vals = []
            for seed in seeds:
                try:
                    vals.append(fn(np.asarray(predictions[seed])[sel], labels[sel]))
                except DataError:
                    vals = []
                    break
            result.metrics[metric] = (
                {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n_seeds": len(vals)} if vals else None
            )
        strata.append(result)
    return StratifiedReport(strata)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])
