"""Independent straight-line reference implementations used by the tests.

Nothing here imports the package internals it checks; each oracle is the
most literal version of the quantity it computes.
"""

from __future__ import annotations

import math

import numpy as np


def auroc_pairs(scores, labels) -> float:
    """Concordant pairs plus half the ties, over all positive/negative pairs."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    twice = 0
    for p in pos:
        for q in neg:
            twice += 2 if p > q else (1 if p == q else 0)
    return (twice / 2) / (len(pos) * len(neg))


def auprc_curve(scores, labels) -> float:
    """Average precision from the full PR curve, one point per distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    terms = []
    prev_tp = 0
    for t in sorted(set(scores.tolist()), reverse=True):
        chosen = scores >= t
        tp = int((chosen & labels).sum())
        fp = int((chosen & ~labels).sum())
        terms.append(((tp - prev_tp) / n_pos) * (tp / (tp + fp)))
        prev_tp = tp
    return math.fsum(terms)


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_eigh(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance through Tr((S_a^1/2 S_b S_a^1/2)^1/2), a symmetric route."""
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    ra = sqrtm_psd(ca)
    cross = sqrtm_psd(ra @ cb @ ra)
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * np.trace(cross))


def w2_sorted(a, b) -> float:
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_quantile(a, b, grid: int = 200_000) -> float:
    """Numerical quantile-function integral, valid for unequal sample sizes."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    u = (np.arange(grid) + 0.5) / grid
    qa = a[np.minimum((u * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((u * b.size).astype(int), b.size - 1)]
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


# ---------------------------------------------------------------------------
# diffusion


def alpha_bars_direct(betas) -> list:
    out, prod = [], 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return out


def chain_forward(z0: np.ndarray, betas, n: int, rng: np.random.Generator) -> np.ndarray:
    """Compose single-step transitions ``z_k = sqrt(1 - b_k) z_{k-1} + sqrt(b_k) e_k``."""
    z = z0.copy()
    for k in range(n):
        z = math.sqrt(1 - betas[k]) * z + math.sqrt(betas[k]) * rng.standard_normal(z.shape)
    return z


def ddim_sigma0_reference(eps_fn, betas, x: np.ndarray, grid) -> np.ndarray:
    """DDIM-family deterministic sampler written step by step over an explicit grid."""
    abar = [1.0] + alpha_bars_direct(betas)
    steps = list(grid)
    prevs = [0] + steps[:-1]
    for n, p in zip(reversed(steps), reversed(prevs)):
        e = eps_fn(x, n)
        x0 = (x - math.sqrt(1 - abar[n]) * e) / math.sqrt(abar[n])
        x = math.sqrt(abar[p]) * x0 + math.sqrt(1 - abar[p]) * e
    return x


def ddpm_ancestral(eps_fn, betas, x: np.ndarray, noises) -> np.ndarray:
    """Ancestral sampling with the posterior-mean form and posterior variance.

    ``noises[k]`` is the draw used when stepping from ``n = N - k``.
    """
    n_steps = len(betas)
    abar = [1.0] + alpha_bars_direct(betas)
    for k, n in enumerate(range(n_steps, 0, -1)):
        beta = betas[n - 1]
        e = eps_fn(x, n)
        x0 = (x - math.sqrt(1 - abar[n]) * e) / math.sqrt(abar[n])
        mean = (math.sqrt(abar[n - 1]) * beta / (1 - abar[n])) * x0 \
            + (math.sqrt(1 - beta) * (1 - abar[n - 1]) / (1 - abar[n])) * x
        var = (1 - abar[n - 1]) / (1 - abar[n]) * beta
        x = mean + math.sqrt(var) * noises[k]
    return x
