"""Synthetic asynchronous patients with a known latent disease state.

Each patient has a fixed anatomy (a thorax-like ellipse) and a disease state
``s(t)`` in [0, 1] that follows a reflecting random walk with a per-patient
drift. Images show the anatomy plus a bright opacity disk whose area grows
linearly with ``s``; EHR channels are noisy linear readouts of ``s`` and its
hourly increment, observed on an irregular grid. The ground truth is written
under ``<patient>/oracle/`` which the cohort loader never opens.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .config import WorldConfig
from .dataset import EhrSeries, ImageSample, Patient, write_patient
from .seeding import child_seed

BACKGROUND = 0.05
BLOB_LEVEL = 0.92
BLOB_THRESHOLD = 0.66
MAX_BLOB_RADIUS = 0.19  # fraction of image size at s = 1
STATIC_NAMES = ("age", "gender")
ORACLE_DIR = "oracle"


@dataclass(frozen=True)
class Anatomy:
    cx: float
    cy: float
    ax: float
    ay: float
    intensity: float
    blob_x: float
    blob_y: float


CANONICAL_ANATOMY = Anatomy(0.5, 0.5, 0.36, 0.4, 0.45, 0.5, 0.55)


@dataclass(frozen=True)
class PatientTruth:
    anatomy: Anatomy
    hours: np.ndarray  # integer hours covered by state_path
    state_path: np.ndarray

    def state_at(self, hour: float) -> float:
        return float(np.interp(hour, self.hours, self.state_path))


def _reflect(x: np.ndarray) -> np.ndarray:
    y = np.mod(x, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def _soft_disk(dist: np.ndarray, radius: float) -> np.ndarray:
    # one-pixel linear edge; dist and radius in pixels
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def render_image(anatomy: Anatomy, s: float, size: int, noise: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Render one image; the blob area is proportional to ``s``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    ex = (xx - anatomy.cx * size) / (anatomy.ax * size)
    ey = (yy - anatomy.cy * size) / (anatomy.ay * size)
    r = np.sqrt(ex ** 2 + ey ** 2)
    body = np.clip((1.0 - r) * anatomy.ax * size + 0.5, 0.0, 1.0)
    img = BACKGROUND + (anatomy.intensity - BACKGROUND) * body
    radius = MAX_BLOB_RADIUS * size * np.sqrt(np.clip(s, 0.0, 1.0))
    if radius > 0:
        dist = np.hypot(xx - anatomy.blob_x * size, yy - anatomy.blob_y * size)
        alpha = _soft_disk(dist, radius) if radius >= 0.5 else np.zeros_like(dist)
        img = (1.0 - alpha) * img + alpha * BLOB_LEVEL
    if noise > 0:
        if rng is None:
            raise ValueError("noise > 0 requires an rng")
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _blob_statistic(pixels: np.ndarray) -> float:
    p = np.asarray(pixels, dtype=np.float64)
    return float(np.clip((p - BLOB_THRESHOLD) / (BLOB_LEVEL - BLOB_THRESHOLD), 0.0, 1.0).sum() / p.size)


@lru_cache(maxsize=8)
def _calibration(size: int) -> Tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(0.0, 1.0, 401)
    stats = np.array([_blob_statistic(render_image(CANONICAL_ANATOMY, s, size)) for s in grid])
    # np.interp needs strictly increasing abscissae; keep the first s for each statistic
    keep = np.concatenate([[True], np.diff(stats) > 0])
    return stats[keep], grid[keep]


def measure_opacity(pixels: np.ndarray) -> float:
    """Estimate ``s`` from an image by inverting the blob-area calibration curve."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {p.shape}")
    stats, grid = _calibration(p.shape[0])
    return float(np.clip(np.interp(_blob_statistic(p), stats, grid), 0.0, 1.0))


def _readout_coefficients(k: int) -> Tuple[float, float]:
    """(state weight, increment weight) for EHR channel ``k``."""
    table = [(1.0, 0.0), (0.0, 10.0), (0.5, 5.0), (-1.0, 0.0), (0.3, -3.0), (0.0, 0.0)]
    if k < len(table):
        return table[k]
    return float(np.cos(k)), float(5.0 * np.sin(k))


def _abnormality_thresholds(n: int) -> np.ndarray:
    return np.array([0.5]) if n == 1 else np.linspace(0.3, 0.7, n)


def generate_patient(config: WorldConfig, patient_seed: int, patient_id: str = "p0000",
                     state_override: Optional[Callable[[np.ndarray], np.ndarray]] = None
                     ) -> Tuple[Patient, PatientTruth]:
    """Generate one patient. Identical ``(config, patient_seed)`` give identical output."""
    rng = np.random.default_rng(patient_seed)
    size = config.image_size
    anatomy = Anatomy(
        cx=float(rng.uniform(0.44, 0.56)),
        cy=float(rng.uniform(0.44, 0.56)),
        ax=float(rng.uniform(0.3, 0.4)),
        ay=float(rng.uniform(0.34, 0.44)),
        intensity=float(rng.uniform(0.3, 0.55)),
        blob_x=0.0,
        blob_y=0.0,
    )
    anatomy = Anatomy(anatomy.cx, anatomy.cy, anatomy.ax, anatomy.ay, anatomy.intensity,
                      blob_x=float(anatomy.cx + rng.uniform(-0.1, 0.1)),
                      blob_y=float(anatomy.cy + rng.uniform(-0.08, 0.1)))
    stay = int(rng.integers(config.stay_min, config.stay_max + 1))

    start = config.first_image_min
    hours = np.arange(start, stay + 1)
    s0 = config.initial_state if config.initial_state is not None else float(rng.uniform(0.05, 0.95))
    drift = float(rng.normal(0.0, config.drift_std)) if config.drift_std > 0 else 0.0
    steps = drift + config.state_noise * rng.standard_normal(len(hours) - 1)
    path = np.empty(len(hours))
    path[0] = s0
    for i, step in enumerate(steps, start=1):
        path[i] = _reflect(np.array(path[i - 1] + step))
    if state_override is not None:
        path = np.clip(np.asarray(state_override(hours), dtype=np.float64), 0.0, 1.0)
    truth = PatientTruth(anatomy, hours, path)

    def s_at(h: int) -> float:
        return float(path[h - start])

    # images
    times = []
    t = int(rng.integers(config.first_image_min, config.first_image_max + 1))
    while t <= stay:
        times.append(t)
        t += max(config.image_gap_min, int(round(rng.exponential(config.image_gap_mean))))
    thresholds = _abnormality_thresholds(config.n_abnormality)
    images = []
    for t in times:
        s = s_at(t)
        px = render_image(anatomy, s, size, config.image_noise, rng if config.image_noise > 0 else None)
        images.append(ImageSample(px, t, s > thresholds))

    # EHR on an irregular hourly grid starting at admission
    k = config.ehr_channels
    ehr_hours = np.arange(0, stay)
    row_obs = rng.random(len(ehr_hours)) < config.obs_prob
    chan_obs = rng.random((len(ehr_hours), k)) < config.channel_obs_prob
    noise = rng.standard_normal((len(ehr_hours), k))
    s_now = path[ehr_hours - start]
    s_prev = path[np.maximum(ehr_hours - 1, start) - start]
    inc = s_now - s_prev
    coef = np.array([_readout_coefficients(j) for j in range(k)])
    values = s_now[:, None] * coef[:, 0] + inc[:, None] * coef[:, 1] + config.observation_noise * noise
    mask = chan_obs & row_obs[:, None]
    keep = mask.any(axis=1)
    static = np.array([float(rng.normal(0.0, 1.0)), float(rng.integers(0, 2))])
    ehr = EhrSeries(np.where(mask, values, 0.0)[keep], mask[keep], ehr_hours[keep].astype(np.int64), static)

    s_final = s_at(stay)
    s_mean = float(path[(hours >= 0) & (hours <= stay)].mean())
    n_ph = config.n_phenotypes
    w = np.linspace(0.0, 1.0, n_ph) if n_ph > 1 else np.array([1.0])
    theta = 0.35 + 0.4 * ((np.arange(n_ph) * 7) % max(n_ph, 1)) / max(n_ph - 1, 1)
    phenotype = (w * s_final + (1.0 - w) * s_mean) > theta
    tasks = {"mortality": np.array([s_final > 0.7]), "phenotype": phenotype}
    return Patient(patient_id, tuple(images), ehr, stay, tasks), truth


def write_truth(root: str | Path, patient_id: str, truth: PatientTruth) -> None:
    d = Path(root) / patient_id / ORACLE_DIR
    d.mkdir(parents=True, exist_ok=True)
    with (d / "truth.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "s"])
        for h, s in zip(truth.hours, truth.state_path):
            w.writerow([int(h), repr(float(s))])
    (d / "anatomy.json").write_text(json.dumps(asdict(truth.anatomy), sort_keys=True), encoding="utf-8")


def load_truth(root: str | Path, patient_id: str) -> PatientTruth:
    """Read the ground-truth state path. For evaluation oracles only."""
    d = Path(root) / patient_id / ORACLE_DIR
    hours, states = [], []
    with (d / "truth.csv").open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            hours.append(int(row["hour"]))
            states.append(float(row["s"]))
    anatomy = Anatomy(**json.loads((d / "anatomy.json").read_text(encoding="utf-8")))
    return PatientTruth(anatomy, np.asarray(hours), np.asarray(states))


def generate_world(config: WorldConfig, root: str | Path) -> List[str]:
    """Write ``config.n_patients`` patients to ``root``; returns their ids."""
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(config.n_patients):
        pid = f"p{i:04d}"
        patient, truth = generate_patient(config, child_seed(config.seed, "patient", i), pid)
        write_patient(root, patient, static_names=STATIC_NAMES)
        write_truth(root, pid, truth)
        ids.append(pid)
    (root / "world.json").write_text(json.dumps(asdict(config), sort_keys=True, indent=1), encoding="utf-8")
    return ids
