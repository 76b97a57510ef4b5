"""Data model, on-disk cohort format, patient-wise splits and sample extraction.

Cohort layout (one directory per patient)::

    <root>/<patient_id>/images/<hour>.png   8-bit grayscale
    <root>/<patient_id>/ehr.csv             hour, K value columns, K mask columns
    <root>/<patient_id>/labels.json         stay length, static fields,
                                            abnormality vectors per image hour,
                                            task labels

Hours are integers relative to ICU admission and may be negative for images
taken before admission. Anything else inside a patient directory (for
example the synthetic world's ``oracle/`` folder) is ignored by the loader.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .errors import DataError

MASK_PREFIX = "mask_"


@dataclass(frozen=True)
class EhrSeries:
    values: np.ndarray  # (T, K) float
    mask: np.ndarray  # (T, K) bool, True = observed
    hours: np.ndarray  # (T,) int, strictly increasing
    static: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return int(self.hours.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.values.shape[1])

    def validate(self, max_len: Optional[int] = None, where: str = "series") -> None:
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DataError(f"{where}: values {self.values.shape} and mask {self.mask.shape} differ")
        if self.hours.shape != (self.values.shape[0],):
            raise DataError(f"{where}: hours length does not match values")
        if len(self.hours) > 1 and np.any(np.diff(self.hours) <= 0):
            raise DataError(f"{where}: hours are not strictly increasing")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.static)):
            raise DataError(f"{where}: non-finite entries")
        if max_len is not None and len(self) > max_len:
            raise DataError(f"{where}: length {len(self)} exceeds max length {max_len}")

    def window(self, start: float, end: float) -> "EhrSeries":
        """Rows with ``start < hour <= end``."""
        keep = (self.hours > start) & (self.hours <= end)
        return EhrSeries(self.values[keep], self.mask[keep], self.hours[keep], self.static)

    def closed_window(self, start: float, end: float) -> "EhrSeries":
        keep = (self.hours >= start) & (self.hours <= end)
        return EhrSeries(self.values[keep], self.mask[keep], self.hours[keep], self.static)

    def last(self, n: int) -> "EhrSeries":
        """Keep the ``n`` most recent rows."""
        if len(self) <= n:
            return self
        return EhrSeries(self.values[-n:], self.mask[-n:], self.hours[-n:], self.static)

    def shifted(self, hours: int) -> "EhrSeries":
        return EhrSeries(self.values, self.mask, self.hours + hours, self.static)


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray  # (H, W) float in [0, 1]
    taken_at: int
    abnormality: np.ndarray  # (L,) bool

    def validate(self, compression: int = 8, n_labels: Optional[int] = None, where: str = "image") -> None:
        h, w = self.pixels.shape
        if h % compression or w % compression:
            raise DataError(f"{where}: size {w}x{h} is not a multiple of {compression}")
        if self.pixels.min(initial=0.0) < 0.0 or self.pixels.max(initial=0.0) > 1.0:
            raise DataError(f"{where}: pixels outside [0, 1]")
        if n_labels is not None and self.abnormality.shape != (n_labels,):
            raise DataError(f"{where}: expected {n_labels} abnormality labels, got {self.abnormality.shape}")


@dataclass(frozen=True)
class Patient:
    patient_id: str
    images: Tuple[ImageSample, ...]
    ehr: EhrSeries
    stay_hours: int
    tasks: Dict[str, np.ndarray]


@dataclass(frozen=True)
class LdmSample:
    patient_id: str
    reference: ImageSample
    target: ImageSample
    ehr: EhrSeries
    target_labels: np.ndarray


@dataclass(frozen=True)
class PredictionSample:
    patient_id: str
    last_image: ImageSample
    ehr_48h: EhrSeries
    task_labels: np.ndarray
    gap_delta: float
    window_hours: int = 48

    @property
    def generation_context(self) -> EhrSeries:
        """EHR between the last image and the prediction time, ``(t0, window]``."""
        return self.ehr_48h.window(self.last_image.taken_at, self.window_hours)


@dataclass(frozen=True)
class CohortSplit:
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSplit":
        return cls(tuple(data["train"]), tuple(data["validation"]), tuple(data["test"]))


# ---------------------------------------------------------------------------
# I/O


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "I;16", "I"):
            raise DataError(f"{path}: expected grayscale PNG, got mode {img.mode}")
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def _write_png(path: Path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def _read_ehr_csv(path: Path, pid: str) -> Tuple[EhrSeries, List[str]]:
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file (header required)")
    header = rows[0]
    if not header or header[0] != "hour":
        raise DataError(f"{path}: first column must be 'hour'")
    cols = header[1:]
    if len(cols) % 2:
        raise DataError(f"{path}: missing mask channel (odd number of data columns)")
    k = len(cols) // 2
    names, masks = cols[:k], cols[k:]
    expected = [MASK_PREFIX + n for n in names]
    if masks != expected:
        raise DataError(f"{path}: missing mask channel; expected columns {expected}, got {masks}")
    hours, values, mask = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            hours.append(int(row[0]))
            m = [int(x) for x in row[1 + k:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if any(x not in (0, 1) for x in m):
            raise DataError(f"{path}:{lineno}: mask entries must be 0 or 1")
        vals = []
        for observed, text in zip(m, row[1:1 + k]):
            if text.strip() == "":
                if observed:
                    raise DataError(f"{path}:{lineno}: observed entry has no value")
                vals.append(0.0)
                continue
            try:
                v = float(text)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            # masked entries carry a placeholder until the normalizer imputes them
            vals.append(v if observed else 0.0)
        values.append(vals)
        mask.append(m)
    series = EhrSeries(
        values=np.asarray(values, dtype=np.float64).reshape(-1, k),
        mask=np.asarray(mask, dtype=bool).reshape(-1, k),
        hours=np.asarray(hours, dtype=np.int64),
    )
    try:
        series.validate(where=f"patient {pid} ({path.name})")
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return series, names


def load_patient(directory: Path, compression: int = 8, n_labels: Optional[int] = None) -> Patient:
    pid = directory.name
    labels_path = directory / "labels.json"
    ehr_path = directory / "ehr.csv"
    for p in (labels_path, ehr_path):
        if not p.exists():
            raise DataError(f"patient {pid}: missing {p.name}")
    try:
        labels = json.loads(labels_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{labels_path}: {exc}") from exc
    for key in ("stay_hours", "static", "abnormality", "tasks"):
        if key not in labels:
            raise DataError(f"{labels_path}: missing field {key!r}")
    ehr, _ = _read_ehr_csv(ehr_path, pid)
    static = labels["static"]
    ehr = EhrSeries(ehr.values, ehr.mask, ehr.hours, np.asarray([float(static[k]) for k in sorted(static)]))

    images = []
    image_dir = directory / "images"
    files = sorted(image_dir.glob("*.png")) if image_dir.exists() else []
    for f in files:
        try:
            hour = int(f.stem)
        except ValueError as exc:
            raise DataError(f"{f}: image file name must be an integer hour") from exc
        abn = labels["abnormality"].get(str(hour))
        if abn is None:
            raise DataError(f"{labels_path}: no abnormality vector for image hour {hour}")
        img = ImageSample(_read_png(f), hour, np.asarray(abn, dtype=bool))
        img.validate(compression, n_labels, where=f"patient {pid} image {f.name}")
        images.append(img)
    images.sort(key=lambda im: im.taken_at)
    tasks = {k: np.asarray(v, dtype=bool).reshape(-1) for k, v in sorted(labels["tasks"].items())}
    return Patient(pid, tuple(images), ehr, int(labels["stay_hours"]), tasks)


def load_cohort(root: str | Path, compression: int = 8, n_labels: Optional[int] = None) -> List[Patient]:
    """Load and validate every patient under ``root``, ordered by patient id."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"cohort directory {root} does not exist")
    patients = []
    names = set()
    for d in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith((".", "_"))):
        patients.append(load_patient(d, compression, n_labels))
        names.add(patients[-1].ehr.n_channels)
    if len(names) > 1:
        raise DataError(f"{root}: patients disagree on EHR channel count {sorted(names)}")
    return patients


def write_patient(root: str | Path, patient: Patient, channel_names: Optional[Sequence[str]] = None,
                  static_names: Optional[Sequence[str]] = None) -> Path:
    root = Path(root)
    d = root / patient.patient_id
    (d / "images").mkdir(parents=True, exist_ok=True)
    k = patient.ehr.n_channels
    names = list(channel_names) if channel_names is not None else [f"x{i}" for i in range(k)]
    with (d / "ehr.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", *names, *(MASK_PREFIX + n for n in names)])
        for h, vals, m in zip(patient.ehr.hours, patient.ehr.values, patient.ehr.mask):
            w.writerow([int(h), *(repr(float(v)) if o else "" for v, o in zip(vals, m)), *(int(o) for o in m)])
    for img in patient.images:
        _write_png(d / "images" / f"{img.taken_at}.png", img.pixels)
    s_names = list(static_names) if static_names is not None else [f"s{i}" for i in range(len(patient.ehr.static))]
    labels = {
        "stay_hours": int(patient.stay_hours),
        "static": {n: float(v) for n, v in zip(s_names, patient.ehr.static)},
        "abnormality": {str(img.taken_at): [int(b) for b in img.abnormality] for img in patient.images},
        "tasks": {k: [int(b) for b in v] for k, v in patient.tasks.items()},
    }
    (d / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True), encoding="utf-8")
    return d


# ---------------------------------------------------------------------------
# Splits and sample extraction


def split_patients(patient_ids: Iterable[str], ratio: Sequence[int] = (24, 4, 7), seed: int = 0) -> CohortSplit:
    ids = sorted(set(patient_ids))
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise DataError("ratio must have three positive entries")
    n = len(ids)
    if n < len(ratio):
        raise DataError(f"cannot split {n} patients into {len(ratio)} partitions")
    total = float(sum(ratio))
    exact = [n * r / total for r in ratio]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(3):
        if sizes[i] == 0:
            donor = max(range(3), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return CohortSplit(tuple(sorted(shuffled[:a])), tuple(sorted(shuffled[a:b])), tuple(sorted(shuffled[b:])))


def extract_ldm_pairs(patient: Patient, min_gap_hours: float = 12) -> List[LdmSample]:
    """All ordered image pairs further apart than ``min_gap_hours``."""
    imgs = sorted(patient.images, key=lambda im: im.taken_at)
    out = []
    for i, ref in enumerate(imgs):
        for tgt in imgs[i + 1:]:
            if tgt.taken_at - ref.taken_at > min_gap_hours:
                out.append(LdmSample(patient.patient_id, ref, tgt,
                                     patient.ehr.window(ref.taken_at, tgt.taken_at), tgt.abnormality))
    return out


def extract_prediction_sample(patient: Patient, task: str = "mortality", window_hours: int = 48) -> Optional[PredictionSample]:
    if patient.stay_hours < window_hours:
        raise DataError(f"patient {patient.patient_id}: stay of {patient.stay_hours} h is shorter than "
                        f"the {window_hours} h observation window")
    if task not in patient.tasks:
        raise DataError(f"patient {patient.patient_id}: no labels for task {task!r}")
    eligible = [im for im in patient.images if im.taken_at <= window_hours]
    if not eligible:
        return None
    last = max(eligible, key=lambda im: im.taken_at)
    return PredictionSample(
        patient_id=patient.patient_id,
        last_image=last,
        ehr_48h=patient.ehr.closed_window(0, window_hours),
        task_labels=patient.tasks[task],
        gap_delta=float(window_hours - last.taken_at),
        window_hours=window_hours,
    )


def prediction_samples(patients: Sequence[Patient], task: str, window_hours: int = 48) -> List[PredictionSample]:
    """Prediction triplets for every eligible patient; short stays and stays without images are skipped."""
    out = []
    for p in patients:
        if p.stay_hours < window_hours:
            continue
        s = extract_prediction_sample(p, task, window_hours)
        if s is not None:
            out.append(s)
    return out


# ---------------------------------------------------------------------------
# Normalization and batching


@dataclass
class EhrNormalizer:
    """Channel-wise mean imputation followed by standardization.

    Statistics come from observed training entries only. After ``transform``
    masked entries equal exactly zero (the standardized mean).
    """

    mean: np.ndarray
    std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray

    @classmethod
    def fit(cls, series: Sequence[EhrSeries]) -> "EhrNormalizer":
        if not series:
            raise DataError("cannot fit normalizer on an empty series list")
        k = series[0].n_channels
        vals = np.concatenate([s.values for s in series]) if series else np.zeros((0, k))
        mask = np.concatenate([s.mask for s in series]) if series else np.zeros((0, k), bool)
        cnt = mask.sum(0)
        mean = np.where(cnt > 0, (vals * mask).sum(0) / np.maximum(cnt, 1), 0.0)
        var = np.where(cnt > 1, (((vals - mean) * mask) ** 2).sum(0) / np.maximum(cnt - 1, 1), 1.0)
        std = np.sqrt(np.maximum(var, 1e-12))
        static = np.stack([s.static for s in series])
        s_std = static.std(0)
        return cls(mean, std, static.mean(0), np.where(s_std > 1e-12, s_std, 1.0))

    def transform(self, s: EhrSeries) -> EhrSeries:
        values = np.where(s.mask, (s.values - self.mean) / self.std, 0.0)
        static = (s.static - self.static_mean) / self.static_std if len(s.static) else s.static
        return EhrSeries(values, s.mask, s.hours, static)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean", "std", "static_mean", "static_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "EhrNormalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "static_mean", "static_std")))


@dataclass
class EhrBatch:
    values: torch.Tensor  # (B, T, K + S)
    mask: torch.Tensor  # (B, T, K + S) float 0/1
    hours: torch.Tensor  # (B, T) float
    valid: torch.Tensor  # (B, T) bool, False = padding

    def to(self, dtype: torch.dtype) -> "EhrBatch":
        return EhrBatch(self.values.to(dtype), self.mask.to(dtype), self.hours.to(dtype), self.valid)

    def select(self, index) -> "EhrBatch":
        return EhrBatch(self.values[index], self.mask[index], self.hours[index], self.valid[index])


def collate_series(series: Sequence[EhrSeries], max_len: int, normalizer: Optional[EhrNormalizer] = None,
                   include_static: bool = True, pad_to: Optional[int] = None,
                   dtype: torch.dtype = torch.float32) -> EhrBatch:
    """Pad a list of series into a batch.

    Series longer than ``max_len`` keep their most recent rows. Static
    variables are broadcast as constant, always-observed extra channels.
    """
    prepared = []
    for s in series:
        s = normalizer.transform(s) if normalizer is not None else s
        prepared.append(s.last(max_len))
    t = max([len(s) for s in prepared], default=0)
    if pad_to is not None:
        t = max(t, pad_to)
    k = prepared[0].n_channels if prepared else 0
    n_static = len(prepared[0].static) if (prepared and include_static) else 0
    b = len(prepared)
    values = np.zeros((b, t, k + n_static))
    mask = np.zeros((b, t, k + n_static))
    hours = np.zeros((b, t))
    valid = np.zeros((b, t), dtype=bool)
    for i, s in enumerate(prepared):
        n = len(s)
        values[i, :n, :k] = s.values
        mask[i, :n, :k] = s.mask
        if n_static:
            values[i, :n, k:] = s.static
            mask[i, :n, k:] = 1.0
        hours[i, :n] = s.hours
        valid[i, :n] = True
    return EhrBatch(torch.as_tensor(values, dtype=dtype), torch.as_tensor(mask, dtype=dtype),
                    torch.as_tensor(hours, dtype=dtype), torch.as_tensor(valid))


def stack_pixels(images: Sequence[ImageSample], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, 1, H, W) tensor of image pixels."""
    return torch.as_tensor(np.stack([im.pixels for im in images])[:, None], dtype=dtype)


def stack_labels(labels: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(y, dtype=np.float64) for y in labels]), dtype=dtype)
