"""Pipeline stages: world generation, the three training stages, generation and evaluation.

Every stage reads and writes files under the configured paths, and all
randomness comes from child seeds of ``RunConfig.seed``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import (CohortSplit, EhrNormalizer, LdmSample, Patient, PredictionSample, collate_series,
                      extract_ldm_pairs, load_cohort, prediction_samples, split_patients, stack_pixels)
from .diffusion import DiffusionSchedule, LdmModel, ddim_loop, make_schedule, schedule_from_betas
from .diffusion.training import build_ldm, encode_latents, pair_images, train_ldm
from .errors import DataError
from .metrics import auprc, auroc, generation_distances, fid, pearson, stratified_eval
from .predictor import VARIANTS, PredictionData, Predictor, predict_batch, train_predictor
from .seeding import child_seed
from .synthworld import generate_world, load_truth, measure_opacity
from .vae import AutoencoderKL, decode, encode, train_vae

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
ABLATIONS = ("no-ehr-cond", "no-latent", "no-ehr-pred")


# ---------------------------------------------------------------------------
# Cohort access


@dataclass
class Cohort:
    patients: Dict[str, Patient]
    split: CohortSplit

    def part(self, name: str) -> List[Patient]:
        return [self.patients[pid] for pid in getattr(self.split, name)]


def open_cohort(cfg: RunConfig) -> Cohort:
    root = Path(cfg.paths.cohort)
    if not root.is_dir():
        raise DataError(f"cohort directory not found: {root} (run synth-data first or set paths.cohort)")
    patients = load_cohort(root, cfg.vae.compression, cfg.vae.n_labels)
    if len(patients) < 3:
        raise DataError(f"cohort at {root} has {len(patients)} patients; at least 3 are needed to split")
    split = split_patients([p.patient_id for p in patients], seed=child_seed(cfg.seed, "split"))
    return Cohort({p.patient_id: p for p in patients}, split)


def ldm_pairs(cohort: Cohort, part: str, min_gap: float) -> List[LdmSample]:
    return [pair for p in cohort.part(part) for pair in extract_ldm_pairs(p, min_gap)]


def fit_normalizer(cohort: Cohort) -> EhrNormalizer:
    return EhrNormalizer.fit([p.ehr for p in cohort.part("train")])


def ckpt_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.paths.ckpt_dir) / name


def predictor_name(task: str, variant: str, seed: int) -> str:
    return f"predictor_{task}_{variant}_seed{seed}.pt"


# ---------------------------------------------------------------------------
# Stages


def synth_data(cfg: RunConfig) -> List[str]:
    world = dataclasses.replace(cfg.world, seed=child_seed(cfg.seed, "world", cfg.world.seed))
    return generate_world(world, cfg.paths.cohort)


def run_train_vae(cfg: RunConfig, out: Optional[Path] = None) -> Path:
    cohort = open_cohort(cfg)
    train_imgs = [im for p in cohort.part("train") for im in p.images]
    val_imgs = [im for p in cohort.part("validation") for im in p.images]
    history: list = []
    model = train_vae(train_imgs, val_imgs, cfg.vae, seed=child_seed(cfg.seed, "vae"), history=history)
    return save_checkpoint(out or ckpt_path(cfg, "vae.pt"), "vae", cfg, model.state_dict(),
                           {"image_size": model.image_size, "history": history})


def load_vae(path: Path) -> AutoencoderKL:
    blob = load_checkpoint(path, "vae")
    model = AutoencoderKL(blob["config"].vae, blob["extra"]["image_size"])
    model.load_state_dict(blob["state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def run_train_ldm(cfg: RunConfig, vae_ckpt: Path, out: Optional[Path] = None) -> Path:
    vae = load_vae(vae_ckpt)
    cohort = open_cohort(cfg)
    train_pairs = ldm_pairs(cohort, "train", cfg.ldm.min_gap_hours)
    val_pairs = ldm_pairs(cohort, "validation", cfg.ldm.min_gap_hours)
    if not train_pairs or not val_pairs:
        raise DataError("no LDM pairs: every patient needs two images further apart than "
                        f"{cfg.ldm.min_gap_hours} h")
    latents = encode_latents(vae, pair_images(train_pairs + val_pairs))
    normalizer = fit_normalizer(cohort)
    schedule = make_schedule(cfg.ldm.schedule, cfg.ldm.n_steps, cfg.ldm.beta_start, cfg.ldm.beta_end)
    history: list = []
    model = train_ldm(train_pairs, val_pairs, latents, schedule, cfg.ldm, cfg.unet, cfg.ehr, normalizer,
                      seed=child_seed(cfg.seed, "ldm"), history=history)
    first = train_pairs[0]
    extra = {
        "normalizer": normalizer.to_dict(),
        "betas": schedule.betas,
        "latent_channels": cfg.vae.latent_channels,
        "ehr_inputs": first.ehr.n_channels + len(first.ehr.static),
        "n_labels": len(first.target_labels),
        "history": history,
    }
    return save_checkpoint(out or ckpt_path(cfg, "ldm.pt"), "ldm", cfg, model.state_dict(), extra)


@dataclass
class LoadedLdm:
    model: LdmModel
    schedule: DiffusionSchedule
    normalizer: EhrNormalizer
    config: RunConfig


def load_ldm(path: Path) -> LoadedLdm:
    blob = load_checkpoint(path, "ldm")
    cfg, extra = blob["config"], blob["extra"]
    schedule = schedule_from_betas(np.asarray(extra["betas"]))
    model = build_ldm(extra["latent_channels"], extra["ehr_inputs"], extra["n_labels"], cfg.unet, cfg.ehr, cfg.ldm,
                      schedule)
    model.load_state_dict(blob["state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return LoadedLdm(model, schedule, EhrNormalizer.from_dict(extra["normalizer"]), cfg)


@torch.no_grad()
def reference_latents(vae: AutoencoderKL, images) -> torch.Tensor:
    out = []
    for i in range(0, len(images), 64):
        mean, _ = encode(vae, stack_pixels(images[i:i + 64]))
        out.append(mean / float(vae.latent_scale))
    return torch.cat(out)


@torch.no_grad()
def generate_latents(vae: AutoencoderKL, ldm: LoadedLdm, refs: Sequence, contexts: Sequence, keys: Sequence,
                     steps: int, eta: float, root_seed: int, tag: str, null_context: bool = False,
                     batch_size: int = 64) -> torch.Tensor:
    """DDIM latents for each (reference image, EHR context), seeded per ``keys[i]``.

    The start point of item ``i`` depends only on ``(root_seed, tag, keys[i])``,
    so each latent is independent of how the items are batched.
    """
    model, schedule = ldm.model, ldm.schedule
    max_len = ldm.config.ehr.max_len
    out = []
    for i in range(0, len(refs), batch_size):
        z_ref = reference_latents(vae, refs[i:i + batch_size])
        x = torch.stack([torch.randn(z_ref.shape[1:], generator=torch.Generator().manual_seed(
            child_seed(root_seed, "generate", tag, k))) for k in keys[i:i + batch_size]])
        encoding = None
        if not null_context:
            encoding = model.encode_context(collate_series(contexts[i:i + batch_size], max_len, ldm.normalizer))
        gen = torch.Generator().manual_seed(child_seed(root_seed, "generate-noise", tag, i))

        def eps_fn(x_n, n, z_ref=z_ref, encoding=encoding):
            return model.predict_noise(x_n, z_ref, n, encoding)

        out.append(ddim_loop(eps_fn, schedule, x, steps, eta, gen))
    return torch.cat(out) if out else torch.zeros(0)


def sample_latents(vae: AutoencoderKL, ldm: LoadedLdm, samples: Sequence[PredictionSample], cfg: RunConfig,
                   tag: str, null_context: bool = False) -> torch.Tensor:
    return generate_latents(vae, ldm, [s.last_image for s in samples], [s.generation_context for s in samples],
                            [s.patient_id for s in samples], cfg.ldm.ddim_steps, cfg.ldm.eta, cfg.seed, tag,
                            null_context)


def pair_latents(vae: AutoencoderKL, ldm: LoadedLdm, pairs: Sequence[LdmSample], cfg: RunConfig, tag: str,
                 null_context: bool = False) -> torch.Tensor:
    keys = [f"{p.patient_id}:{p.reference.taken_at}:{p.target.taken_at}" for p in pairs]
    return generate_latents(vae, ldm, [p.reference for p in pairs], [p.ehr for p in pairs], keys,
                            cfg.ldm.ddim_steps, cfg.ldm.eta, cfg.seed, tag, null_context)


def _prediction_split(cohort: Cohort, cfg: RunConfig, part: str) -> List[PredictionSample]:
    samples = prediction_samples(cohort.part(part), cfg.predictor.task, cfg.predictor.window_hours)
    if not samples:
        raise DataError(f"no prediction samples in the {part} split")
    return samples


def run_train_predictor(cfg: RunConfig, vae_ckpt: Path, ldm_ckpt: Optional[Path],
                        variants: Iterable[str] = ("full", "last-cxr"),
                        seeds: Optional[Iterable[int]] = None) -> List[Path]:
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise DataError(f"unknown predictor variant {v!r}; choose from {sorted(VARIANTS)}")
    needs_latent = any("latent" in VARIANTS[v] for v in variants)
    if needs_latent and ldm_ckpt is None:
        raise DataError("variants with a generated latent need an LDM checkpoint (--ldm-ckpt)")
    seeds = list(cfg.predictor.seeds if seeds is None else seeds)
    vae = load_vae(vae_ckpt)
    ldm = load_ldm(ldm_ckpt) if needs_latent else None
    cohort = open_cohort(cfg)
    normalizer = fit_normalizer(cohort)
    train_s, val_s = _prediction_split(cohort, cfg, "train"), _prediction_split(cohort, cfg, "validation")
    max_len = cfg.ehr.max_len
    train_d, val_d = PredictionData(train_s, max_len, normalizer), PredictionData(val_s, max_len, normalizer)
    latent_channels = cfg.vae.latent_channels
    cached: Dict[str, torch.Tensor] = {}
    if needs_latent:
        val_lat = sample_latents(vae, ldm, val_s, cfg, "cache")
        if cfg.predictor.latent_mode == "cache":
            cached["train"] = sample_latents(vae, ldm, train_s, cfg, "cache")
    init_ehr = ldm.model.ehr.state_dict() if (cfg.predictor.warm_start_ehr and ldm is not None) else None
    paths = []
    for variant in variants:
        branches = VARIANTS[variant]
        for seed in seeds:
            if "latent" in branches:
                if cfg.predictor.latent_mode == "cache":
                    provider = lambda epoch: cached["train"]  # noqa: E731
                else:
                    provider = (lambda epoch, seed=seed:
                                sample_latents(vae, ldm, train_s, cfg, f"train-seed{seed}-epoch{epoch}"))
                vl = val_lat
            else:
                provider, vl = None, None
            history: list = []
            model = train_predictor(train_d, val_d, cfg.predictor, cfg.ehr, branches, provider, vl, latent_channels,
                                    seed=child_seed(cfg.seed, "predictor", cfg.predictor.task, seed),
                                    history=history, init_ehr=init_ehr)
            extra = {"variant": variant, "branches": sorted(branches), "task": cfg.predictor.task, "seed": seed,
                     "ehr_inputs": train_d.ehr.values.shape[-1], "n_tasks": train_d.labels.shape[1],
                     "latent_channels": latent_channels, "normalizer": normalizer.to_dict(), "history": history}
            paths.append(save_checkpoint(ckpt_path(cfg, predictor_name(cfg.predictor.task, variant, seed)),
                                         "predictor", cfg, model.state_dict(), extra))
    return paths


def load_predictor(path: Path) -> Tuple[Predictor, dict]:
    blob = load_checkpoint(path, "predictor")
    cfg, extra = blob["config"], blob["extra"]
    model = Predictor(extra["ehr_inputs"], extra["latent_channels"], extra["n_tasks"], cfg.predictor, cfg.ehr,
                      extra["branches"])
    model.load_state_dict(blob["state"])
    model.eval()
    return model, extra


# ---------------------------------------------------------------------------
# Generation and evaluation


def _to_image(latent: np.ndarray) -> np.ndarray:
    return np.clip(latent, 0.0, 1.0)


@torch.no_grad()
def decode_latents(vae: AutoencoderKL, latents: torch.Tensor) -> np.ndarray:
    out = [decode(vae, latents[i:i + 64] * float(vae.latent_scale)) for i in range(0, len(latents), 64)]
    return torch.cat(out)[:, 0].numpy().astype(np.float64) if out else np.zeros((0,))


def run_generate(cfg: RunConfig, vae_ckpt: Path, ldm_ckpt: Path, out_dir: Optional[Path] = None,
                 part: str = "test", limit: int = 16, null_context: bool = False) -> Path:
    """Write reference / target / generated image grids plus the raw latents."""
    from PIL import Image

    vae, ldm = load_vae(vae_ckpt), load_ldm(ldm_ckpt)
    cohort = open_cohort(cfg)
    pairs = ldm_pairs(cohort, part, cfg.ldm.min_gap_hours)[:limit]
    if not pairs:
        raise DataError(f"no LDM pairs in the {part} split")
    z = pair_latents(vae, ldm, pairs, cfg, f"generate-{part}", null_context)
    images = decode_latents(vae, z)
    out_dir = Path(out_dir or Path(cfg.paths.report_dir) / "generated")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p, gen in zip(pairs, images):
        row = np.concatenate([p.reference.pixels, p.target.pixels, _to_image(gen)], axis=1)
        rows.append(row)
        name = f"{p.patient_id}_{p.reference.taken_at}_{p.target.taken_at}.png"
        Image.fromarray(np.round(row * 255).astype(np.uint8), mode="L").save(out_dir / name)
    grid = np.concatenate(rows, axis=0)
    Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="L").save(out_dir / "grid.png")
    np.savez(out_dir / "latents.npz", generated=z.numpy(),
             keys=np.array([f"{p.patient_id}:{p.reference.taken_at}:{p.target.taken_at}" for p in pairs]))
    return out_dir


def _round(obj, digits: int = 10):
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    return obj


def _latent_embedder(vae: AutoencoderKL):
    def embed(images: np.ndarray) -> np.ndarray:
        px = torch.as_tensor(np.asarray(images, dtype=np.float32)[:, None])
        mean, _ = encode(vae, px)
        return mean.flatten(1).numpy().astype(np.float64)
    return embed


def generation_report(cfg: RunConfig, vae: AutoencoderKL, ldm: LoadedLdm, pairs: Sequence[LdmSample],
                      tag: str, null_context: bool = False, oracle_opacity: bool = False,
                      ablated_ldm: Optional[LoadedLdm] = None) -> dict:
    """Latent FD/WD (and FID with the VAE-encoder embedder) of generated vs target images."""
    target = reference_latents(vae, [p.target for p in pairs]).numpy().astype(np.float64)
    ref = reference_latents(vae, [p.reference for p in pairs]).numpy().astype(np.float64)
    n_proj, seed = cfg.eval.sw_projections, child_seed(cfg.seed, "sliced")
    target_px = np.stack([p.target.pixels for p in pairs])
    embed = _latent_embedder(vae)
    rows = {"last-cxr": {**generation_distances(ref, target, n_proj, seed),
                         "fid": fid(np.stack([p.reference.pixels for p in pairs]), target_px, embed)}}
    models = {"ddl-cxr": (ldm, null_context)}
    if ablated_ldm is not None:
        models["ldm-without-ehr"] = (ablated_ldm, False)
    decoded = {}
    for name, (m, null) in models.items():
        z = pair_latents(vae, m, pairs, cfg, tag, null).numpy().astype(np.float64)
        decoded[name] = decode_latents(vae, torch.as_tensor(z, dtype=torch.float32))
        rows[name] = {**generation_distances(z, target, n_proj, seed), "fid": fid(decoded[name], target_px, embed)}
    report = {"n_pairs": len(pairs), "rows": rows}
    if oracle_opacity:
        truth = {}
        for p in pairs:
            if p.patient_id not in truth:
                truth[p.patient_id] = load_truth(cfg.paths.cohort, p.patient_id)
        s_t1 = np.array([truth[p.patient_id].state_at(p.target.taken_at) for p in pairs])
        corr = {"last-cxr": pearson([measure_opacity(p.reference.pixels) for p in pairs], s_t1),
                "target-image": pearson([measure_opacity(p.target.pixels) for p in pairs], s_t1)}
        for name, imgs in decoded.items():
            corr[name] = pearson([measure_opacity(im) for im in imgs], s_t1)
        report["opacity_pearson"] = corr
    return report


def _discover_predictors(cfg: RunConfig) -> Dict[str, Dict[int, Path]]:
    found: Dict[str, Dict[int, Path]] = {}
    prefix = f"predictor_{cfg.predictor.task}_"
    for path in sorted(Path(cfg.paths.ckpt_dir).glob(prefix + "*_seed*.pt")):
        variant, _, seed = path.stem[len(prefix):].rpartition("_seed")
        if variant in VARIANTS and seed.isdigit():
            found.setdefault(variant, {})[int(seed)] = path
    return found


def prediction_report(cfg: RunConfig, vae: AutoencoderKL, ldm: Optional[LoadedLdm], cohort: Cohort,
                      predictors: Dict[str, Dict[int, Path]], ablate: Sequence[str], part: str,
                      curves: Optional[dict] = None) -> dict:
    """Stratified AUROC/AUPRC over seeds for every trained variant and requested ablation.

    ``curves`` (if given) receives the seed-averaged scores and labels of each row.
    """
    samples = _prediction_split(cohort, cfg, part)
    lat_cache: Dict[bool, torch.Tensor] = {}

    def latents(null: bool) -> torch.Tensor:
        if null not in lat_cache:
            lat_cache[null] = sample_latents(vae, ldm, samples, cfg, "cache", null)
        return lat_cache[null]

    rows = {}
    data_cache: Dict[str, PredictionData] = {}
    specs: List[Tuple[str, str, Tuple[str, ...], bool]] = [(v, v, (), False) for v in predictors]
    if "full" in predictors:
        if "no-ehr-cond" in ablate:
            specs.append(("full/no-ehr-cond", "full", (), True))
        if "no-latent" in ablate:
            specs.append(("full/no-latent", "full", ("latent",), False))
        if "no-ehr-pred" in ablate:
            specs.append(("full/no-ehr-pred", "full", ("ehr",), False))
    labels = None
    for row_name, variant, drop, null in specs:
        scores = {}
        for seed, path in sorted(predictors[variant].items()):
            model, extra = load_predictor(path)
            norm = json.dumps(extra["normalizer"], sort_keys=True)
            if norm not in data_cache:
                data_cache[norm] = PredictionData(samples, cfg.ehr.max_len, EhrNormalizer.from_dict(extra["normalizer"]))
            data = data_cache[norm]
            lat = None
            if "latent" in model.branches:
                if ldm is None:
                    raise DataError(f"predictor variant {variant!r} needs an LDM checkpoint")
                lat = latents(null)
            scores[seed] = _scores_with_drop(model, data, lat, drop)
            labels = data.labels.numpy().astype(bool)
        rep = stratified_eval(scores, labels, [s.gap_delta for s in samples], cfg.eval.strata_edges)
        if curves is not None:
            curves[row_name] = (np.mean([scores[k] for k in sorted(scores)], axis=0), labels)
        rows[row_name] = rep.rows()
    return {"n_samples": len(samples), "rows": rows}


@torch.no_grad()
def _scores_with_drop(model: Predictor, data: PredictionData, latents, drop) -> np.ndarray:
    if not drop:
        return predict_batch(model, data, latents)
    out = []
    for i in range(0, len(data), 128):
        idx = torch.arange(i, min(i + 128, len(data)))
        inputs = {
            "image": data.pixels[idx],
            "ehr": data.ehr.select(idx),
            "latent": latents[idx] if latents is not None else None,
        }
        out.append(torch.sigmoid(model(inputs["image"], inputs["ehr"], inputs["latent"], drop)))
    return torch.cat(out).numpy().astype(np.float64)


def run_evaluate(cfg: RunConfig, vae_ckpt: Path, ldm_ckpt: Optional[Path], ablate: Sequence[str] = (),
                 oracle_opacity: bool = False, ablated_ldm_ckpt: Optional[Path] = None,
                 parts: Sequence[str] = ("validation", "test"), out: Optional[Path] = None,
                 plots: Optional[bool] = None) -> Tuple[Path, dict]:
    for a in ablate:
        if a not in ABLATIONS:
            raise DataError(f"unknown ablation {a!r}; choose from {list(ABLATIONS)}")
    vae = load_vae(vae_ckpt)
    ldm = load_ldm(ldm_ckpt) if ldm_ckpt is not None else None
    ablated = load_ldm(ablated_ldm_ckpt) if ablated_ldm_ckpt is not None else None
    cohort = open_cohort(cfg)
    report: dict = {"config": cfg.to_dict(), "ablations": sorted(ablate)}
    if ldm is not None:
        pairs = ldm_pairs(cohort, "test", cfg.ldm.min_gap_hours)
        if pairs:
            gen = generation_report(cfg, vae, ldm, pairs, "eval-test", False, oracle_opacity, ablated)
            if "no-ehr-cond" in ablate:
                null = generation_report(cfg, vae, ldm, pairs, "eval-test", True, oracle_opacity)
                gen["rows"]["ddl-cxr/no-ehr-cond"] = null["rows"]["ddl-cxr"]
                if oracle_opacity:
                    gen["opacity_pearson"]["ddl-cxr/no-ehr-cond"] = null["opacity_pearson"]["ddl-cxr"]
            report["generation"] = gen
    predictors = _discover_predictors(cfg)
    curves: Dict[str, dict] = {}
    if predictors:
        report["prediction"] = {}
        for part in parts:
            curves[part] = {}
            report["prediction"][part] = prediction_report(cfg, vae, ldm, cohort, predictors, ablate, part,
                                                           curves[part])
    report = _round(report)
    out = Path(out or Path(cfg.paths.report_dir) / "report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if cfg.eval.plots if plots is None else plots:
        write_plots(report, out.parent)
        for part, rows in curves.items():
            for name, (scores, labels) in rows.items():
                if labels.shape[1] == 1 and 0 < labels.sum() < len(labels):
                    write_curves(scores[:, 0], labels[:, 0],
                                 out.parent / f"curves_{part}_{name.replace('/', '_')}.png")
    return out, report


def write_plots(report: dict, out_dir: Path) -> List[Path]:
    """Per-stratum AUROC bars for every predictor row of every evaluated split."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for part, pred in report.get("prediction", {}).items():
        fig, ax = plt.subplots(figsize=(7, 3.5))
        names = list(pred["rows"])
        width = 0.8 / max(len(names), 1)
        strata = None
        for j, name in enumerate(names):
            rows = [r for r in pred["rows"][name] if r["metric"] == "auroc"]
            strata = [r["stratum"] for r in rows]
            means = [r["mean"] if r["mean"] is not None else 0.0 for r in rows]
            stds = [r["std"] if r["std"] is not None else 0.0 for r in rows]
            ax.bar(np.arange(len(rows)) + j * width, means, width, yerr=stds, label=name)
        if strata:
            ax.set_xticks(np.arange(len(strata)) + 0.4 - width / 2)
            ax.set_xticklabels(strata)
        ax.set_ylabel("AUROC")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        ax.set_title(f"{part} AUROC by gap stratum")
        fig.tight_layout()
        path = out_dir / f"auroc_strata_{part}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_curves(scores: np.ndarray, labels: np.ndarray, path: Path) -> Path:
    """ROC and PR curves for a binary score vector."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = np.argsort(-scores, kind="stable")
    y = labels[order].astype(float)
    tp, fp = np.cumsum(y), np.cumsum(1 - y)
    tpr, fpr = tp / max(tp[-1], 1), fp / max(fp[-1], 1)
    precision = tp / np.arange(1, len(y) + 1)
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    a.plot(np.r_[0, fpr], np.r_[0, tpr])
    a.set_xlabel("FPR")
    a.set_ylabel("TPR")
    a.set_title(f"ROC (AUROC {auroc(scores, labels):.3f})")
    b.plot(tpr, precision)
    b.set_xlabel("recall")
    b.set_ylabel("precision")
    b.set_title(f"PR (AUPRC {auprc(scores, labels):.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def run_predict(cfg: RunConfig, vae_ckpt: Path, ldm_ckpt: Optional[Path], predictor_ckpt: Path,
                input_root: Path, out: Path) -> Tuple[Path, dict]:
    """Score every eligible patient of a cohort directory with one predictor checkpoint."""
    model, extra = load_predictor(predictor_ckpt)
    patients = load_cohort(input_root, cfg.vae.compression, cfg.vae.n_labels)
    samples = prediction_samples(patients, extra["task"], cfg.predictor.window_hours)
    if not samples:
        raise DataError(f"no prediction samples in {input_root}")
    data = PredictionData(samples, cfg.ehr.max_len, EhrNormalizer.from_dict(extra["normalizer"]))
    lat = None
    if "latent" in model.branches:
        if ldm_ckpt is None:
            raise DataError(f"predictor variant {extra['variant']!r} needs an LDM checkpoint (--ldm-ckpt)")
        lat = sample_latents(load_vae(vae_ckpt), load_ldm(ldm_ckpt), samples, cfg, "cache")
    scores = predict_batch(model, data, lat)
    labels = data.labels.numpy().astype(bool)
    rep = stratified_eval({int(extra["seed"]): scores}, labels, data.gaps, cfg.eval.strata_edges)
    report = _round({
        "task": extra["task"],
        "variant": extra["variant"],
        "predictions": {s.patient_id: list(map(float, p)) for s, p in zip(samples, scores)},
        "gaps": {s.patient_id: s.gap_delta for s in samples},
        "metrics": rep.rows(),
    })
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out, report
