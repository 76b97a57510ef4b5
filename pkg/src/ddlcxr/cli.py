"""Command-line entry point.

Settings are resolved in increasing precedence: built-in defaults, the
``DDLCXR_CKPT_DIR`` environment variable (checkpoint dir only), the
``--config`` file, ``--set key=value`` overrides, then dedicated flags.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import pipeline
from .config import RunConfig, read_config_file
from .errors import ConfigError, DdlCxrError
from .predictor import VARIANTS

log = logging.getLogger("ddlcxr")

CKPT_ENV = "DDLCXR_CKPT_DIR"

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "cohort": "paths.cohort",
    "ckpt_dir": "paths.ckpt_dir",
    "report_dir": "paths.report_dir",
    "n_patients": "world.n_patients",
    "image_size": "world.image_size",
    "vae_epochs": "vae.epochs",
    "ldm_epochs": "ldm.epochs",
    "alpha": "ldm.margin",
    "beta_pert": "ldm.beta_pert",
    "ddim_steps": "ldm.ddim_steps",
    "eta": "ldm.eta",
    "aux_weight": "ldm.aux_weight",
    "predictor_epochs": "predictor.epochs",
    "task": "predictor.task",
    "latent_mode": "predictor.latent_mode",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. --set ldm.lr=1e-4 (repeatable)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--cohort", help="cohort directory")
    p.add_argument("--ckpt-dir", help=f"checkpoint directory (default from ${CKPT_ENV} or the config)")
    p.add_argument("--report-dir", help="report directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _vae_flag(p):
    p.add_argument("--vae-ckpt", help="VAE checkpoint (default <ckpt-dir>/vae.pt)")


def _ldm_flag(p):
    p.add_argument("--ldm-ckpt", help="LDM checkpoint (default <ckpt-dir>/ldm.pt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddlcxr", description="Latent-diffusion image updating for "
                                     "asynchronous multimodal clinical prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic cohort")
    _add_common(p)
    p.add_argument("--n-patients", type=int)
    p.add_argument("--image-size", type=int)

    p = sub.add_parser("train-vae", help="train the first-stage autoencoder")
    _add_common(p)
    p.add_argument("--epochs", dest="vae_epochs", type=int)
    p.add_argument("--out", help="checkpoint path (default <ckpt-dir>/vae.pt)")

    p = sub.add_parser("train-ldm", help="train the conditional latent diffusion model")
    _add_common(p)
    _vae_flag(p)
    p.add_argument("--epochs", dest="ldm_epochs", type=int)
    p.add_argument("--alpha", type=float, help="contrastive hinge margin")
    p.add_argument("--beta-pert", type=float, help="EHR perturbation strength")
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--aux-weight", type=float)
    p.add_argument("--no-ehr", action="store_true", help="train without EHR conditioning")
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive hinge")
    p.add_argument("--out", help="checkpoint path (default <ckpt-dir>/ldm.pt)")

    p = sub.add_parser("train-predictor", help="train fusion predictors")
    _add_common(p)
    _vae_flag(p)
    _ldm_flag(p)
    p.add_argument("--task", choices=["mortality", "phenotype"])
    p.add_argument("--variants", nargs="+", default=["full", "last-cxr"], choices=sorted(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, help="predictor seeds (default from config)")
    p.add_argument("--epochs", dest="predictor_epochs", type=int)
    p.add_argument("--latent-mode", choices=["cache", "fresh"])

    p = sub.add_parser("generate", help="decode generated latents into image grids")
    _add_common(p)
    _vae_flag(p)
    _ldm_flag(p)
    p.add_argument("--split", default="test", choices=list(pipeline.SPLITS))
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--null-context", action="store_true", help="replace the EHR context by the null token")
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--out", help="output directory (default <report-dir>/generated)")

    p = sub.add_parser("evaluate", help="generation metrics, stratified prediction report and ablations")
    _add_common(p)
    _vae_flag(p)
    _ldm_flag(p)
    p.add_argument("--task", choices=["mortality", "phenotype"])
    p.add_argument("--ablated-ldm-ckpt", help="separately trained EHR-free LDM for the generation table")
    p.add_argument("--ablate", action="append", default=[], choices=list(pipeline.ABLATIONS))
    p.add_argument("--oracle-opacity", action="store_true", help="correlate decoded opacity with the hidden state")
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", help="report path (default <report-dir>/report.json)")

    p = sub.add_parser("predict", help="score a cohort with one predictor checkpoint")
    _add_common(p)
    _vae_flag(p)
    _ldm_flag(p)
    p.add_argument("--predictor-ckpt", required=True)
    p.add_argument("--input", required=True, help="cohort directory to score")
    p.add_argument("--out", required=True, help="output JSON path")

    p = sub.add_parser("pipeline", help="run synth-data, all training stages and evaluate")
    _add_common(p)
    p.add_argument("--skip-synth", action="store_true", help="reuse an existing cohort")
    p.add_argument("--variants", nargs="+", default=["full", "last-cxr"], choices=sorted(VARIANTS))
    p.add_argument("--ablate", action="append", default=[], choices=list(pipeline.ABLATIONS))
    return parser


def _parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in --set {item!r}: {exc}") from exc


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    data = read_config_file(args.config) if args.config else {}
    cfg = RunConfig()
    if environ.get(CKPT_ENV) and "ckpt_dir" not in (data.get("paths") or {}):
        cfg = cfg.replace(**{"paths.ckpt_dir": environ[CKPT_ENV]})
    if data:
        merged = cfg.to_dict()
        _deep_update(merged, data)
        cfg = RunConfig.from_dict(merged)
    overrides = dict(_parse_override(s) for s in args.set)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_ehr", False):
        overrides["ldm.use_ehr"] = False
    if getattr(args, "no_contrastive", False):
        overrides["ldm.contrastive"] = False
    if getattr(args, "no_plots", False):
        overrides["eval.plots"] = False
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def _deep_update(base: dict, new: dict) -> None:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def _ckpt(args, cfg: RunConfig, attr: str, default: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value else pipeline.ckpt_path(cfg, default)


def _optional(path: Path) -> Optional[Path]:
    return path if path.is_file() else None


def run(argv: Sequence[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    cmd = args.command
    if cmd == "synth-data":
        ids = pipeline.synth_data(cfg)
        print(f"wrote {len(ids)} patients to {cfg.paths.cohort}")
    elif cmd == "train-vae":
        print(pipeline.run_train_vae(cfg, Path(args.out) if args.out else None))
    elif cmd == "train-ldm":
        print(pipeline.run_train_ldm(cfg, _ckpt(args, cfg, "vae_ckpt", "vae.pt"),
                                     Path(args.out) if args.out else None))
    elif cmd == "train-predictor":
        needs_ldm = any("latent" in VARIANTS[v] for v in args.variants)
        ldm = _ckpt(args, cfg, "ldm_ckpt", "ldm.pt") if needs_ldm else None
        for path in pipeline.run_train_predictor(cfg, _ckpt(args, cfg, "vae_ckpt", "vae.pt"), ldm,
                                                 args.variants, args.seeds):
            print(path)
    elif cmd == "generate":
        print(pipeline.run_generate(cfg, _ckpt(args, cfg, "vae_ckpt", "vae.pt"),
                                    _ckpt(args, cfg, "ldm_ckpt", "ldm.pt"),
                                    Path(args.out) if args.out else None, args.split, args.limit,
                                    args.null_context))
    elif cmd == "evaluate":
        ldm = _ckpt(args, cfg, "ldm_ckpt", "ldm.pt")
        if args.ldm_ckpt is None:
            ldm = _optional(ldm)
        out, _ = pipeline.run_evaluate(cfg, _ckpt(args, cfg, "vae_ckpt", "vae.pt"), ldm, args.ablate,
                                       args.oracle_opacity,
                                       Path(args.ablated_ldm_ckpt) if args.ablated_ldm_ckpt else None,
                                       out=Path(args.out) if args.out else None)
        print(out)
    elif cmd == "predict":
        ldm = _ckpt(args, cfg, "ldm_ckpt", "ldm.pt")
        if args.ldm_ckpt is None:
            ldm = _optional(ldm)
        out, _ = pipeline.run_predict(cfg, _ckpt(args, cfg, "vae_ckpt", "vae.pt"), ldm,
                                      Path(args.predictor_ckpt), Path(args.input), Path(args.out))
        print(out)
    elif cmd == "pipeline":
        if not args.skip_synth:
            pipeline.synth_data(cfg)
        vae = pipeline.run_train_vae(cfg)
        ldm = pipeline.run_train_ldm(cfg, vae)
        pipeline.run_train_predictor(cfg, vae, ldm, args.variants)
        out, _ = pipeline.run_evaluate(cfg, vae, ldm, args.ablate)
        print(out)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except DdlCxrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0) if isinstance(exc.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
