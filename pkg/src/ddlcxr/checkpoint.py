"""Versioned checkpoint files.

A checkpoint is a ``torch.save`` dict with a format version, a kind tag,
the full run config echo, the model state and any extra plain-data items
(normalizer statistics, latent scale, schedule arrays, metric logs).
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError, DataError

FORMAT_VERSION = 1
KINDS = ("vae", "ldm", "predictor")


def save_checkpoint(path: str | Path, kind: str, config: RunConfig, state: Dict[str, torch.Tensor],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "state": {k: v.detach().cpu().clone() for k, v in state.items()},
        "extra": _plain(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, kind: Optional[str] = None) -> Dict[str, Any]:
    """Load and check a checkpoint; the returned ``config`` is a :class:`RunConfig`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing {kind or 'model'} checkpoint: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupt or foreign file
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path} is not a version-{FORMAT_VERSION} checkpoint")
    if kind is not None and blob.get("kind") != kind:
        raise ConfigError(f"{path} holds a {blob.get('kind')!r} checkpoint, expected {kind!r}")
    out = dict(blob)
    out["config"] = RunConfig.from_dict(blob["config"])
    return out


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().tolist()
    return obj
