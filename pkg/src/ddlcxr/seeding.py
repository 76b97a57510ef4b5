"""Deterministic seed fan-out from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key_to_int(key: object) -> int:
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_seed(root: int, *keys: object) -> int:
    """Derive a 31-bit seed for ``(root, *keys)``; keys may be strings or ints."""
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *(_key_to_int(k) for k in keys)])
    return int(seq.generate_state(1)[0] & 0x7FFFFFFF)


def numpy_rng(root: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *keys))


def torch_generator(root: int, *keys: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(child_seed(root, *keys))
    return gen
