"""Checkpoints: every parameter as f32 plus ``__meta__ = [signature, seed, step]`` (i64)."""

from __future__ import annotations

import numpy as np

from . import xtns
from .errors import ConfigError, FormatError

META = "__meta__"


def checkpoint_entries(pipeline) -> dict:
    entries = {name: t.data.astype(np.float32) for name, t in pipeline.named_parameters()}
    entries[META] = np.array([pipeline.signature(), pipeline.seed, getattr(pipeline, "step_count", 0)],
                             dtype=np.int64)
    return entries


def save_checkpoint(path, pipeline) -> None:
    xtns.save(path, checkpoint_entries(pipeline))


def load_checkpoint(path, pipeline) -> dict:
    """Restore parameters in place; a config/vocabulary mismatch raises ConfigError."""
    entries = xtns.load(path)
    if META not in entries or entries[META].shape != (3,):
        raise FormatError(f"{path}: not a checkpoint (missing {META})")
    sig, seed, step = (int(x) for x in entries[META])
    if sig != pipeline.signature():
        raise ConfigError(f"{path}: checkpoint config hash {sig} does not match this config "
                          f"({pipeline.signature()})")
    params = {k: v for k, v in entries.items() if k != META}
    names = {n for n, _ in pipeline.named_parameters()}
    if set(params) != names:
        extra = sorted(set(params) ^ names)
        raise ConfigError(f"{path}: parameter set differs from the pipeline ({', '.join(extra[:4])})")
    pipeline.store.load_state_dict(params)
    pipeline.step_count = step
    return {"signature": sig, "seed": seed, "step": step}
