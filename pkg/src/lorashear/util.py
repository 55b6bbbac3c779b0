"""Small shared helpers: model hashing, seeding, evaluation parallelism."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .model import LoraModel

THREADS_ENV = "LORASHEAR_THREADS"


def model_hash(model: LoraModel) -> str:
    """sha256 over canonical tensor names and raw payload bytes."""
    h = hashlib.sha256()
    params = model.parameters()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(params[name].data.astype("<f8").tobytes())
    return h.hexdigest()


def json_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Per-stage generator so running stages individually matches run-all."""
    stage_key = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), stage_key]))


def eval_parallelism() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
