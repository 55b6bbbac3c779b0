"""Perplexity evaluation: exp of mean token-level cross entropy."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .data import SourceTaggedCorpus
from .errors import ConfigError
from .model import LoraModel
from .util import eval_parallelism

_CHUNK = 32  # fixed so summation order (and therefore bytes) is reproducible


def mean_cross_entropy(model: LoraModel, sequences: np.ndarray) -> float:
    """Mean next-token cross entropy over (n, seq_len + 1) id sequences."""
    sequences = np.asarray(sequences)
    if sequences.ndim == 1:
        sequences = sequences[None, :]
    if sequences.size == 0:
        raise ConfigError("evaluation set is empty")
    total_nll = 0.0
    total_tokens = 0
    for start in range(0, len(sequences), _CHUNK):
        chunk = sequences[start : start + _CHUNK]
        logits = model.forward(chunk[:, :-1])
        loss = T.cross_entropy(logits, chunk[:, 1:])
        tokens = chunk[:, 1:].size
        total_nll += loss.item() * tokens
        total_tokens += tokens
    return total_nll / total_tokens


def perplexity(model: LoraModel, sequences: np.ndarray) -> float:
    return math.exp(mean_cross_entropy(model, sequences))


def per_source_perplexity(
    model: LoraModel, corpus: SourceTaggedCorpus, split: str = "val"
) -> dict[str, float]:
    """Per-source ppl; workers evaluate read-only clones, merged by name."""
    names = corpus.source_names
    if not names:
        raise ConfigError(f"corpus {corpus.name!r} has no sources")

    def pool(name: str) -> np.ndarray:
        src = corpus.sources[name]
        return src.val if split == "val" else src.train

    workers = min(eval_parallelism(), len(names))
    if workers <= 1:
        return {name: perplexity(model, pool(name)) for name in names}
    clones = [model.clone() for _ in range(len(names))]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        scores = list(ex.map(lambda i: perplexity(clones[i], pool(names[i])), range(len(names))))
    return dict(zip(names, scores))
