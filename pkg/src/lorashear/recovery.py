"""Dynamic knowledge recovery for the compact model.

Two phases in order, pretraining-style then instruction-style. Each round
measures per-source perplexity degradation against cached full-model
reference scores, builds a training subset that prioritizes degraded
sources while guaranteeing every source a floor allocation, runs LoRA-only
fine-tuning on it, and checks a patience-based convergence tracker on the
phase's validation loss. The adaptor is folded into the weights when a
phase converges; shapes never change.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SourceTaggedCorpus
from .errors import ConfigError, NumericError
from .evaluate import mean_cross_entropy, per_source_perplexity
from .model import LoraModel, next_token_loss
from .optim import make_optimizer
from .tensor import Tape


@dataclass
class RecoveryConfig:
    subset_size: int
    source_floor: float
    round_steps: int
    learning_rate: float
    tol: float = 1e-3
    patience: int = 3
    max_rounds: int = 8
    batch_size: int = 8
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ConfigError("recovery.subset_size must be >= 1")
        if self.source_floor < 0:
            raise ConfigError("recovery.source_floor must be >= 0")
        if self.patience < 1:
            raise ConfigError("recovery.patience must be >= 1")
        if self.max_rounds < 1:
            raise ConfigError("recovery.max_rounds must be >= 1")


@dataclass
class ConvergenceTracker:
    tol: float
    patience: int
    best: float = math.inf
    stale_rounds: int = 0

    def update(self, value: float) -> bool:
        """Record a validation loss; True when the phase should stop."""
        if self.best - value > self.tol:
            self.best = value
            self.stale_rounds = 0
        else:
            self.stale_rounds += 1
        return self.stale_rounds >= self.patience


def measure_degradation(
    model: LoraModel, full_scores: dict[str, float], corpus: SourceTaggedCorpus
) -> dict[str, float]:
    """Per-source ppl(model) - ppl(full reference) on the validation split."""
    for name in corpus.source_names:
        if corpus.sources[name].val.size == 0:
            raise ConfigError(f"source {name!r} has an empty validation split")
    scores = per_source_perplexity(model, corpus, split="val")
    return {name: scores[name] - full_scores[name] for name in corpus.source_names}


def allocate_subset(
    names: list[str], degradation: dict[str, float], total: int, floor_frac: float
) -> dict[str, int]:
    """Floor allocation floor(floor_frac*total) per source, remainder split
    proportionally to positive degradation by largest-remainder rounding.
    The counts always sum to exactly ``total``."""
    if not names:
        raise ConfigError("allocation requires at least one source")
    if floor_frac * len(names) >= 1.0:
        raise ConfigError(f"source_floor {floor_frac} * {len(names)} sources must be < 1")
    if floor_frac > 0 and total < len(names):
        raise ConfigError(f"subset_size {total} smaller than {len(names)} sources with floor active")
    names = sorted(names)
    base = int(math.floor(floor_frac * total))
    remainder = total - base * len(names)
    weights = np.array([max(degradation[n], 0.0) for n in names])
    if weights.sum() == 0:
        weights = np.ones(len(names))
    quotas = remainder * weights / weights.sum()
    counts = {n: base + int(math.floor(q)) for n, q in zip(names, quotas)}
    leftover = total - sum(counts.values())
    fractional = sorted(
        zip(names, quotas), key=lambda nq: (-(nq[1] - math.floor(nq[1])), nq[0])
    )
    for n, _ in fractional[:leftover]:
        counts[n] += 1
    return counts


def build_subset(
    corpus: SourceTaggedCorpus,
    degradation: dict[str, float],
    total: int,
    floor_frac: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, dict[str, int]]:
    """Sample the allocated counts per source without replacement, seeded."""
    counts = allocate_subset(corpus.source_names, degradation, total, floor_frac)
    parts = []
    for name in corpus.source_names:
        pool = corpus.sources[name].train
        n = counts[name]
        if n > len(pool):
            raise ConfigError(f"source {name!r} has {len(pool)} training sequences, need {n}")
        idx = rng.choice(len(pool), size=n, replace=False)
        parts.append(pool[np.sort(idx)])
    return np.concatenate(parts), counts


def recovery_round(
    model: LoraModel, subset: np.ndarray, config: RecoveryConfig, rng: np.random.Generator
) -> list[float]:
    """LoRA-only fine-tuning steps over a built subset."""
    model.set_trainable("lora")
    params = list(model.lora_parameters().values())
    opt = make_optimizer(config.optimizer, params, config.learning_rate)
    losses = []
    for step in range(config.round_steps):
        idx = rng.integers(0, len(subset), size=config.batch_size)
        opt.zero_grad()
        with Tape() as tape:
            loss = next_token_loss(model, subset[idx])
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"recovery: divergent loss at step {step}")
        tape.backward(loss)
        opt.step()
        losses.append(value)
    return losses


@dataclass
class RecoverySummary:
    pre_ppl: dict[str, float]
    post_ppl: dict[str, float]
    pre_mean_ppl: float = field(init=False)
    post_mean_ppl: float = field(init=False)

    def __post_init__(self):
        self.pre_mean_ppl = float(np.mean(list(self.pre_ppl.values())))
        self.post_mean_ppl = float(np.mean(list(self.post_ppl.values())))


def run_recovery(
    model: LoraModel,
    corpora: dict[str, SourceTaggedCorpus],
    full_scores: dict[str, dict[str, float]],
    config: RecoveryConfig,
    log_path=None,
) -> RecoverySummary:
    """Run both phases in order on ``model`` (mutated in place, LoRA merged).

    ``corpora`` maps phase name -> corpus; phases run in the fixed order
    ("pretraining", "instruct"), the second starting only after the first
    converges. ``full_scores`` are the cached full-model per-source ppls.
    """
    phases = [p for p in ("pretraining", "instruct") if p in corpora]
    if not phases:
        raise ConfigError("recovery requires at least one corpus phase")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x2EC0]))
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(event: dict) -> None:
        if log_fh:
            log_fh.write(json.dumps(event, sort_keys=True) + "\n")

    def all_source_ppl() -> dict[str, float]:
        out = {}
        for phase in phases:
            for name, ppl in per_source_perplexity(model, corpora[phase], split="val").items():
                out[f"{phase}/{name}"] = ppl
        return out

    try:
        pre_ppl = all_source_ppl()
        emit({"event": "start", "pre_ppl": pre_ppl})
        for phase in phases:
            corpus = corpora[phase]
            tracker = ConvergenceTracker(tol=config.tol, patience=config.patience)
            for round_idx in range(config.max_rounds):
                degradation = measure_degradation(model, full_scores[phase], corpus)
                subset, allocations = build_subset(
                    corpus, degradation, config.subset_size, config.source_floor, rng
                )
                recovery_round(model, subset, config, rng)
                val_loss = mean_cross_entropy(model, corpus.val_pool())
                converged = tracker.update(val_loss)
                emit(
                    {
                        "event": "round",
                        "phase": phase,
                        "round": round_idx,
                        "degradation": degradation,
                        "allocations": allocations,
                        "val_loss": val_loss,
                        "best_val_loss": tracker.best,
                        "converged": converged,
                    }
                )
                if converged:
                    break
            model.merge_all_lora()
            emit({"event": "phase_end", "phase": phase})
        post_ppl = all_source_ppl()
        emit({"event": "done", "post_ppl": post_ppl})
        return RecoverySummary(pre_ppl=pre_ppl, post_ppl=post_ppl)
    finally:
        if log_fh:
            log_fh.close()
