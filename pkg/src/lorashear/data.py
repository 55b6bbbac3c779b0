"""Procedurally generated source-tagged corpora.

Stand-ins for web-scale pretraining and instruction data: several distinct
character-level languages (differing Markov structure, bracket grammar,
copy patterns, ascending runs) plus two prompt/answer-shaped instruction
sources. Per-source validation splits are disjoint from training, which is
what makes per-source degradation measurement meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

PRETRAIN_KINDS = ("markov", "brackets", "copy", "runs")
INSTRUCT_KINDS = ("qa_copy", "qa_lookup")

_Q, _A, _EOS = 40, 41, 42


@dataclass
class SourcePool:
    name: str
    train: np.ndarray  # (n, seq_len + 1) int64
    val: np.ndarray


@dataclass
class SourceTaggedCorpus:
    name: str
    sources: dict[str, SourcePool]

    @property
    def source_names(self) -> list[str]:
        return sorted(self.sources)

    def train_pool(self) -> np.ndarray:
        return np.concatenate([self.sources[n].train for n in self.source_names])

    def val_pool(self) -> np.ndarray:
        return np.concatenate([self.sources[n].val for n in self.source_names])

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        pool = self.train_pool()
        idx = rng.integers(0, len(pool), size=batch_size)
        return pool[idx]


def _gen_markov(rng: np.random.Generator, length: int, vocab: int) -> np.ndarray:
    states = np.arange(1, min(vocab, 40))
    n = len(states)
    nexts = np.stack([rng.permutation(n)[:4] for _ in range(n)])
    probs = np.array([0.55, 0.25, 0.15, 0.05])
    out = np.empty(length, dtype=np.int64)
    s = int(rng.integers(0, n))
    for i in range(length):
        out[i] = states[s]
        s = int(nexts[s][rng.choice(4, p=probs)])
    return out


def _gen_brackets(rng: np.random.Generator, length: int, vocab: int) -> np.ndarray:
    pairs = [(2, 3), (4, 5), (6, 7)]
    fillers = np.arange(8, 16)
    out = []
    stack: list[int] = []
    while len(out) < length:
        r = rng.random()
        if stack and (r < 0.35 or len(stack) > 4):
            out.append(stack.pop())
        elif r < 0.7:
            o, c = pairs[int(rng.integers(0, len(pairs)))]
            out.append(o)
            stack.append(c)
        else:
            out.append(int(rng.choice(fillers)))
    return np.array(out[:length], dtype=np.int64)


def _gen_copy(rng: np.random.Generator, length: int, vocab: int) -> np.ndarray:
    sep = 32
    out: list[int] = []
    while len(out) < length:
        motif = rng.integers(16, 32, size=int(rng.integers(4, 9))).tolist()
        reps = int(rng.integers(3, 6))
        for _ in range(reps):
            out.extend(motif)
            out.append(sep)
    return np.array(out[:length], dtype=np.int64)


def _gen_runs(rng: np.random.Generator, length: int, vocab: int) -> np.ndarray:
    sep = 33
    out: list[int] = []
    while len(out) < length:
        start = int(rng.integers(1, vocab - 9))
        for j in range(int(rng.integers(3, 9))):
            out.append(start + j)
        out.append(sep)
    return np.array(out[:length], dtype=np.int64)


def _gen_qa_copy(rng: np.random.Generator, length: int, vocab: int) -> np.ndarray:
    out: list[int] = []
    while len(out) < length:
        prompt = rng.integers(1, 17, size=6).tolist()
        out.extend([_Q] + prompt + [_A] + prompt + [_EOS])
    return np.array(out[:length], dtype=np.int64)


def _gen_qa_lookup(rng: np.random.Generator, length: int, vocab: int, table: np.ndarray) -> np.ndarray:
    out: list[int] = []
    while len(out) < length:
        key = int(rng.integers(0, len(table)))
        out.extend([_Q, key + 1, _A] + table[key].tolist() + [_EOS])
    return np.array(out[:length], dtype=np.int64)


def generate_source(
    kind: str, n_sequences: int, seq_len: int, vocab: int, rng: np.random.Generator
) -> np.ndarray:
    if kind == "qa_lookup":
        table = rng.integers(20, 37, size=(12, 3))
        return np.stack([_gen_qa_lookup(rng, seq_len + 1, vocab, table) for _ in range(n_sequences)])
    gens = {
        "markov": _gen_markov,
        "brackets": _gen_brackets,
        "copy": _gen_copy,
        "runs": _gen_runs,
        "qa_copy": _gen_qa_copy,
    }
    if kind not in gens:
        raise ConfigError(f"unknown corpus source kind {kind!r}")
    return np.stack([gens[kind](rng, seq_len + 1, vocab) for _ in range(n_sequences)])


def generate_corpus(
    name: str,
    kinds: tuple[str, ...],
    n_train: int,
    n_val: int,
    seq_len: int,
    vocab: int,
    rng: np.random.Generator,
) -> SourceTaggedCorpus:
    if not kinds:
        raise ConfigError(f"corpus {name!r} has no sources")
    sources = {}
    for kind in kinds:
        seqs = generate_source(kind, n_train + n_val, seq_len, vocab, rng)
        sources[kind] = SourcePool(kind, train=seqs[:n_train], val=seqs[n_train:])
    return SourceTaggedCorpus(name=name, sources=sources)


def corpora_to_json(corpora: dict[str, SourceTaggedCorpus], seq_len: int, extra: dict) -> dict:
    return {
        "schema_version": 1,
        "seq_len": seq_len,
        "corpora": {
            name: {
                src: {
                    "train": corpus.sources[src].train.tolist(),
                    "val": corpus.sources[src].val.tolist(),
                }
                for src in corpus.source_names
            }
            for name, corpus in sorted(corpora.items())
        },
        **extra,
    }


def save_corpora(corpora: dict[str, SourceTaggedCorpus], seq_len: int, path, extra: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(corpora_to_json(corpora, seq_len, extra), f, sort_keys=True)
        f.write("\n")


def load_corpora(path) -> tuple[dict[str, SourceTaggedCorpus], dict]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("schema_version") != 1:
        raise FormatError(f"{path}: unsupported corpus schema")
    corpora = {}
    for name, sources in payload["corpora"].items():
        pools = {
            src: SourcePool(
                src,
                train=np.asarray(d["train"], dtype=np.int64),
                val=np.asarray(d["val"], dtype=np.int64),
            )
            for src, d in sources.items()
        }
        corpora[name] = SourceTaggedCorpus(name=name, sources=pools)
    return corpora, payload
