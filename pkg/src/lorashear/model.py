"""Toy decoder-only transformer with low-rank adaptors on every projection.

The block wiring is the usual pre-norm decoder: rmsnorm -> attention
(q/k/v into o, per-head causal mixing) -> residual add -> rmsnorm ->
gated MLP (silu(gate) * up into down) -> residual add. Positions use a
learned absolute embedding. Every projection except the output head is a
``LoraLinear``: a frozen host weight plus trainable factors A (rank x in)
and B (out x r), applied as ``x @ W.T + gamma * (x @ A.T) @ B.T``. B starts
at zero so a fresh model is exactly the frozen model.

Blocks carry their own head count and MLP width so structurally compressed
models (which may differ per block) reuse the same forward path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int
    n_layers: int
    n_heads: int
    mlp_dim: int
    lora_rank: int
    lora_gamma: float = 2.0
    block_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ConfigError(
                f"model.dim {self.dim} not divisible by model.n_heads {self.n_heads}"
            )
        if self.lora_rank < 0:
            raise ConfigError("model.lora_rank must be >= 0")
        if self.lora_rank >= self.dim:
            raise ConfigError("model.lora_rank must be < model.dim")
        if self.lora_gamma <= 0:
            raise ConfigError("model.lora_gamma must be positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


class LoraLinear:
    """Frozen host weight with trainable low-rank delta ``gamma * B @ A``."""

    def __init__(self, weight: Tensor, lora_a: Tensor | None, lora_b: Tensor | None, gamma: float):
        self.weight = weight
        self.lora_a = lora_a
        self.lora_b = lora_b
        self.gamma = gamma

    @property
    def has_lora(self) -> bool:
        return self.lora_a is not None

    def apply(self, h: Tensor) -> Tensor:
        base = T.linear(h, self.weight)
        if not self.has_lora:
            return base
        low = T.linear(T.linear(h, self.lora_a), self.lora_b)
        return T.add(base, T.scale(low, self.gamma))

    def effective_weight(self) -> np.ndarray:
        """Dense weight the layer currently realizes: host + gamma * B @ A."""
        if not self.has_lora:
            return self.weight.data.copy()
        return self.weight.data + self.gamma * (self.lora_b.data @ self.lora_a.data)

    def merge_lora(self) -> None:
        """Fold the adaptor into the host (x += gamma*B@A; B <- 0). Idempotent."""
        if not self.has_lora:
            return
        self.weight.data += self.gamma * (self.lora_b.data @ self.lora_a.data)
        self.lora_b.data[:] = 0.0


class Block:
    def __init__(self, attn_norm, q, k, v, o, mlp_norm, gate, up, down, n_heads, head_dim, mlp_dim):
        self.attn_norm = attn_norm
        self.q, self.k, self.v, self.o = q, k, v, o
        self.mlp_norm = mlp_norm
        self.gate, self.up, self.down = gate, up, down
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.mlp_dim = mlp_dim

    def lora_linears(self) -> dict[str, LoraLinear]:
        return {
            "attn.q": self.q,
            "attn.k": self.k,
            "attn.v": self.v,
            "attn.o": self.o,
            "mlp.gate": self.gate,
            "mlp.up": self.up,
            "mlp.down": self.down,
        }


def split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    """(B, T, H*dh) -> (B, H, T, dh) via reshape + transpose."""
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, head_dim)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, T, dh) -> (B, T, H*dh)."""
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def causal_attention_mix(qh: Tensor, kh: Tensor, vh: Tensor, head_dim: int) -> Tensor:
    """Per-head causal attention: scaled scores, softmax, value mixing."""
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    probs = T.softmax(scores, causal=True)
    return T.matmul(probs, vh)


class LoraModel:
    def __init__(self, config: ModelConfig, tok_embedding, pos_embedding, blocks, final_norm, head):
        self.config = config
        self.tok_embedding = tok_embedding
        self.pos_embedding = pos_embedding
        self.blocks: list[Block] = blocks
        self.final_norm = final_norm
        self.head = head

    # ---- parameter bookkeeping -------------------------------------------------

    def lora_linears(self) -> dict[str, LoraLinear]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, mod in blk.lora_linears().items():
                out[f"blocks.{i}.{name}"] = mod
        return out

    def parameters(self) -> dict[str, Tensor]:
        """All parameter tensors under canonical dotted names, in model order."""
        params = {
            "tok_embedding": self.tok_embedding,
            "pos_embedding": self.pos_embedding,
        }
        for i, blk in enumerate(self.blocks):
            prefix = f"blocks.{i}"
            params[f"{prefix}.attn_norm.gain"] = blk.attn_norm
            for name, mod in blk.lora_linears().items():
                params[f"{prefix}.{name}.weight"] = mod.weight
                if mod.has_lora:
                    params[f"{prefix}.{name}.lora_A"] = mod.lora_a
                    params[f"{prefix}.{name}.lora_B"] = mod.lora_b
            params[f"{prefix}.mlp_norm.gain"] = blk.mlp_norm
        params["final_norm.gain"] = self.final_norm
        params["head.weight"] = self.head
        return params

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def lora_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.parameters().items() if ".lora_" in n}

    def set_trainable(self, which: str) -> None:
        """'all' for pretraining, 'lora' for pruning/recovery, 'none' to freeze."""
        if which not in ("all", "lora", "none"):
            raise ConfigError(f"unknown trainable selector {which!r}")
        for name, t in self.parameters().items():
            if which == "all":
                t.requires_grad = True
            elif which == "lora":
                t.requires_grad = ".lora_" in name
            else:
                t.requires_grad = False
            t.zero_grad()

    def clone(self) -> "LoraModel":
        def c(t: Tensor | None) -> Tensor | None:
            return None if t is None else t.copy()

        blocks = []
        for blk in self.blocks:
            blocks.append(
                Block(
                    c(blk.attn_norm),
                    *[
                        LoraLinear(c(m.weight), c(m.lora_a), c(m.lora_b), m.gamma)
                        for m in (blk.q, blk.k, blk.v, blk.o)
                    ],
                    c(blk.mlp_norm),
                    *[
                        LoraLinear(c(m.weight), c(m.lora_a), c(m.lora_b), m.gamma)
                        for m in (blk.gate, blk.up, blk.down)
                    ],
                    n_heads=blk.n_heads,
                    head_dim=blk.head_dim,
                    mlp_dim=blk.mlp_dim,
                )
            )
        return LoraModel(self.config, c(self.tok_embedding), c(self.pos_embedding), blocks, c(self.final_norm), c(self.head))

    def merge_all_lora(self) -> None:
        for mod in self.lora_linears().values():
            mod.merge_lora()

    # ---- forward ---------------------------------------------------------------

    def forward(self, tokens: np.ndarray) -> Tensor:
        """Causal logits for ids of shape (T,) or (B, T)."""
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise InputError(f"forward: tokens must be 1-D or 2-D, got shape {tokens.shape}")
        b, t = tokens.shape
        if t > self.config.block_size:
            raise InputError(f"forward: sequence length {t} exceeds block size {self.config.block_size}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InputError(f"forward: token id out of range for vocab {self.config.vocab_size}")

        positions = np.broadcast_to(np.arange(t), (b, t))
        h = T.add(
            T.embedding_lookup(self.tok_embedding, tokens),
            T.embedding_lookup(self.pos_embedding, positions),
        )
        for blk in self.blocks:
            h = T.add(h, self._attention(blk, T.rmsnorm(h, blk.attn_norm)))
            h = T.add(h, self._mlp(blk, T.rmsnorm(h, blk.mlp_norm)))
        logits = T.linear(T.rmsnorm(h, self.final_norm), self.head)
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    def _attention(self, blk: Block, h: Tensor) -> Tensor:
        if blk.n_heads == 0:
            # every head structurally removed: attention contributes nothing
            return T.scale(h, 0.0)
        qh = split_heads(blk.q.apply(h), blk.n_heads, blk.head_dim)
        kh = split_heads(blk.k.apply(h), blk.n_heads, blk.head_dim)
        vh = split_heads(blk.v.apply(h), blk.n_heads, blk.head_dim)
        ctx = causal_attention_mix(qh, kh, vh, blk.head_dim)
        return blk.o.apply(merge_heads(ctx))

    def _mlp(self, blk: Block, h: Tensor) -> Tensor:
        if blk.mlp_dim == 0:
            return T.scale(h, 0.0)
        gated = T.mul(T.silu(blk.gate.apply(h)), blk.up.apply(h))
        return blk.down.apply(gated)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size


def _init_linear(rng: np.random.Generator, out_dim: int, in_dim: int, rank: int, gamma: float, trainable_host: bool) -> LoraLinear:
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim)), requires_grad=trainable_host)
    if rank == 0:
        return LoraLinear(w, None, None, gamma)
    a = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(rank, in_dim)), requires_grad=True)
    b = Tensor(np.zeros((out_dim, rank)), requires_grad=True)
    return LoraLinear(w, a, b, gamma)


def build_model(config: ModelConfig) -> LoraModel:
    """Deterministic init from the config seed; lora_B starts all-zero."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x10DE]))
    d, r, g = config.dim, config.lora_rank, config.lora_gamma
    tok = Tensor(rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
    pos = Tensor(rng.normal(0.0, 0.02, size=(config.block_size, d)))
    blocks = []
    for _ in range(config.n_layers):
        attn_norm = Tensor(np.ones(d))
        q = _init_linear(rng, d, d, r, g, False)
        k = _init_linear(rng, d, d, r, g, False)
        v = _init_linear(rng, d, d, r, g, False)
        o = _init_linear(rng, d, d, r, g, False)
        mlp_norm = Tensor(np.ones(d))
        gate = _init_linear(rng, config.mlp_dim, d, r, g, False)
        up = _init_linear(rng, config.mlp_dim, d, r, g, False)
        down = _init_linear(rng, d, config.mlp_dim, r, g, False)
        blocks.append(Block(attn_norm, q, k, v, o, mlp_norm, gate, up, down,
                            config.n_heads, config.head_dim, config.mlp_dim))
    final_norm = Tensor(np.ones(d))
    head = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d)))
    model = LoraModel(config, tok, pos, blocks, final_norm, head)
    model.set_trainable("none")
    return model


def next_token_loss(model: LoraModel, sequences: np.ndarray) -> Tensor:
    """Mean cross entropy of predicting sequences[:, 1:] from sequences[:, :-1]."""
    sequences = np.asarray(sequences)
    if sequences.ndim == 1:
        sequences = sequences[None, :]
    logits = model.forward(sequences[:, :-1])
    return T.cross_entropy(logits, sequences[:, 1:])
