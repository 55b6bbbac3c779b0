"""Binary checkpoint format for full and structurally compressed models.

Layout (all integers little-endian, documented bit-exactly in docs/formats.md):

    magic   b"LSHR"
    version u32 (currently 1)
    meta_len u32, meta_json bytes (canonical JSON: sorted keys, compact separators)
    n_tensors u32
    table: per tensor, sorted by name:
        name_len u16, name utf-8 bytes
        dtype u8 (0 = float64)
        ndim u8, dims u32 each
        offset u64 (absolute file offset of the payload)
    payloads: raw little-endian float64, concatenated in table order

Meta carries the model config, per-block head counts and MLP widths (these
differ from the config after compression), and free-form ``extra`` data such
as the producing stage and compression provenance. Save -> load -> save is
byte-identical because tensor order and meta encoding are canonical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Block, LoraLinear, LoraModel, ModelConfig
from .tensor import Tensor

MAGIC = b"LSHR"
VERSION = 1
_DTYPE_F64 = 0


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_meta(model: LoraModel, extra: dict | None = None) -> dict:
    cfg = model.config
    return {
        "config": {
            "vocab_size": cfg.vocab_size,
            "dim": cfg.dim,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "mlp_dim": cfg.mlp_dim,
            "lora_rank": cfg.lora_rank,
            "lora_gamma": cfg.lora_gamma,
            "block_size": cfg.block_size,
            "seed": cfg.seed,
        },
        "blocks": [
            {"n_heads": b.n_heads, "head_dim": b.head_dim, "mlp_dim": b.mlp_dim}
            for b in model.blocks
        ],
        "extra": extra or {},
    }


def save_checkpoint(model: LoraModel, path: str | Path, extra: dict | None = None) -> None:
    params = model.parameters()
    names = sorted(params)
    meta = _canonical_json(model_meta(model, extra))

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<I", len(meta))
    header += meta
    header += struct.pack("<I", len(names))

    entries = []
    for name in names:
        shape = params[name].data.shape
        enc = name.encode("utf-8")
        entries.append((name, enc, shape))
    table_size = sum(2 + len(enc) + 1 + 1 + 4 * len(shape) + 8 for _, enc, shape in entries)

    offset = len(header) + table_size
    table = bytearray()
    for name, enc, shape in entries:
        table += struct.pack("<H", len(enc))
        table += enc
        table += struct.pack("<BB", _DTYPE_F64, len(shape))
        for d in shape:
            table += struct.pack("<I", d)
        table += struct.pack("<Q", offset)
        offset += int(np.prod(shape)) * 8 if shape else 8

    with open(path, "wb") as f:
        f.write(header)
        f.write(table)
        for name, _, _ in entries:
            f.write(params[name].data.astype("<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw read: (meta, tensors). Validates magic, version, and bounds."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt meta block: {e}") from e
    n_tensors = r.u32()
    tensors: dict[str, np.ndarray] = {}
    entries = []
    for _ in range(n_tensors):
        name = r.take(r.u16()).decode("utf-8")
        dtype = r.u8()
        if dtype != _DTYPE_F64:
            raise FormatError(f"{path}: unknown dtype code {dtype} for tensor {name}")
        shape = tuple(r.u32() for _ in range(r.u8()))
        offset = r.u64()
        entries.append((name, shape, offset))
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: payload for tensor {name} out of bounds")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)  # writable copy
    return meta, tensors


def load_checkpoint(path: str | Path) -> LoraModel:
    meta, tensors = read_checkpoint(path)
    try:
        c = meta["config"]
        config = ModelConfig(
            vocab_size=c["vocab_size"],
            dim=c["dim"],
            n_layers=c["n_layers"],
            n_heads=c["n_heads"],
            mlp_dim=c["mlp_dim"],
            lora_rank=c["lora_rank"],
            lora_gamma=c["lora_gamma"],
            block_size=c["block_size"],
            seed=c["seed"],
        )
        block_meta = meta["blocks"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: meta missing field {e}") from e

    def tensor(name: str) -> Tensor:
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name}")
        return Tensor(tensors[name])

    def lora_linear(prefix: str) -> LoraLinear:
        a_name, b_name = f"{prefix}.lora_A", f"{prefix}.lora_B"
        a = tensor(a_name) if a_name in tensors else None
        b = tensor(b_name) if b_name in tensors else None
        if (a is None) != (b is None):
            raise FormatError(f"{path}: {prefix} has only one LoRA factor")
        return LoraLinear(tensor(f"{prefix}.weight"), a, b, config.lora_gamma)

    blocks = []
    for i, bm in enumerate(block_meta):
        p = f"blocks.{i}"
        blocks.append(
            Block(
                tensor(f"{p}.attn_norm.gain"),
                lora_linear(f"{p}.attn.q"),
                lora_linear(f"{p}.attn.k"),
                lora_linear(f"{p}.attn.v"),
                lora_linear(f"{p}.attn.o"),
                tensor(f"{p}.mlp_norm.gain"),
                lora_linear(f"{p}.mlp.gate"),
                lora_linear(f"{p}.mlp.up"),
                lora_linear(f"{p}.mlp.down"),
                n_heads=bm["n_heads"],
                head_dim=bm["head_dim"],
                mlp_dim=bm["mlp_dim"],
            )
        )
    model = LoraModel(
        config,
        tensor("tok_embedding"),
        tensor("pos_embedding"),
        blocks,
        tensor("final_norm.gain"),
        tensor("head.weight"),
    )
    model.set_trainable("none")
    return model


def checkpoint_extra(path: str | Path) -> dict:
    meta, _ = read_checkpoint(path)
    return meta.get("extra", {})
