"""PET blocks (soft prompts or low-rank adapters), their keys, and weighted combination."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Value
from .errors import ConfigError, ContractError, NumericError, UsageError

BLOCK_FORMAT_VERSION = 1


@dataclass
class PetConfig:
    kind: str = "prompt"
    prompt_length: int = 10
    rank: int = 4
    combine: str = "literal"
    lora_init_std: float = 0.02

    def validate(self) -> None:
        if self.kind not in ("prompt", "lora"):
            raise ConfigError(f"unknown PET kind {self.kind!r}", "pet.kind")
        if self.combine not in ("literal", "effective"):
            raise ConfigError(f"unknown combine mode {self.combine!r}", "pet.combine")
        if self.kind == "prompt" and self.prompt_length < 0:
            raise ConfigError("must be non-negative", "pet.prompt_length")
        if self.kind == "lora" and self.rank < 1:
            raise ConfigError("must be positive", "pet.rank")


@dataclass
class PetBlock:
    """One task's trainable parameters plus its routing key.

    For prompts ``params`` holds ``"prompt"`` (p x d). For LoRA it holds
    ``"<site>.A"`` (r x k) and ``"<site>.B"`` (d_out x r) for every site.
    """

    kind: str
    params: dict[str, Value]
    key: Value
    task_index: int
    frozen: bool = False

    def values(self) -> list[Value]:
        return [self.params[k] for k in sorted(self.params)] + [self.key]

    def pet_values(self) -> list[Value]:
        return [self.params[k] for k in sorted(self.params)]

    def freeze(self) -> None:
        for v in self.values():
            v.freeze()
        self.frozen = True

    def digest(self, include_key: bool = True) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        if include_key:
            h.update(b"key")
            h.update(self.key.data.tobytes())
        return h.hexdigest()

    def key_digest(self) -> str:
        return hashlib.sha256(self.key.data.tobytes()).hexdigest()

    def sites(self) -> list[str]:
        return sorted({k.rsplit(".", 1)[0] for k in self.params}) if self.kind == "lora" else []


@dataclass
class AggregatedPet:
    """Result of `combine_blocks`; tensors carry a leading batch axis when ``batched``."""

    kind: str
    prompt: Value | None = None
    lora: dict[str, tuple[Value, Value]] | None = None
    delta: dict[str, Value] | None = None
    batched: bool = False

    def tensors(self) -> dict[str, Value]:
        if self.kind == "prompt":
            return {"prompt": self.prompt}
        if self.delta is not None:
            return {f"{s}.delta": v for s, v in self.delta.items()}
        out = {}
        for s, (A, B) in self.lora.items():
            out[f"{s}.A"] = A
            out[f"{s}.B"] = B
        return out

    def take(self, rows: np.ndarray) -> "AggregatedPet":
        def t(v: Value) -> Value:
            return Value(v.data[rows])
        if self.kind == "prompt":
            return AggregatedPet("prompt", prompt=t(self.prompt), batched=True)
        if self.delta is not None:
            return AggregatedPet("lora", delta={s: t(v) for s, v in self.delta.items()}, batched=True)
        return AggregatedPet("lora", lora={s: (t(A), t(B)) for s, (A, B) in self.lora.items()},
                             batched=True)


def new_block(kind: str, config: PetConfig, task_index: int, seed: int, backbone,
              used_indices: Sequence[int] = ()) -> PetBlock:
    """Fresh block: prompts start from sampled vocabulary rows, LoRA from B = 0."""
    if task_index in used_indices:
        raise UsageError(f"task index {task_index} already has a block")
    rng = np.random.default_rng([seed, task_index, 101])
    d = backbone.config.model_dim
    table = backbone.params["tok_emb"].data
    if kind == "prompt":
        # reserved ids (pad/eos/[GEN]/[SEP]) sit at the front of the vocabulary
        rows = rng.integers(4, table.shape[0], config.prompt_length)
        params = {"prompt": ag.param(table[rows].copy(), "prompt")}
    elif kind == "lora":
        params = {}
        for site, (k_in, d_out) in backbone.lora_site_shapes().items():
            params[f"{site}.A"] = ag.param(rng.normal(0, config.lora_init_std, (config.rank, k_in)),
                                           f"{site}.A")
            params[f"{site}.B"] = ag.param(np.zeros((d_out, config.rank)), f"{site}.B")
    else:
        raise ConfigError(f"unknown PET kind {kind!r}", "pet.kind")
    key = ag.param(rng.normal(0, 1 / np.sqrt(d), d), "key")
    return PetBlock(kind, params, key, task_index)


def copy_block(src: PetBlock, task_index: int) -> PetBlock:
    """Trainable copy of ``src`` under a new task index (the key is copied too)."""
    params = {k: ag.param(v.data.copy(), k) for k, v in src.params.items()}
    return PetBlock(src.kind, params, ag.param(src.key.data.copy(), "key"), task_index)


def check_simplex(weights: np.ndarray, tol: float = 1e-6) -> None:
    w = np.asarray(weights)
    if np.any(w < -tol) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise NumericError("combination weights are not on the simplex")


def combine_blocks(blocks: Sequence[PetBlock], weights, mode: str = "literal") -> AggregatedPet:
    """theta_B = sum_i a_i theta_{B_i}, per parameter tensor.

    ``weights`` is a Value of shape (t,) or (batch, t). In ``"effective"``
    mode LoRA blocks are combined as sum_i a_i B_i A_i instead.
    """
    if not blocks:
        raise UsageError("combine_blocks needs at least one block")
    kind = blocks[0].kind
    if any(b.kind != kind for b in blocks):
        raise UsageError("cannot combine blocks of different kinds")
    names = sorted(blocks[0].params)
    for b in blocks[1:]:
        if sorted(b.params) != names or any(b.params[n].shape != blocks[0].params[n].shape for n in names):
            raise UsageError("blocks differ in parameter shapes")
    weights = ag.as_value(weights)
    t = len(blocks)
    if weights.shape[-1] != t:
        raise UsageError(f"{weights.shape[-1]} weights for {t} blocks")
    check_simplex(weights.data)
    batched = weights.ndim == 2
    w2 = weights if batched else weights.reshape(1, t)

    def mix(tensors: list[Value]) -> Value:
        shape = tensors[0].shape
        flat = ag.stack(tensors).reshape(t, -1) if t > 1 else tensors[0].reshape(1, -1)
        out = w2 @ flat
        return out.reshape((w2.shape[0],) + shape) if batched else out.reshape(shape)

    if kind == "prompt":
        return AggregatedPet("prompt", prompt=mix([b.params["prompt"] for b in blocks]), batched=batched)
    sites = blocks[0].sites()
    if mode == "effective":
        delta = {}
        for s in sites:
            # x @ (B A)^T, so store (B A)^T = A^T B^T with shape (k, d_out)
            per = [b.params[f"{s}.A"].swapaxes(0, 1) @ b.params[f"{s}.B"].swapaxes(0, 1) for b in blocks]
            delta[s] = mix(per)
        return AggregatedPet("lora", delta=delta, batched=batched)
    if mode != "literal":
        raise ConfigError(f"unknown combine mode {mode!r}", "pet.combine")
    lora = {s: (mix([b.params[f"{s}.A"] for b in blocks]), mix([b.params[f"{s}.B"] for b in blocks]))
            for s in sites}
    return AggregatedPet("lora", lora=lora, batched=batched)


def single(block: PetBlock) -> AggregatedPet:
    """A block used on its own, without any combination."""
    if block.kind == "prompt":
        return AggregatedPet("prompt", prompt=block.params["prompt"])
    return AggregatedPet("lora", lora={s: (block.params[f"{s}.A"], block.params[f"{s}.B"])
                                       for s in block.sites()})


# -- serialization -----------------------------------------------------------

def _manifest(block: PetBlock, dtype: str) -> dict:
    return {
        "format_version": BLOCK_FORMAT_VERSION,
        "kind": block.kind,
        "task_index": block.task_index,
        "frozen": block.frozen,
        "dtype": dtype,
        "params": [{"name": n, "shape": list(block.params[n].shape)} for n in sorted(block.params)],
        "key_dim": int(block.key.shape[0]),
    }


def serialize(block: PetBlock) -> bytes:
    """Length-prefixed JSON header followed by raw little-endian float64 data."""
    header = json.dumps(_manifest(block, "<f8"), sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes() for v in block.values())
    return struct.pack("<I", len(header)) + header + body


def deserialize(blob: bytes) -> PetBlock:
    (n,) = struct.unpack_from("<I", blob)
    meta = json.loads(blob[4:4 + n])
    return _from_buffer(meta, blob[4 + n:], np.dtype(meta["dtype"]))


def _from_buffer(meta: dict, body: bytes, dtype: np.dtype, key: np.ndarray | None = None) -> PetBlock:
    if meta.get("format_version") != BLOCK_FORMAT_VERSION:
        raise ConfigError("unsupported block format version", "blocks")
    offset = 0
    params = {}
    for e in meta["params"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).astype(np.float64)
        offset += count * dtype.itemsize
        params[e["name"]] = ag.param(arr.reshape(e["shape"]), e["name"])
    if key is None:
        key = np.frombuffer(body, dtype=dtype, count=meta["key_dim"], offset=offset).astype(np.float64)
    block = PetBlock(meta["kind"], params, ag.param(np.array(key, dtype=np.float64), "key"),
                     meta["task_index"])
    if meta.get("frozen"):
        block.freeze()
    return block


def save_block(directory: str | Path, block: PetBlock) -> None:
    """On-disk store: ``block_<i>.json`` manifest (with the key) and ``block_<i>.bin`` float32."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = _manifest(block, "<f4")
    meta["key"] = [float(x) for x in block.key.data]
    stem = f"block_{block.task_index}"
    (d / f"{stem}.json").write_text(json.dumps(meta, indent=2) + "\n")
    body = b"".join(np.ascontiguousarray(block.params[n].data, dtype="<f4").tobytes()
                    for n in sorted(block.params))
    (d / f"{stem}.bin").write_bytes(body)


def load_block(directory: str | Path, task_index: int) -> PetBlock:
    d = Path(directory)
    meta = json.loads((d / f"block_{task_index}.json").read_text())
    return _from_buffer(meta, (d / f"block_{task_index}.bin").read_bytes(), np.dtype("<f4"),
                        key=np.array(meta["key"], dtype=np.float64))


def apply_gradient_step(block: PetBlock, lr: float) -> None:
    """Plain gradient step on a block; refuses frozen blocks."""
    if block.frozen:
        raise ContractError(f"block {block.task_index} is frozen")
    for v in block.values():
        if v.grad is not None:
            v.data -= lr * v.grad
