"""
Tiny decoder-only transformer used as the frozen language-model backbone.

PET blocks plug in at two places: soft prompts are prepended to the token
embeddings before positional encodings are added, and low-rank adapters add
``x A^T B^T`` to the query and value projections of every attention layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Value
from .errors import ConfigError, InputError, LengthError
from .optim import AdamW

CHECKPOINT_VERSION = 1
LORA_SITES = ("q", "v")


@dataclass
class BackboneConfig:
    vocab_size: int
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 352
    seed: int = 0

    def validate(self) -> None:
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads", "backbone.heads")
        for name in ("vocab_size", "model_dim", "layers", "heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", f"backbone.{name}")


@dataclass
class Sampler:
    kind: str = "greedy"
    k: int = 20
    temperature: float = 1.0

    @classmethod
    def greedy(cls) -> "Sampler":
        return cls("greedy")

    @classmethod
    def top_k(cls, k: int, temperature: float = 1.0) -> "Sampler":
        return cls("top_k", k, temperature)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class Backbone:
    """Parameters live in ``self.params`` keyed by dotted name."""

    def __init__(self, config: BackboneConfig, params: dict[str, Value] | None = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else self._init_params()
        self._pe = sinusoidal_positions(config.max_seq_len, config.model_dim)
        self._causal: dict[int, np.ndarray] = {}

    def _init_params(self) -> dict[str, Value]:
        c = self.config
        rng = np.random.default_rng([c.seed, 7])
        d, f = c.model_dim, c.ffn_dim
        p: dict[str, np.ndarray] = {"tok_emb": rng.normal(0, 0.5, (c.vocab_size, d))}
        for i in range(c.layers):
            pre = f"layers.{i}"
            p[f"{pre}.ln1.gamma"] = np.ones(d)
            p[f"{pre}.ln1.beta"] = np.zeros(d)
            for w in "qkvo":
                p[f"{pre}.attn.w{w}"] = rng.normal(0, 1 / math.sqrt(d), (d, d))
            p[f"{pre}.ln2.gamma"] = np.ones(d)
            p[f"{pre}.ln2.beta"] = np.zeros(d)
            p[f"{pre}.ffn.w1"] = rng.normal(0, 1 / math.sqrt(d), (d, f))
            p[f"{pre}.ffn.b1"] = np.zeros(f)
            p[f"{pre}.ffn.w2"] = rng.normal(0, 1 / math.sqrt(f) / math.sqrt(2 * c.layers), (f, d))
            p[f"{pre}.ffn.b2"] = np.zeros(d)
        p["ln_f.gamma"] = np.ones(d)
        p["ln_f.beta"] = np.zeros(d)
        p["head"] = rng.normal(0, 1 / math.sqrt(d), (d, c.vocab_size))
        return {k: Value(v, name=k) for k, v in p.items()}

    # -- state --------------------------------------------------------------
    def freeze(self) -> None:
        for v in self.params.values():
            v.freeze()

    def unfreeze(self) -> None:
        for v in self.params.values():
            v.data = v.data.copy()
            v.frozen = False
            v.requires_grad = True

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def lora_site_shapes(self) -> dict[str, tuple[int, int]]:
        """Site name -> (in_features, out_features) of each adaptable projection."""
        d = self.config.model_dim
        return {f"layers.{i}.attn.{s}": (d, d) for i in range(self.config.layers) for s in LORA_SITES}

    def embed(self, tokens) -> Value:
        """Token embeddings only, without positional encodings."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InputError("token id outside the vocabulary")
        return ag.embedding(self.params["tok_emb"], tokens)

    # -- forward --------------------------------------------------------------
    def _mask(self, L: int) -> np.ndarray:
        m = self._causal.get(L)
        if m is None:
            m = np.triu(np.full((L, L), -1e9), k=1)
            self._causal[L] = m
        return m

    def _proj(self, x: Value, name: str, pet) -> Value:
        site = name.rsplit(".w", 1)[0] + "." + name.rsplit(".w", 1)[1]
        h = x @ self.params[name]
        if pet is None or pet.kind != "lora":
            return h
        if pet.delta is not None and site in pet.delta:
            return h + x @ pet.delta[site]
        if pet.lora is not None and site in pet.lora:
            A, B = pet.lora[site]
            return h + (x @ A.swapaxes(-1, -2)) @ B.swapaxes(-1, -2)
        return h

    def forward(self, tokens, pet=None, pos_offset: int = 0) -> Value:
        """Logits of shape (batch, L_eff, V); ``tokens`` is (batch, L) or (L,)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        c = self.config
        Bsz, L = tokens.shape
        x = self.embed(tokens)
        if pet is not None and pet.kind == "prompt":
            P = pet.prompt
            if P.shape[-1] != c.model_dim:
                raise ConfigError("prompt width does not match model_dim", "pet")
            if P.ndim == 2:
                P = ag.add(ag.Value(np.zeros((Bsz, 1, 1))), P)
            elif P.shape[0] != Bsz:
                raise ConfigError("batched prompt does not match batch size", "pet")
            x = ag.concat([P, x], axis=1)
        L_eff = x.shape[1]
        if pos_offset + L_eff > c.max_seq_len:
            raise LengthError(f"sequence of {L_eff} positions exceeds max_seq_len {c.max_seq_len}")
        x = x + self._pe[pos_offset:pos_offset + L_eff]
        H = c.heads
        dh = c.model_dim // H
        mask = self._mask(L_eff)
        for i in range(c.layers):
            pre = f"layers.{i}"
            h = ag.layer_norm(x, self.params[f"{pre}.ln1.gamma"], self.params[f"{pre}.ln1.beta"])
            q = self._proj(h, f"{pre}.attn.wq", pet)
            k = self._proj(h, f"{pre}.attn.wk", pet)
            v = self._proj(h, f"{pre}.attn.wv", pet)
            q = q.reshape(Bsz, L_eff, H, dh).transpose(0, 2, 1, 3)
            k = k.reshape(Bsz, L_eff, H, dh).transpose(0, 2, 3, 1)
            v = v.reshape(Bsz, L_eff, H, dh).transpose(0, 2, 1, 3)
            att = ag.softmax((q @ k) * (1.0 / math.sqrt(dh)) + mask, axis=-1)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(Bsz, L_eff, c.model_dim)
            x = x + o @ self.params[f"{pre}.attn.wo"]
            h = ag.layer_norm(x, self.params[f"{pre}.ln2.gamma"], self.params[f"{pre}.ln2.beta"])
            h = ag.silu(h @ self.params[f"{pre}.ffn.w1"] + self.params[f"{pre}.ffn.b1"])
            x = x + h @ self.params[f"{pre}.ffn.w2"] + self.params[f"{pre}.ffn.b2"]
        x = ag.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        logits = x @ self.params["head"]
        return logits[0] if squeeze else logits


def prompt_length_of(pet) -> int:
    if pet is not None and pet.kind == "prompt":
        return pet.prompt.shape[-2]
    return 0


def forward_with_pet(model: Backbone, tokens, pet=None) -> Value:
    return model.forward(tokens, pet)


def lm_loss(model: Backbone, tokens, target_mask, pet=None, pos_offset: int = 0) -> Value:
    """Next-token cross-entropy restricted to positions flagged in ``target_mask``.

    ``target_mask[b, j]`` marks token j as a prediction target (it is then
    predicted from position j-1). Prompt positions are never targets.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    target_mask = np.atleast_2d(np.asarray(target_mask, dtype=bool))
    if tokens.shape[1] < 2 or not target_mask[:, 1:].any():
        raise InputError("lm_loss needs a non-empty output span")
    p = prompt_length_of(pet)
    logits = model.forward(tokens, pet, pos_offset)
    L = tokens.shape[1]
    pred = logits[:, p:p + L - 1, :]
    return ag.cross_entropy(pred, tokens[:, 1:], target_mask[:, 1:])


def _select_rows(pet, rows: np.ndarray):
    """Restrict a batched aggregated PET to a subset of batch rows."""
    if pet is None:
        return None
    return pet.take(rows)


def generate_batch(model: Backbone, prefixes: Sequence[Sequence[int]], pet=None, max_new: int = 16,
                   sampler: Sampler | None = None, seed: int = 0, eos_id: int = 1,
                   pad_id: int = 0) -> list[list[int]]:
    """Autoregressive continuation of each prefix (no cache; full recompute).

    A batched ``pet`` must have one row per prefix. Generation stops per row at
    ``eos_id`` (not included in the output) or after ``max_new`` tokens.
    """
    sampler = sampler or Sampler.greedy()
    if any(len(p) == 0 for p in prefixes):
        raise InputError("generate needs non-empty prefixes")
    n = len(prefixes)
    plen = prompt_length_of(pet)
    longest = max(len(p) for p in prefixes)
    if plen + longest > model.config.max_seq_len:
        raise LengthError("prefix does not fit into max_seq_len")
    cap = min(max_new, model.config.max_seq_len - plen - longest)
    rng = np.random.default_rng(seed)
    lengths = np.array([len(p) for p in prefixes])
    buf = np.full((n, longest + cap), pad_id, dtype=np.int64)
    for i, p in enumerate(prefixes):
        buf[i, :len(p)] = p
    outputs: list[list[int]] = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    batched = pet is not None and pet.batched
    with ag.no_grad():
        for _ in range(cap):
            rows = np.flatnonzero(active)
            if rows.size == 0:
                break
            width = int(lengths[rows].max())
            sub_pet = _select_rows(pet, rows) if batched else pet
            logits = model.forward(buf[rows, :width], sub_pet).data
            last = logits[np.arange(rows.size), plen + lengths[rows] - 1]
            for r, row in enumerate(rows):
                tok = _sample(last[r], sampler, rng)
                if tok == eos_id:
                    active[row] = False
                    continue
                outputs[row].append(tok)
                buf[row, lengths[row]] = tok
                lengths[row] += 1
                if len(outputs[row]) >= cap:
                    active[row] = False
    return outputs


def _sample(logits: np.ndarray, sampler: Sampler, rng) -> int:
    if sampler.kind == "greedy" or sampler.k == 1:
        return int(np.argmax(logits))
    if sampler.kind != "top_k":
        raise ConfigError(f"unknown sampler {sampler.kind!r}", "sampler")
    k = min(sampler.k, logits.size)
    top = np.argsort(-logits, kind="stable")[:k]
    z = logits[top] / sampler.temperature
    z = np.exp(z - z.max())
    return int(top[rng.choice(k, p=z / z.sum())])


def generate(model: Backbone, prefix: Sequence[int], pet=None, max_new: int = 16,
             sampling: Sampler | None = None, seed: int = 0, eos_id: int = 1) -> list[int]:
    return generate_batch(model, [prefix], pet, max_new, sampling, seed, eos_id)[0]


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: Backbone, directory: str | Path) -> None:
    """JSON manifest plus one little-endian float32 file per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(model.params):
        arr = model.params[name].data
        fname = name + ".bin"
        arr.astype("<f4").tofile(d / fname)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config), "params": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory: str | Path, frozen: bool = True) -> Backbone:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError("unsupported checkpoint format version", "backbone.checkpoint")
    config = BackboneConfig(**manifest["config"])
    params = {}
    for e in manifest["params"]:
        arr = np.fromfile(d / e["file"], dtype="<f4").astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Value(arr, name=e["name"])
    model = Backbone(config, params)
    if frozen:
        model.freeze()
    return model


def round_to_float32(model: Backbone) -> None:
    """Make in-memory weights equal to what a checkpoint round trip yields."""
    for v in model.params.values():
        v.data = v.data.astype(np.float32).astype(np.float64)


# -- pretraining -----------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    max_offset: int = 16
    seed: int = 0
    extra: dict = field(default_factory=dict)


def pretrain(model: Backbone, sample_batch, config: PretrainConfig, log=None) -> list[float]:
    """Train every backbone weight on ``sample_batch(rng, n) -> (ids, target_mask)``.

    Positions are shifted by a random offset so the model tolerates prepended
    soft prompts. Weights end up frozen and rounded to float32.
    """
    model.unfreeze()
    opt = AdamW(list(model.params.values()), lr=config.lr, weight_decay=0.01, clip_norm=1.0)
    rng = np.random.default_rng([config.seed, 11])
    losses = []
    for step in range(config.steps):
        for g in opt.groups:
            warm = min(1.0, (step + 1) / max(1, config.warmup))
            decay = 0.5 * (1 + math.cos(math.pi * step / config.steps))
            g["lr"] = config.lr * warm * (0.1 + 0.9 * decay)
        ids, tmask = sample_batch(rng, config.batch_size)
        room = model.config.max_seq_len - ids.shape[1]
        offset = int(rng.integers(0, max(1, min(config.max_offset, room) + 1)))
        opt.zero_grad()
        loss = lm_loss(model, ids, tmask, None, pos_offset=offset)
        ag.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log is not None and (step % 200 == 0 or step == config.steps - 1):
            log(step, float(np.mean(losses[-200:])))
    round_to_float32(model)
    for v in model.params.values():
        v.grad = None
    model.freeze()
    return losses
