"""
Attentive reflection: pseudo-input generators, attention anchors and the KL
term that keeps earlier tasks' routing in place while later tasks train.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Value
from .backbone import Backbone, Sampler, generate_batch, lm_loss
from .errors import ContractError, ParseError, UsageError
from .optim import AdamW
from .pet import PetBlock, PetConfig, new_block, single
from .sals import SharedAttentionState, attention_for_tokens
from .tasks import (Record, Tokenizer, encode_generator_example, encode_prefix, pad_batch)


@dataclass
class GeneratorConfig:
    prompt_length: int = 300
    rank: int = 8
    steps: int = 150
    lr: float = 1e-2
    batch_size: int = 16
    top_k: int = 20
    temperature: float = 1.0
    max_new: int = 40
    retries: int = 5


@dataclass
class RefGenerator:
    block: PetBlock
    task_index: int
    with_output: bool = False


@dataclass(frozen=True)
class PseudoSample:
    task: int
    instruction: str
    input: str
    output: str | None = None
    parsed: bool = True

    def query_tokens(self, tok: Tokenizer) -> list[int]:
        return encode_prefix(tok, self.instruction, self.input)

    def as_record(self) -> Record:
        if self.output is None:
            raise UsageError("pseudo sample has no output span")
        return Record(self.instruction, self.input, self.output)


def train_ref_generator(backbone: Backbone, tok: Tokenizer, records: Sequence[Record],
                        pet_kind: str, config: GeneratorConfig, seed: int, task_index: int,
                        with_output: bool = False) -> RefGenerator:
    """Fit a private PET block that reconstructs the task's inputs after [GEN]."""
    if not records:
        raise UsageError("generator needs a non-empty dataset")
    pcfg = PetConfig(kind=pet_kind, prompt_length=config.prompt_length, rank=config.rank)
    block = new_block(pet_kind, pcfg, task_index, seed + 7919, backbone)
    encoded = [encode_generator_example(tok, r, with_output) for r in records]
    opt = AdamW(block.pet_values(), lr=config.lr, clip_norm=1.0)
    rng = np.random.default_rng([seed, task_index, 303])
    pet = single(block)
    for _ in range(config.steps):
        idx = rng.choice(len(encoded), size=min(config.batch_size, len(encoded)), replace=False)
        ids, _, tmask = pad_batch([encoded[i][0] for i in idx], tok.pad_id, [encoded[i][1] for i in idx])
        opt.zero_grad()
        ag.backward(lm_loss(backbone, ids, tmask, pet))
        opt.step()
    for v in block.values():
        v.grad = None
    block.freeze()
    return RefGenerator(block, task_index, with_output)


def _parse(tok: Tokenizer, ids: Sequence[int], with_output: bool) -> tuple[str, str, str | None] | None:
    reserved = {tok.pad_id, tok.eos_id, tok.gen_id}
    if any(i in reserved for i in ids):
        return None
    parts: list[list[int]] = [[]]
    for i in ids:
        if i == tok.sep_id:
            parts.append([])
        else:
            parts[-1].append(i)
    expected = 3 if with_output else 2
    if len(parts) != expected or not parts[0] or not parts[-1]:
        return None
    text = [tok.detokenize(p) for p in parts]
    return text[0], text[1], (text[2] if with_output else None)


def generate_pseudo(gen: RefGenerator, backbone: Backbone, tok: Tokenizer, count: int,
                    config: GeneratorConfig, seed: int) -> list[PseudoSample]:
    """``count`` samples conditioned on [GEN]; unparseable ones are redrawn up to
    ``config.retries`` times and then kept as raw input text."""
    if count < 1:
        raise UsageError("count must be at least 1")
    sampler = Sampler.top_k(config.top_k, config.temperature)
    pet = single(gen.block)
    slots: list[PseudoSample | None] = [None] * count
    last_raw: list[list[int]] = [[] for _ in range(count)]
    pending = list(range(count))
    for attempt in range(config.retries + 1):
        if not pending:
            break
        outs = generate_batch(backbone, [[tok.gen_id]] * len(pending), pet, config.max_new, sampler,
                              seed=int(np.random.default_rng([seed, gen.task_index, attempt]).integers(2**31)),
                              eos_id=tok.eos_id, pad_id=tok.pad_id)
        still = []
        for slot, ids in zip(pending, outs):
            parsed = _parse(tok, ids, gen.with_output)
            if parsed is None:
                last_raw[slot] = ids
                still.append(slot)
            else:
                slots[slot] = PseudoSample(gen.task_index, parsed[0], parsed[1], parsed[2])
        pending = still
    for slot in pending:
        raw = [i for i in last_raw[slot] if i not in (tok.pad_id, tok.eos_id, tok.gen_id, tok.sep_id)]
        slots[slot] = PseudoSample(gen.task_index, "", tok.detokenize(raw), None, parsed=False)
    return [s for s in slots if s is not None]


class PseudoStore:
    """Per-task lists of generated pseudo samples."""

    def __init__(self):
        self.sets: dict[int, list[PseudoSample]] = {}

    def add(self, task: int, samples: Sequence[PseudoSample]) -> None:
        if task in self.sets:
            raise ContractError(f"pseudo set for task {task} already stored")
        self.sets[task] = list(samples)

    def __len__(self) -> int:
        return len(self.sets)

    def count(self, task: int) -> int:
        return len(self.sets.get(task, []))

    def pool(self, tasks: Sequence[int]) -> list[PseudoSample]:
        return [s for t in tasks for s in self.sets.get(t, [])]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for task, samples in sorted(self.sets.items()):
            with open(d / f"task_{task}.jsonl", "w", encoding="utf-8") as fh:
                for s in samples:
                    rec = {"task": s.task, "instruction": s.instruction, "input": s.input}
                    if s.output is not None:
                        rec["output"] = s.output
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "PseudoStore":
        store = cls()
        for path in sorted(Path(directory).glob("task_*.jsonl")):
            samples = []
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    samples.append(PseudoSample(int(obj["task"]), obj["instruction"], obj["input"],
                                                obj.get("output")))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"{path.name}: bad pseudo record ({exc})", lineno) from None
            task = int(path.stem.split("_")[1])
            store.sets[task] = samples
        return store


@dataclass(frozen=True)
class AttentionAnchor:
    task: int
    weights: np.ndarray
    captured_at: int

    def to_json(self) -> dict:
        return {"task": self.task, "weights": [float(x) for x in self.weights]}


class AnchorBook:
    """Anchors are written once per task and are read-only afterwards."""

    def __init__(self):
        self._anchors: dict[int, AttentionAnchor] = {}

    def record(self, task: int, weights, step: int) -> AttentionAnchor:
        if task in self._anchors:
            raise ContractError(f"anchor for task {task} already captured")
        w = np.array(weights, dtype=np.float64)
        if w.shape != (task,):
            raise ContractError(f"anchor for task {task} must have {task} entries, got {w.shape}")
        w.flags.writeable = False
        anchor = AttentionAnchor(task, w, step)
        self._anchors[task] = anchor
        return anchor

    def __getitem__(self, task: int) -> AttentionAnchor:
        if task not in self._anchors:
            raise ContractError(f"no anchor captured for task {task}")
        return self._anchors[task]

    def __contains__(self, task: int) -> bool:
        return task in self._anchors

    def __len__(self) -> int:
        return len(self._anchors)

    def tasks(self) -> list[int]:
        return sorted(self._anchors)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps([self._anchors[t].to_json() for t in self.tasks()], indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AnchorBook":
        book = cls()
        for obj in json.loads(Path(path).read_text()):
            book.record(int(obj["task"]), obj["weights"], int(obj["task"]))
        return book


def capture_anchor(state: SharedAttentionState, backbone: Backbone, tok: Tokenizer,
                   records: Sequence[Record], task: int, book: AnchorBook, step: int | None = None,
                   batch_size: int = 128) -> AttentionAnchor:
    """Mean shared attention (over ``task`` blocks) of held-out inputs of ``task``."""
    if task in book:
        raise ContractError(f"anchor for task {task} already captured")
    total = np.zeros(task)
    with ag.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            ids, valid, _ = pad_batch([encode_prefix(tok, r.instruction, r.input) for r in chunk], tok.pad_id)
            total += attention_for_tokens(state, backbone, ids, valid, task).data.sum(axis=0)
    return book.record(task, total / len(records), task if step is None else step)


def pad_anchor(anchor: AttentionAnchor | np.ndarray, t: int, eps: float = 1e-8,
               smooth: bool = True) -> np.ndarray:
    """Zero-pad an anchor to ``t`` entries, then floor at ``eps`` and renormalise."""
    w = anchor.weights if isinstance(anchor, AttentionAnchor) else np.asarray(anchor, dtype=np.float64)
    if t < w.shape[0]:
        raise UsageError(f"cannot pad an anchor of length {w.shape[0]} to {t}")
    out = np.zeros(t)
    out[:w.shape[0]] = w
    if smooth:
        out = np.maximum(out, eps)
        out /= out.sum()
    return out


def reflection_loss(state: SharedAttentionState, backbone: Backbone, tok: Tokenizer, book: AnchorBook,
                    samples: Sequence[PseudoSample], t: int, eps: float = 1e-8) -> Value:
    """Sum over pseudo inputs of KL(current attention || padded anchor of their task)."""
    if t < 1:
        raise UsageError("t must be at least 1")
    prev = [s for s in samples if s.task < t]
    if t == 1 or not prev:
        return Value(0.0)
    targets = np.stack([pad_anchor(book[s.task], t, eps) for s in prev])
    ids, valid, _ = pad_batch([s.query_tokens(tok) for s in prev], tok.pad_id)
    a_hat = attention_for_tokens(state, backbone, ids, valid, t)
    return ag.kl_divergence(a_hat, Value(targets)).sum()


def total_loss(task_loss: Value, kl_loss: Value, lam: float) -> Value:
    if lam < 0:
        raise UsageError("lambda must be non-negative")
    if lam == 0:
        return task_loss
    return task_loss + kl_loss * lam
