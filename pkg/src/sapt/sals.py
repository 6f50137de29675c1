"""
Shared attentive learning and selection.

Training and inference route through the same function, `route`: embed the
raw input, max-pool over length, project to a query, attend over the first
``t`` keys, and combine the blocks with the resulting weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Value
from .backbone import Backbone, lm_loss
from .errors import ConfigError, UsageError
from .pet import AggregatedPet, PetBlock, combine_blocks


def default_temperature(kind: str, d: int) -> float:
    """d*e for soft prompts, sqrt(d) for low-rank adapters."""
    return d * math.e if kind == "prompt" else math.sqrt(d)


class QueryProjection:
    """q = LayerNorm(W_up SiLU(W_down e))."""

    def __init__(self, d: int, hidden: int, seed: int = 0, eps: float = 1e-5):
        rng = np.random.default_rng([seed, 202])
        self.d, self.hidden, self.eps = d, hidden, eps
        self.W_down = ag.param(rng.normal(0, 1 / math.sqrt(d), (hidden, d)), "W_down")
        self.W_up = ag.param(rng.normal(0, 1 / math.sqrt(hidden), (d, hidden)), "W_up")
        self.gamma = ag.param(np.ones(d), "ln.gamma")
        self.beta = ag.param(np.zeros(d), "ln.beta")

    def values(self) -> list[Value]:
        return [self.W_down, self.W_up, self.gamma, self.beta]

    def __call__(self, e: Value) -> Value:
        x = e.reshape(1, -1) if e.ndim == 1 else e
        h_down = x @ self.W_down.swapaxes(0, 1)
        h_up = ag.silu(h_down) @ self.W_up.swapaxes(0, 1)
        q = ag.layer_norm(h_up, self.gamma, self.beta, self.eps)
        return q.reshape(-1) if e.ndim == 1 else q

    def state(self) -> dict[str, np.ndarray]:
        return {"W_down": self.W_down.data.copy(), "W_up": self.W_up.data.copy(),
                "gamma": self.gamma.data.copy(), "beta": self.beta.data.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            getattr(self, name).data = np.array(arr, dtype=np.float64)

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for v in self.values():
            h.update(v.data.tobytes())
        return h.hexdigest()


@dataclass
class SharedAttentionState:
    projection: QueryProjection
    temperature: float
    keys: list[Value] = field(default_factory=list)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("attention temperature must be positive", "temperature")


def compute_query(state: SharedAttentionState, E: Value, mask=None) -> Value:
    """Query for embedded input ``E`` of shape (m, d) or (batch, m, d)."""
    if E.shape[-1] != state.projection.d:
        raise ConfigError(f"embedding width {E.shape[-1]} != projection width {state.projection.d}",
                          "proj")
    e = ag.max_pool_seq(E, mask)
    return state.projection(e)


def shared_attention(state: SharedAttentionState, q: Value, t: int) -> Value:
    """Softmax of q.k_i / T over the first ``t`` keys; shape (t,) or (batch, t)."""
    if t < 1:
        raise UsageError("shared attention needs at least one block")
    if t > len(state.keys):
        raise UsageError(f"{t} blocks requested but only {len(state.keys)} keys exist")
    K = ag.stack(state.keys[:t]) if t > 1 else state.keys[0].reshape(1, -1)
    logits = q @ K.swapaxes(0, 1) if q.ndim == 2 else (q.reshape(1, -1) @ K.swapaxes(0, 1)).reshape(t)
    return ag.softmax(logits, state.temperature, axis=-1)


def attention_for_tokens(state: SharedAttentionState, backbone: Backbone, ids, valid, t: int) -> Value:
    E = backbone.embed(ids)
    return shared_attention(state, compute_query(state, E, valid), t)


def route(state: SharedAttentionState, blocks: Sequence[PetBlock], backbone: Backbone, ids, valid,
          t: int, combine: str = "literal") -> tuple[AggregatedPet, Value]:
    """The one routing routine used by both learning and selection."""
    if not blocks:
        raise UsageError("no PET blocks have been learned")
    a = attention_for_tokens(state, backbone, ids, valid, t)
    return combine_blocks(blocks[:t], a, combine), a


def attentive_forward(state: SharedAttentionState, blocks: Sequence[PetBlock], backbone: Backbone,
                      batch, t: int, combine: str = "literal") -> tuple[Value, Value]:
    """Task loss of a batch under the attention-weighted PET.

    ``batch`` carries ``ids``/``target_mask`` of the full examples and
    ``query_ids``/``query_valid`` of the inputs only.
    """
    pet, a = route(state, blocks, backbone, batch.query_ids, batch.query_valid, t, combine)
    return lm_loss(backbone, batch.ids, batch.target_mask, pet), a


def attentive_select(state: SharedAttentionState, blocks: Sequence[PetBlock], backbone: Backbone,
                     ids, valid, t_seen: int | None = None, combine: str = "literal"
                     ) -> tuple[AggregatedPet, Value]:
    t_seen = len(blocks) if t_seen is None else t_seen
    with ag.no_grad():
        return route(state, blocks, backbone, ids, valid, t_seen, combine)


# -- attention dumps ---------------------------------------------------------

def write_attention_csv(path: str | Path, rows: Sequence[tuple[str, Sequence[float]]], width: int) -> None:
    """Header ``task_or_input,block_1..block_T``; short rows are zero-filled."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_or_input"] + [f"block_{i + 1}" for i in range(width)])
        for label, weights in rows:
            vals = list(weights) + [0.0] * (width - len(weights))
            w.writerow([label] + [repr(float(x)) for x in vals])


def read_attention_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    labels = [row[0] for row in r[1:]]
    return labels, np.array([[float(x) for x in row[1:]] for row in r[1:]]).reshape(len(labels), len(r[0]) - 1)
