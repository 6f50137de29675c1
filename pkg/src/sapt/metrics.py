"""Performance matrix, the four continual-learning metrics, and per-example scorers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, StateError


@dataclass
class PerformanceMatrix:
    """``cells[i-1, j-1]`` is the score on task j after training task i (1-indexed API)."""

    T: int
    cells: np.ndarray = field(default=None)
    individual: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cells is None:
            self.cells = np.full((self.T, self.T), np.nan)
        if self.individual is None:
            self.individual = np.full(self.T, np.nan)
        self.cells = np.asarray(self.cells, dtype=np.float64)
        self.individual = np.asarray(self.individual, dtype=np.float64)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], individual: Sequence[float] | None = None):
        T = len(rows)
        m = cls(T)
        for i, row in enumerate(rows, start=1):
            for j, v in enumerate(row[:i], start=1):
                m.set(i, j, v)
        if individual is not None:
            for t, v in enumerate(individual, start=1):
                m.set_individual(t, v)
        return m

    def set(self, i: int, j: int, score: float) -> None:
        if not (1 <= j <= i <= self.T):
            raise InputError(f"cell ({i},{j}) outside the lower triangle")
        if not 0.0 <= score <= 100.0:
            raise InputError(f"score {score} outside [0, 100]")
        self.cells[i - 1, j - 1] = score

    def get(self, i: int, j: int) -> float:
        return float(self.cells[i - 1, j - 1])

    def set_individual(self, t: int, score: float) -> None:
        if not 0.0 <= score <= 100.0:
            raise InputError(f"score {score} outside [0, 100]")
        self.individual[t - 1] = score

    def row(self, i: int) -> np.ndarray:
        return self.cells[i - 1, :i]

    def row_complete(self, i: int) -> bool:
        return bool(np.all(np.isfinite(self.row(i))))

    def complete(self) -> bool:
        return all(self.row_complete(i) for i in range(1, self.T + 1))

    def has_individual(self) -> bool:
        return bool(np.all(np.isfinite(self.individual)))

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "matrix": [[_num(x) for x in self.row(i)] for i in range(1, self.T + 1)],
            "individual": [_num(x) for x in self.individual] if self.has_individual() else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PerformanceMatrix":
        rows = [[np.nan if v is None else v for v in r] for r in obj["matrix"]]
        m = cls(int(obj["T"]))
        for i, r in enumerate(rows, start=1):
            for j, v in enumerate(r, start=1):
                m.cells[i - 1, j - 1] = v
        if obj.get("individual") is not None:
            m.individual = np.array([np.nan if v is None else v for v in obj["individual"]], dtype=np.float64)
        return m


def _num(x: float):
    return None if not math.isfinite(x) else float(x)


def average_performance(M: PerformanceMatrix) -> float:
    if not M.row_complete(M.T):
        raise StateError("last row of the performance matrix is incomplete")
    return float(sum(M.row(M.T)) / M.T)


def forgetting_rate(M: PerformanceMatrix) -> float:
    T = M.T
    if T < 2:
        raise StateError("forgetting rate needs at least two tasks")
    if not M.complete():
        raise StateError("performance matrix is incomplete")
    total = 0.0
    for t in range(1, T):
        best = max(M.get(k, t) for k in range(t, T))
        total += best - M.get(T, t)
    return total / (T - 1)


def forward_transfer(M: PerformanceMatrix) -> float:
    if not M.has_individual():
        raise StateError("individual-training scores are missing")
    if not all(np.isfinite(M.get(t, t)) for t in range(1, M.T + 1)):
        raise StateError("diagonal of the performance matrix is incomplete")
    return sum(M.get(t, t) - float(M.individual[t - 1]) for t in range(1, M.T + 1)) / M.T


def backward_transfer(M: PerformanceMatrix) -> float:
    T = M.T
    if T < 2:
        raise StateError("backward transfer needs at least two tasks")
    if not M.row_complete(T):
        raise StateError("last row of the performance matrix is incomplete")
    return sum(M.get(T, t) - M.get(t, t) for t in range(1, T)) / (T - 1)


# -- scorers -------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(reference: str | Sequence[str], hypothesis: str | Sequence[str]) -> float:
    """LCS F1 over whitespace tokens, scaled to [0, 100]."""
    ref = reference.split() if isinstance(reference, str) else list(reference)
    hyp = hypothesis.split() if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise InputError("rouge_l needs a non-empty reference")
    lcs = lcs_length(ref, hyp)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 100.0 * 2 * p * r / (p + r)


def accuracy(reference: str, hypothesis: str) -> float:
    return 100.0 if hypothesis.strip().casefold() == reference.strip().casefold() else 0.0


SCORERS = {"rouge_l": rouge_l, "accuracy": accuracy}


def score(kind: str, reference: str, hypothesis: str) -> float:
    try:
        return SCORERS[kind](reference, hypothesis)
    except KeyError:
        raise InputError(f"unknown scorer {kind!r}") from None


# -- report ----------------------------------------------------------------------

def _safe(fn, M):
    try:
        return float(fn(M))
    except StateError:
        return None


def report(M: PerformanceMatrix, order: str = "", method: str = "", ablation: str = "none") -> dict:
    """Metrics dictionary; metrics that are undefined for this matrix are None."""
    return {
        "AP": _safe(average_performance, M),
        "F.Ra": _safe(forgetting_rate, M),
        "FWT": _safe(forward_transfer, M),
        "BWT": _safe(backward_transfer, M),
        "matrix": M.to_json()["matrix"],
        "individual": M.to_json()["individual"],
        "order": order,
        "method": method,
        "ablation": ablation,
    }


def dumps_report(rep: dict) -> str:
    return json.dumps(rep, indent=2) + "\n"


def write_report(path: str | Path, rep: dict) -> None:
    Path(path).write_text(dumps_report(rep))
