"""Synthetic instruction tasks, the character tokenizer and JSONL record IO."""

from __future__ import annotations

import json
import math
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError, ParseError

GEN, SEP, EOS, PAD = "[GEN]", "[SEP]", "<eos>", "<pad>"
RESERVED = (PAD, EOS, GEN, SEP)
CHARS = string.ascii_lowercase + string.ascii_uppercase + string.digits + " .,:;!?'-_"


class Tokenizer:
    """Character vocabulary plus four reserved tokens, each a single id."""

    def __init__(self, chars: str = CHARS):
        self.itos: list[str] = list(RESERVED) + list(chars)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.eos_id = self.stoi[EOS]
        self.gen_id = self.stoi[GEN]
        self.sep_id = self.stoi[SEP]
        self.char_ids = np.arange(len(RESERVED), len(self.itos))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for tok in RESERVED:
                if text.startswith(tok, i):
                    ids.append(self.stoi[tok])
                    i += len(tok)
                    break
            else:
                ch = text[i]
                if ch not in self.stoi:
                    raise InputError(f"character {ch!r} is outside the vocabulary")
                ids.append(self.stoi[ch])
                i += 1
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        return "".join(self.itos[int(i)] for i in ids)


@dataclass(frozen=True)
class Record:
    instruction: str
    input: str
    output: str


@dataclass
class TaskSpec:
    name: str
    kind: str
    instruction: str
    scorer: str
    seed: int = 0
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    labels: tuple[str, ...] = ()
    category: str = ""


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[Record]
    val: list[Record]
    test: list[Record]


# -- built-in task family --------------------------------------------------

_LOWER = string.ascii_lowercase
_VOWELS = set("aeiou")
_CONSONANTS = "".join(c for c in _LOWER if c not in _VOWELS)


def _word(rng, lo: int, hi: int, alphabet: str = _LOWER) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), n))


def _words(rng, lo: int = 1, hi: int = 3) -> str:
    return " ".join(_word(rng, 2, 4) for _ in range(int(rng.integers(lo, hi + 1))))


def _balanced(gen: Callable, rule: Callable, labels: Sequence[str]):
    def sample(rng):
        want = labels[int(rng.integers(0, len(labels)))]
        while True:
            x = gen(rng)
            if rule(x) == want:
                return x
    return sample


def _parity_rule(x: str) -> str:
    return "even" if x.count("a") % 2 == 0 else "odd"


def _vowel_rule(x: str) -> str:
    return "yes" if sum(c in _VOWELS for c in x) * 2 > len(x) else "no"


def _vowel_word(rng) -> str:
    n = int(rng.integers(3, 7))
    p_vowel = 0.25 if rng.random() < 0.5 else 0.75
    return "".join(_pick(rng, "aeiou") if rng.random() < p_vowel else _pick(rng, _CONSONANTS)
                   for _ in range(n))


def _pick(rng, alphabet: str) -> str:
    return alphabet[int(rng.integers(0, len(alphabet)))]


def _length_rule(x: str) -> str:
    return "even" if len(x) % 2 == 0 else "odd"


def _modsum_input(rng) -> str:
    return " ".join(str(d) for d in rng.integers(0, 10, int(rng.integers(2, 5))))


def _modsum_rule(x: str) -> str:
    return str(sum(int(d) for d in x.split()) % 10)


# name -> (kind, instruction, input generator, rule, labels)
BUILTIN: dict[str, tuple[str, str, Callable, Callable[[str], str], tuple[str, ...]]] = {
    "copy": ("generation", "COPY", _words, lambda x: x, ()),
    "reverse": ("generation", "REVERSE", _words, lambda x: x[::-1], ()),
    "sort-letters": ("generation", "SORT", lambda r: _word(r, 3, 6), lambda x: "".join(sorted(x)), ()),
    "uppercase": ("generation", "UPPER", _words, str.upper, ()),
    "last-word": ("generation", "LAST", lambda r: _words(r, 2, 3), lambda x: x.split()[-1], ()),
    "modular-sum": ("generation", "SUM MOD", _modsum_input, _modsum_rule, ()),
    "parity": ("classification", "PARITY", None, _parity_rule, ("even", "odd")),
    "vowel-majority": ("classification", "VOWELS", None, _vowel_rule, ("yes", "no")),
    "length-parity": ("classification", "LENGTH", None, _length_rule, ("even", "odd")),
}

_CLASS_INPUTS = {
    "parity": lambda r: _word(r, 4, 12, "ab"),
    "vowel-majority": _vowel_word,
    "length-parity": lambda r: _word(r, 2, 9),
}


def task_names() -> list[str]:
    return list(BUILTIN)


def make_spec(name: str, seed: int = 0, n_train: int = 1000, n_val: int = 100,
              n_test: int = 100) -> TaskSpec:
    if name not in BUILTIN:
        raise ConfigError(f"unknown task {name!r}; known: {', '.join(BUILTIN)}", "task")
    kind, instruction, _, _, labels = BUILTIN[name]
    scorer = "accuracy" if kind == "classification" else "rouge_l"
    return TaskSpec(name=name, kind=kind, instruction=instruction, scorer=scorer, seed=seed,
                    n_train=n_train, n_val=n_val, n_test=n_test, labels=labels, category=kind)


def task_rule(name: str) -> Callable[[str], str]:
    if name not in BUILTIN:
        raise ConfigError(f"unknown task {name!r}", "task")
    return BUILTIN[name][3]


def generate_task(spec: TaskSpec) -> TaskData:
    """Deterministic train/validation/test splits with disjoint inputs."""
    if spec.name not in BUILTIN:
        raise ConfigError(f"unknown task {spec.name!r}", "task")
    kind, _, gen, rule, labels = BUILTIN[spec.name]
    if kind == "classification":
        gen = _balanced(_CLASS_INPUTS[spec.name], rule, labels)
    total = spec.n_train + spec.n_val + spec.n_test
    rng = np.random.default_rng([spec.seed, _stable_id(spec.name)])
    seen: set[str] = set()
    inputs: list[str] = []
    attempts = 0
    while len(inputs) < total:
        x = gen(rng)
        attempts += 1
        if x not in seen:
            seen.add(x)
            inputs.append(x)
        if attempts > 200 * total:
            raise ConfigError(f"task {spec.name} cannot produce {total} distinct inputs", "data")
    records = [Record(spec.instruction, x, rule(x)) for x in inputs]
    a, b = spec.n_train, spec.n_train + spec.n_val
    return TaskData(spec, records[:a], records[a:b], records[b:])


def _stable_id(name: str) -> int:
    import zlib
    return zlib.crc32(name.encode("utf-8"))


# -- model-facing encodings ---------------------------------------------------

def encode_prefix(tok: Tokenizer, instruction: str, inp: str) -> list[int]:
    """Conditioning context: instruction [SEP] input [SEP]."""
    return tok.tokenize(instruction) + [tok.sep_id] + tok.tokenize(inp) + [tok.sep_id]


def encode_example(tok: Tokenizer, rec: Record) -> tuple[list[int], list[bool]]:
    """Token ids and the output-span mask (output tokens plus end-of-sequence)."""
    prefix = encode_prefix(tok, rec.instruction, rec.input)
    out = tok.tokenize(rec.output) + [tok.eos_id]
    return prefix + out, [False] * len(prefix) + [True] * len(out)


def encode_generator_example(tok: Tokenizer, rec: Record, with_output: bool = False
                             ) -> tuple[list[int], list[bool]]:
    """`[GEN] instruction [SEP] input <eos>`; the loss covers everything after [GEN]."""
    ids = [tok.gen_id] + tok.tokenize(rec.instruction) + [tok.sep_id] + tok.tokenize(rec.input)
    if with_output:
        ids += [tok.sep_id] + tok.tokenize(rec.output)
    ids.append(tok.eos_id)
    return ids, [False] + [True] * (len(ids) - 1)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int, masks: Sequence[Sequence[bool]] | None = None):
    """Right-pad to a rectangle; returns (ids, valid, target_mask)."""
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), L), dtype=bool)
    tmask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
        if masks is not None:
            tmask[i, :len(s)] = masks[i]
    return ids, valid, tmask


# -- files --------------------------------------------------------------------

def save_jsonl(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[Record]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            for key in ("instruction", "input", "output"):
                if key not in obj:
                    raise ParseError(f"missing {key!r}", lineno)
                if not isinstance(obj[key], str):
                    raise ParseError(f"{key!r} must be a string", lineno)
            out.append(Record(obj["instruction"], obj["input"], obj["output"]))
    return out


def load_order(path: str | Path) -> list[str]:
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def save_order(path: str | Path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def materialize(out_dir: str | Path, names: Sequence[str], seed: int = 0, n_train: int = 1000,
                n_val: int = 100, n_test: int = 100) -> list[TaskData]:
    """Write `<task>/{train,val,test}.jsonl` plus `order.txt` under ``out_dir``."""
    out = Path(out_dir)
    datasets = []
    for name in names:
        data = generate_task(make_spec(name, seed, n_train, n_val, n_test))
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for split in ("train", "val", "test"):
            save_jsonl(d / f"{split}.jsonl", getattr(data, split))
        datasets.append(data)
    save_order(out / "order.txt", names)
    return datasets


def replay_count(n: int, ratio: float) -> int:
    # guard against 0.02 * 1000 = 20.000000000000004 rounding up to 21
    return max(1, math.ceil(round(ratio * n, 9)))


# -- backbone pretraining corpus ---------------------------------------------------

# pretraining teaches the skills under different instruction words, so the
# backbone cannot solve a stream task zero-shot from its instruction alone
PRETRAIN_ALIASES = {
    "copy": "echo", "reverse": "flip", "sort-letters": "order", "uppercase": "caps",
    "last-word": "tail", "modular-sum": "add", "parity": "count a",
    "vowel-majority": "vowel?", "length-parity": "len",
}


def sample_input(name: str, rng) -> str:
    kind, _, gen, rule, labels = BUILTIN[name]
    if kind == "classification":
        return _balanced(_CLASS_INPUTS[name], rule, labels)(rng)
    return gen(rng)


def pretraining_records(rng, n: int, families: Sequence[str] | None = None) -> list[Record]:
    families = list(families or PRETRAIN_ALIASES)
    out = []
    for _ in range(n):
        name = families[int(rng.integers(0, len(families)))]
        x = sample_input(name, rng)
        out.append(Record(PRETRAIN_ALIASES[name], x, task_rule(name)(x)))
    return out
