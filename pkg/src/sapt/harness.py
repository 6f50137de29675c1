"""Sequential continual-learning driver: training, bookkeeping, evaluation, ablations."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .arm import (AnchorBook, PseudoStore, RefGenerator, capture_anchor, generate_pseudo,
                  pad_anchor, reflection_loss, total_loss, train_ref_generator)
from .backbone import (Backbone, BackboneConfig, PretrainConfig, Sampler, generate_batch, lm_loss,
                       load_checkpoint, pretrain, save_checkpoint)
from .config import RunConfig, cache_root, dumps_config
from .errors import ConfigError, SaptError, StateError
from .metrics import PerformanceMatrix, dumps_report, report, score
from .optim import AdamW
from .pet import (AggregatedPet, PetBlock, combine_blocks, copy_block, load_block, new_block, save_block,
                  single)
from .sals import (QueryProjection, SharedAttentionState, attention_for_tokens, attentive_forward,
                   attentive_select, write_attention_csv)
from .tasks import (Record, TaskData, Tokenizer, encode_example, encode_prefix, generate_task, load_jsonl,
                    make_spec, pad_batch, pretraining_records, replay_count)

log = logging.getLogger("sapt")


class RunError(SaptError, RuntimeError):
    """A component failed while processing a specific task."""

    def __init__(self, task: int, name: str, cause: Exception):
        super().__init__(f"task {task} ({name}): {type(cause).__name__}: {cause}")
        self.task = task
        self.cause = cause


@dataclass
class Batch:
    ids: np.ndarray
    target_mask: np.ndarray
    query_ids: np.ndarray
    query_valid: np.ndarray


def make_batch(tok: Tokenizer, records: Sequence[Record]) -> Batch:
    enc = [encode_example(tok, r) for r in records]
    ids, _, tmask = pad_batch([e[0] for e in enc], tok.pad_id, [e[1] for e in enc])
    qids, qvalid, _ = pad_batch([encode_prefix(tok, r.instruction, r.input) for r in records], tok.pad_id)
    return Batch(ids, tmask, qids, qvalid)


@dataclass
class AuditEntry:
    task: int
    before: dict
    after: dict


@dataclass
class RunState:
    config: RunConfig
    backbone: Backbone
    tok: Tokenizer
    tasks: list[TaskData]
    attention: SharedAttentionState
    blocks: list[PetBlock] = field(default_factory=list)
    anchors: AnchorBook = field(default_factory=AnchorBook)
    pseudo: PseudoStore = field(default_factory=PseudoStore)
    replay_memory: dict[int, list[Record]] = field(default_factory=dict)
    generators: dict[int, RefGenerator] = field(default_factory=dict)
    selector: SharedAttentionState | None = None
    matrix: PerformanceMatrix | None = None
    train_attention: list[tuple[str, np.ndarray]] = field(default_factory=list)
    test_attention: list[tuple[str, np.ndarray]] = field(default_factory=list)
    audit: list[AuditEntry] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)
    unseen: dict | None = None

    @property
    def t(self) -> int:
        return len(self.blocks)

    def names(self) -> list[str]:
        return [d.spec.name for d in self.tasks]

    def snapshot(self) -> dict:
        return {
            "backbone": self.backbone.digest(),
            "blocks": [b.digest(include_key=False) for b in self.blocks],
            "keys": [b.key_digest() for b in self.blocks],
            "projection": self.attention.projection.digest(),
        }

    def report(self) -> dict:
        c = self.config
        return report(self.matrix, ",".join(self.names()), c.method, c.ablation)


# -- setup -------------------------------------------------------------------

def backbone_config(cfg: RunConfig, tok: Tokenizer) -> BackboneConfig:
    b = cfg.backbone
    return BackboneConfig(tok.vocab_size, b.model_dim, b.layers, b.heads, b.ffn_dim, b.max_seq_len, b.seed)


def _backbone_cache_dir(cfg: RunConfig, tok: Tokenizer) -> Path:
    if cfg.backbone.checkpoint:
        return Path(cfg.backbone.checkpoint)
    key = json.dumps([backbone_config(cfg, tok).__dict__, cfg.backbone.pretrain_steps,
                      cfg.backbone.pretrain_lr, tok.vocab_size], sort_keys=True)
    return cache_root() / f"backbone-{hashlib.sha256(key.encode()).hexdigest()[:12]}"


def get_backbone(cfg: RunConfig, tok: Tokenizer) -> Backbone:
    """Load the pretrained backbone from its cache directory, pretraining it on a miss."""
    path = _backbone_cache_dir(cfg, tok)
    if (path / "manifest.json").is_file():
        return load_checkpoint(path)
    model = Backbone(backbone_config(cfg, tok))

    def sample_batch(rng, n):
        enc = [encode_example(tok, r) for r in pretraining_records(rng, n)]
        ids, _, tmask = pad_batch([e[0] for e in enc], tok.pad_id, [e[1] for e in enc])
        return ids, tmask

    pcfg = PretrainConfig(steps=cfg.backbone.pretrain_steps, lr=cfg.backbone.pretrain_lr,
                          seed=cfg.backbone.seed)
    log.info("pretraining backbone (%d steps) into %s", pcfg.steps, path)
    pretrain(model, sample_batch, pcfg,
             log=lambda s, l: log.info("pretrain step %d loss %.4f", s, l) if s % 500 == 0 else None)
    save_checkpoint(model, path)
    return load_checkpoint(path)


def load_datasets(cfg: RunConfig, names: Sequence[str] | None = None) -> list[TaskData]:
    names = list(cfg.data.order if names is None else names)
    out = []
    for name in names:
        if cfg.data.dir:
            out.append(_load_task_dir(Path(cfg.data.dir), name, cfg))
        else:
            spec = make_spec(name, cfg.data.seed, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test)
            out.append(generate_task(spec))
    return out


def _load_task_dir(root: Path, name: str, cfg: RunConfig) -> TaskData:
    d = root / name
    if not d.is_dir():
        raise ConfigError(f"no dataset directory for task {name!r} under {root}", "data.dir")
    meta_path = d / "task.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    try:
        spec = make_spec(name, cfg.data.seed)
        scorer, category = spec.scorer, spec.category
    except ConfigError:
        scorer, category = meta.get("scorer", "rouge_l"), meta.get("category", "")
    scorer = meta.get("scorer", scorer)
    from .tasks import TaskSpec
    train, val, test = (load_jsonl(d / f"{s}.jsonl") for s in ("train", "val", "test"))
    spec = TaskSpec(name=name, kind="classification" if scorer == "accuracy" else "generation",
                    instruction=train[0].instruction if train else "", scorer=scorer, seed=cfg.data.seed,
                    n_train=len(train), n_val=len(val), n_test=len(test), category=category)
    return TaskData(spec, train, val, test)


def init_state(cfg: RunConfig, backbone: Backbone | None = None,
               datasets: Sequence[TaskData] | None = None) -> RunState:
    tok = Tokenizer()
    backbone = backbone or get_backbone(cfg, tok)
    tasks = list(datasets) if datasets is not None else load_datasets(cfg)
    proj = QueryProjection(backbone.config.model_dim, cfg.proj_hidden, seed=cfg.seed)
    state = RunState(cfg, backbone, tok, tasks, SharedAttentionState(proj, cfg.temperature))
    state.matrix = PerformanceMatrix(len(tasks))
    return state


# -- per-task learning ---------------------------------------------------------

def _rng(cfg: RunConfig, t: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, t, stream])


def _allocate(state: RunState, t: int) -> PetBlock:
    cfg = state.config
    if cfg.method in ("seq_pet", "replay") and state.blocks:
        # sequential baselines keep training one PET; the frozen predecessor stays on record
        return copy_block(state.blocks[-1], t)
    return new_block(cfg.pet.kind, cfg.pet, t, cfg.seed, state.backbone,
                     used_indices=[b.task_index for b in state.blocks])


def _sample_records(rng, pool: Sequence, k: int) -> list:
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return [pool[i] for i in idx]


def _mixed_memory(state: RunState, t: int) -> list[Record]:
    """Stored (input, output) pairs from earlier tasks mixed into the task loss."""
    cfg = state.config
    if cfg.method == "replay":
        return [r for i in range(1, t) for r in state.replay_memory.get(i, [])]
    if cfg.method == "sapt" and cfg.ablation == "plus_replay":
        return [s.as_record() for s in state.pseudo.pool(range(1, t)) if s.output is not None]
    return []


def learn_task(state: RunState, t: int) -> None:
    """Allocate B_t and k_t, train with L_task + lambda * L_KL, then freeze."""
    cfg = state.config
    data = state.tasks[t - 1]
    before = state.snapshot()
    block = _allocate(state, t)
    state.blocks.append(block)
    state.attention.keys.append(block.key)

    groups = [{"params": block.pet_values(), "lr": cfg.optim.lr}]
    if cfg.routed:
        groups.append({"params": [block.key] + state.attention.projection.values(), "lr": cfg.optim.route_lr})
    opt = AdamW(groups, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay, clip_norm=cfg.optim.clip)

    data_rng, pseudo_rng, mem_rng = _rng(cfg, t, 11), _rng(cfg, t, 12), _rng(cfg, t, 14)
    memory = _mixed_memory(state, t)
    pseudo_pool = state.pseudo.pool(range(1, t)) if cfg.arm_active else []
    losses = []
    for _ in range(cfg.optim.steps):
        recs = _sample_records(data_rng, data.train, cfg.optim.batch_size)
        if memory:
            recs += _sample_records(mem_rng, memory, cfg.arm.batch)
        batch = make_batch(state.tok, recs)
        opt.zero_grad()
        if cfg.routed:
            loss, _ = attentive_forward(state.attention, state.blocks, state.backbone, batch, t, cfg.pet.combine)
        else:
            loss = lm_loss(state.backbone, batch.ids, batch.target_mask, single(block))
        if pseudo_pool:
            samples = _sample_records(pseudo_rng, pseudo_pool, cfg.arm.batch)
            kl = reflection_loss(state.attention, state.backbone, state.tok, state.anchors, samples, t,
                                 cfg.arm.eps)
            loss = total_loss(loss, kl, cfg.lam)
        losses.append(float(loss.data))
        ag.backward(loss)
        opt.step()
    for v in block.values() + state.attention.projection.values():
        v.grad = None
    block.freeze()
    state.losses.append(losses)
    state.train_attention.append((data.spec.name, _mean_attention(state, data.train, t, learning=True)))
    state.audit.append(AuditEntry(t, before, state.snapshot()))


def _mean_attention(state: RunState, records: Sequence[Record], t: int, learning: bool = False) -> np.ndarray:
    total = np.zeros(t)
    bs = state.config.eval.batch
    for lo in range(0, len(records), bs):
        chunk = records[lo:lo + bs]
        ids, valid, _ = pad_batch([encode_prefix(state.tok, r.instruction, r.input) for r in chunk],
                                  state.tok.pad_id)
        total += selection_weights(state, ids, valid, t, learning=learning).sum(axis=0)
    return total / len(records)


def after_task(state: RunState, t: int) -> None:
    """Anchor capture, generator training, pseudo generation, memory update, selector refit."""
    cfg = state.config
    data = state.tasks[t - 1]
    if cfg.routed:
        capture_anchor(state.attention, state.backbone, state.tok, data.val, t, state.anchors, step=t,
                       batch_size=cfg.eval.batch)
    count = replay_count(len(data.train), cfg.replay_ratio)
    if cfg.needs_generator:
        with_output = cfg.ablation == "plus_replay"
        gen = train_ref_generator(state.backbone, state.tok, data.train, cfg.pet.kind, cfg.ref,
                                  seed=cfg.seed, task_index=t, with_output=with_output)
        state.generators[t] = gen
        state.pseudo.add(t, generate_pseudo(gen, state.backbone, state.tok, count, cfg.ref, seed=cfg.seed))
    if cfg.method == "replay":
        state.replay_memory[t] = _sample_records(_rng(cfg, t, 15), data.train, count)
    if cfg.method == "sapt" and cfg.ablation in ("no_align", "no_sa"):
        state.selector = train_selector(state, t)


# -- selectors for the pipeline ablations ---------------------------------------

def _selector_targets(state: RunState, t: int) -> dict[int, np.ndarray]:
    eps = state.config.arm.eps
    if state.config.ablation == "no_align":
        return {i: pad_anchor(state.anchors[i], t, eps) for i in range(1, t + 1)}
    return {i: pad_anchor(np.eye(i)[i - 1], t, eps) for i in range(1, t + 1)}


def train_selector(state: RunState, t: int) -> SharedAttentionState:
    """A fresh query network and key set fitted to attention targets on pseudo inputs."""
    cfg = state.config
    d = state.backbone.config.model_dim
    rng = _rng(cfg, t, 13)
    sel = SharedAttentionState(QueryProjection(d, cfg.proj_hidden, seed=cfg.seed + 1000 * t),
                               cfg.temperature,
                               [ag.param(rng.normal(0, 1 / math.sqrt(d), d), "key") for _ in range(t)])
    samples = state.pseudo.pool(range(1, t + 1))
    targets = _selector_targets(state, t)
    params = sel.projection.values() + sel.keys
    opt = AdamW(params, lr=cfg.selector.lr, clip_norm=cfg.optim.clip)
    for _ in range(cfg.selector.steps):
        chunk = _sample_records(rng, samples, cfg.selector.batch)
        ids, valid, _ = pad_batch([s.query_tokens(state.tok) for s in chunk], state.tok.pad_id)
        a = attention_for_tokens(sel, state.backbone, ids, valid, t)
        p = ag.Value(np.stack([targets[s.task] for s in chunk]))
        loss = ag.kl_divergence(p, a).mean()
        opt.zero_grad()
        ag.backward(loss)
        opt.step()
    for v in params:
        v.grad = None
        v.freeze()
    return sel


# -- selection and evaluation -------------------------------------------------------

def selection_weights(state: RunState, ids, valid, t: int, learning: bool = False) -> np.ndarray:
    """Per-input block weights (batch, t) under the method's selection rule.

    ``learning`` asks for the weights seen by the task loss rather than by inference;
    the two only differ for the pipeline ablations.
    """
    cfg = state.config
    n = len(ids)
    if cfg.method != "sapt":
        w = np.zeros((n, t))
        w[:, t - 1] = 1.0
        return w
    if cfg.ablation == "no_sa" and learning:
        w = np.zeros((n, t))
        w[:, t - 1] = 1.0
        return w
    if cfg.ablation in ("no_align", "no_sa") and not learning:
        with ag.no_grad():
            a = attention_for_tokens(state.selector, state.backbone, ids, valid, t).data
        if cfg.ablation == "no_sa":
            return np.eye(t)[np.argmax(a, axis=1)]
        return a
    _, a = attentive_select(state.attention, state.blocks, state.backbone, ids, valid, t, cfg.pet.combine)
    return a.data


def _select_pet(state: RunState, ids, valid, t: int) -> tuple[AggregatedPet, np.ndarray]:
    cfg = state.config
    if cfg.method != "sapt":
        return single(state.blocks[t - 1]), selection_weights(state, ids, valid, t)
    if cfg.ablation in ("no_align", "no_sa"):
        w = selection_weights(state, ids, valid, t)
        with ag.no_grad():
            return combine_blocks(state.blocks[:t], ag.Value(w), cfg.pet.combine), w
    pet, a = attentive_select(state.attention, state.blocks, state.backbone, ids, valid, t, cfg.pet.combine)
    return pet, a.data


def evaluate_records(state: RunState, records: Sequence[Record], scorer: str, t: int
                     ) -> tuple[float, np.ndarray]:
    """Mean score and mean selection weights of greedy predictions over ``t`` blocks."""
    if not records:
        raise ConfigError("test split is empty", "data.n_test")
    cfg = state.config
    tok = state.tok
    scores = []
    weights = np.zeros(t)
    for lo in range(0, len(records), cfg.eval.batch):
        chunk = records[lo:lo + cfg.eval.batch]
        prefixes = [encode_prefix(tok, r.instruction, r.input) for r in chunk]
        ids, valid, _ = pad_batch(prefixes, tok.pad_id)
        pet, w = _select_pet(state, ids, valid, t)
        weights += w.sum(axis=0)
        outs = generate_batch(state.backbone, prefixes, pet, cfg.eval.max_new, Sampler.greedy(), seed=0,
                              eos_id=tok.eos_id, pad_id=tok.pad_id)
        scores += [score(scorer, r.output, tok.detokenize(o)) for r, o in zip(chunk, outs)]
    return float(np.mean(scores)), weights / len(records)


def evaluate_matrix_row(state: RunState, t: int) -> list[float]:
    row = []
    for j in range(1, t + 1):
        data = state.tasks[j - 1]
        s, w = evaluate_records(state, data.test, data.spec.scorer, t)
        state.matrix.set(t, j, s)
        row.append(s)
        if t == len(state.tasks):
            state.test_attention.append((data.spec.name, w))
    return row


# -- drivers ------------------------------------------------------------------------

def run_sequential(cfg: RunConfig, backbone: Backbone | None = None,
                   datasets: Sequence[TaskData] | None = None,
                   progress: Callable[[str], None] | None = None) -> RunState:
    state = init_state(cfg, backbone, datasets)
    for t in range(1, len(state.tasks) + 1):
        name = state.tasks[t - 1].spec.name
        try:
            learn_task(state, t)
            after_task(state, t)
            row = evaluate_matrix_row(state, t)
        except SaptError as exc:
            raise RunError(t, name, exc) from exc
        msg = f"task {t} ({name}) done; row {[round(x, 2) for x in row]}"
        log.info(msg)
        if progress:
            progress(msg)
    check_state(state)
    return state


def check_state(state: RunState) -> None:
    """Block, anchor and pseudo-set counts all equal the number of learned tasks."""
    cfg, t = state.config, state.t
    if len(state.attention.keys) != t:
        raise StateError("key count differs from block count")
    if cfg.routed and len(state.anchors) != t:
        raise StateError("anchor count differs from block count")
    if cfg.needs_generator and len(state.pseudo) != t:
        raise StateError("pseudo-set count differs from block count")
    if not all(state.matrix.row_complete(i) for i in range(1, t + 1)):
        raise StateError("performance matrix rows are incomplete")


def run_individual(cfg: RunConfig, backbone: Backbone | None = None,
                   datasets: Sequence[TaskData] | None = None) -> list[float]:
    """Score of each task trained alone from a fresh block (the a0 row)."""
    base = init_state(cfg, backbone, datasets)
    scores = []
    for t, data in enumerate(base.tasks, start=1):
        block = new_block(cfg.pet.kind, cfg.pet, t, cfg.seed, base.backbone)
        opt = AdamW(block.pet_values(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay,
                    clip_norm=cfg.optim.clip)
        rng = _rng(cfg, t, 11)
        for _ in range(cfg.optim.steps):
            batch = make_batch(base.tok, _sample_records(rng, data.train, cfg.optim.batch_size))
            opt.zero_grad()
            ag.backward(lm_loss(base.backbone, batch.ids, batch.target_mask, single(block)))
            opt.step()
        block.freeze()
        solo = RunState(_solo_config(cfg), base.backbone, base.tok, [data], base.attention, blocks=[block])
        solo.matrix = PerformanceMatrix(1)
        s, _ = evaluate_records(solo, data.test, data.spec.scorer, 1)
        scores.append(s)
    return scores


def _solo_config(cfg: RunConfig) -> RunConfig:
    import copy
    solo = copy.deepcopy(cfg)
    solo.method, solo.ablation = "seq_pet", "none"
    return solo


def attach_individual(state: RunState, a0: Sequence[float]) -> None:
    for t, v in enumerate(a0, start=1):
        state.matrix.set_individual(t, v)


def run_ablation(cfg: RunConfig, ablation: str, **kwargs) -> RunState:
    import copy
    if cfg.method != "sapt":
        raise ConfigError("ablations are only defined for method=sapt", "ablation")
    c = copy.deepcopy(cfg)
    c.ablation = ablation
    from .config import validate
    validate(c)
    return run_sequential(c, **kwargs)


def evaluate_unseen(state: RunState, datasets: Sequence[TaskData],
                    categories: dict[str, str] | None = None) -> dict:
    """Score never-trained tasks by selecting over the existing blocks only."""
    t = state.t
    if t < 1:
        raise StateError("no blocks have been learned")
    out = {"tasks": {}, "weights": {}}
    for data in datasets:
        s, w = evaluate_records(state, data.test, data.spec.scorer, t)
        out["tasks"][data.spec.name] = s
        out["weights"][data.spec.name] = [float(x) for x in w]
    out["average"] = float(np.mean(list(out["tasks"].values()))) if datasets else None
    categories = categories if categories is not None else state.config.eval.categories
    if categories:
        groups: dict[str, list[float]] = {}
        for name, s in out["tasks"].items():
            groups.setdefault(categories.get(name, "other"), []).append(s)
        out["categories"] = {k: float(np.mean(v)) for k, v in sorted(groups.items())}
    state.unseen = out
    return out


# -- run directory ---------------------------------------------------------------------

def attention_rows(rows: Sequence[tuple[str, np.ndarray]]) -> list[tuple[str, list[float]]]:
    return [(name, [float(x) for x in w]) for name, w in rows]


def _save_projection(directory: Path, proj: QueryProjection, name: str = "projection") -> None:
    st = proj.state()
    meta = {"d": proj.d, "hidden": proj.hidden, "eps": proj.eps, "dtype": "<f8",
            "params": [{"name": k, "shape": list(v.shape)} for k, v in st.items()]}
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2) + "\n")
    (directory / f"{name}.bin").write_bytes(b"".join(np.ascontiguousarray(v, "<f8").tobytes()
                                                     for v in st.values()))


def _load_projection(directory: Path, name: str = "projection") -> QueryProjection:
    meta = json.loads((directory / f"{name}.json").read_text())
    body = (directory / f"{name}.bin").read_bytes()
    proj = QueryProjection(meta["d"], meta["hidden"], eps=meta["eps"])
    offset, st = 0, {}
    for e in meta["params"]:
        n = int(np.prod(e["shape"]))
        st[e["name"]] = np.frombuffer(body, "<f8", n, offset).reshape(e["shape"])
        offset += 8 * n
    proj.load_state(st)
    return proj


def save_run(state: RunState, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    (out / "config.toml").write_text(dumps_config(cfg))
    blocks = out / "blocks"
    blocks.mkdir(exist_ok=True)
    for b in state.blocks:
        save_block(blocks, b)
    _save_projection(blocks, state.attention.projection)
    if state.selector is not None:
        _save_projection(blocks, state.selector.projection, "selector")
        (blocks / "selector_keys.json").write_text(
            json.dumps([[float(x) for x in k.data] for k in state.selector.keys]) + "\n")
    state.anchors.save(out / "anchors.json")
    (out / "audit.json").write_text(json.dumps([{"task": a.task, "before": a.before, "after": a.after}
                                                for a in state.audit], indent=2) + "\n")
    state.pseudo.save(out / "pseudo")
    (out / "matrix.json").write_text(json.dumps(state.matrix.to_json(), indent=2) + "\n")
    (out / "metrics.json").write_text(dumps_report(state.report()))
    if state.unseen is not None:
        # kept apart so metrics.json is a pure function of matrix.json
        (out / "unseen.json").write_text(json.dumps(state.unseen, indent=2) + "\n")
    T = len(state.tasks)
    write_attention_csv(out / "attention_train.csv", attention_rows(state.train_attention), T)
    write_attention_csv(out / "attention_test.csv", attention_rows(state.test_attention), T)
    return out


def load_run(directory: str | Path, backbone: Backbone | None = None) -> RunState:
    """Rebuild a finished run's selection state from its directory."""
    from .config import load_config_file, build_config
    d = Path(directory)
    if not (d / "config.toml").is_file():
        raise ConfigError(f"{d} is not a run directory (config.toml missing)", "run")
    cfg = build_config(load_config_file(d / "config.toml"))
    state = init_state(cfg, backbone)
    T = len(state.tasks)
    for i in range(1, T + 1):
        if (d / "blocks" / f"block_{i}.json").is_file():
            b = load_block(d / "blocks", i)
            state.blocks.append(b)
            state.attention.keys.append(b.key)
    state.attention.projection = _load_projection(d / "blocks")
    if (d / "blocks" / "selector.json").is_file():
        keys = json.loads((d / "blocks" / "selector_keys.json").read_text())
        state.selector = SharedAttentionState(_load_projection(d / "blocks", "selector"), cfg.temperature,
                                              [ag.param(np.array(k), "key") for k in keys])
    if (d / "anchors.json").is_file():
        state.anchors = AnchorBook.load(d / "anchors.json")
    if (d / "pseudo").is_dir():
        state.pseudo = PseudoStore.load(d / "pseudo")
    if (d / "matrix.json").is_file():
        state.matrix = PerformanceMatrix.from_json(json.loads((d / "matrix.json").read_text()))
    return state


def final_test_attention(state: RunState) -> list[tuple[str, np.ndarray]]:
    """Final-state selection weights averaged over each task's test inputs."""
    t = state.t
    return [(data.spec.name, _mean_attention(state, data.test, t)) for data in state.tasks[:t]]
