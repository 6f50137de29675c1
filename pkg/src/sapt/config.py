"""Run configuration: flat dotted-key text files, defaults, validation and echo."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .arm import GeneratorConfig
from .errors import ConfigError
from .pet import PetConfig

METHODS = ("sapt", "seq_pet", "replay")
ABLATIONS = ("none", "no_arm", "plus_replay", "no_align", "no_sa")

DEFAULT_ORDER = ("copy", "uppercase", "last-word", "vowel-majority", "reverse")


@dataclass
class OptimConfig:
    lr: float | None = None
    route_lr: float | None = None
    weight_decay: float = 0.0
    steps: int = 150
    batch_size: int = 32
    clip: float = 1.0


@dataclass
class ArmConfig:
    eps: float = 1e-8
    batch: int = 8


@dataclass
class SelectorConfig:
    steps: int = 200
    lr: float = 1e-2
    batch: int = 32


@dataclass
class DataConfig:
    order: list[str] = field(default_factory=lambda: list(DEFAULT_ORDER))
    order_file: str = ""
    dir: str = ""
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    seed: int = 0


@dataclass
class BackboneSection:
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 352
    seed: int = 0
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    checkpoint: str = ""


@dataclass
class EvalConfig:
    max_new: int = 24
    batch: int = 128
    unseen: list[str] = field(default_factory=list)
    categories: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    method: str = "sapt"
    ablation: str = "none"
    seed: int = 0
    lam: float | None = None
    temperature: float | None = None
    fwt: bool = False
    pet: PetConfig = field(default_factory=PetConfig)
    proj_hidden: int = 100
    replay_ratio: float = 0.02
    optim: OptimConfig = field(default_factory=OptimConfig)
    ref: GeneratorConfig = field(default_factory=GeneratorConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived settings ------------------------------------------------
    @property
    def arm_active(self) -> bool:
        return self.method == "sapt" and self.ablation in ("none", "no_align") and self.lam > 0

    @property
    def routed(self) -> bool:
        """Blocks are combined through shared attention while learning."""
        return self.method == "sapt" and self.ablation != "no_sa"

    @property
    def needs_generator(self) -> bool:
        return self.arm_active or (self.method == "sapt" and self.ablation in ("plus_replay", "no_align", "no_sa"))


# dotted key -> (attribute path, type)
_TOP_LEVEL = {
    "method": ("method", str), "ablation": ("ablation", str), "seed": ("seed", int),
    "lambda": ("lam", float), "temperature": ("temperature", float), "fwt": ("fwt", bool),
    "proj.hidden": ("proj_hidden", int), "replay.ratio": ("replay_ratio", float),
}
_SECTIONS = {"pet": "pet", "optim": "optim", "ref": "ref", "arm": "arm", "selector": "selector",
             "data": "data", "backbone": "backbone", "eval": "eval"}


def known_keys() -> dict[str, tuple[str, Any]]:
    keys = dict(_TOP_LEVEL)
    proto = RunConfig()
    for prefix, attr in _SECTIONS.items():
        for f in dataclasses.fields(getattr(proto, attr)):
            keys[f"{prefix}.{f.name}"] = (f"{attr}.{f.name}", f.type)
    return keys


def _flatten(obj: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "eval.categories":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, typ) -> Any:
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    t = t.replace(" | None", "").strip()
    try:
        if t == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError
        if t == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if t == "float":
            if isinstance(value, bool):
                raise ValueError
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
            return v
        if t == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if t.startswith("list"):
            if isinstance(value, str):
                value = [s.strip() for s in value.split(",") if s.strip()]
            if not isinstance(value, list):
                raise ValueError
            return list(value)
        if t == "dict":
            if not isinstance(value, dict):
                raise ValueError
            return dict(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected {t}, got {value!r}", key) from None
    return value


def parse_value(text: str) -> Any:
    """Interpret a command-line override value as a TOML literal, else a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_overrides(items) -> dict[str, Any]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "overrides")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def load_config_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {str(p)!r} not found", "config")
    try:
        return _flatten(tomllib.loads(p.read_text(encoding="utf-8")))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}", "config") from None


def build_config(flat: dict[str, Any] | None = None) -> RunConfig:
    """Apply dotted-key settings on top of the defaults, then validate."""
    cfg = RunConfig()
    keys = known_keys()
    for k, v in (flat or {}).items():
        if k not in keys:
            raise ConfigError("unknown config key", k)
        path, typ = keys[k]
        v = _coerce(k, v, typ)
        target = cfg
        parts = path.split(".")
        for part in parts[:-1]:
            target = getattr(target, part)
        setattr(target, parts[-1], v)
    _fill_defaults(cfg)
    validate(cfg)
    return cfg


def _fill_defaults(cfg: RunConfig) -> None:
    prompt = cfg.pet.kind == "prompt"
    if cfg.lam is None:
        cfg.lam = 1.0 if prompt else 0.5
    if cfg.temperature is None:
        d = cfg.backbone.model_dim
        cfg.temperature = d * math.e if prompt else math.sqrt(d)
    if cfg.optim.lr is None:
        cfg.optim.lr = 3e-3 if prompt else 1e-3
    if cfg.optim.route_lr is None:
        cfg.optim.route_lr = cfg.optim.lr
    if cfg.data.order_file:
        from .tasks import load_order
        cfg.data.order = load_order(cfg.data.order_file)
        cfg.data.order_file = ""


def validate(cfg: RunConfig) -> None:
    from .tasks import BUILTIN
    if cfg.method not in METHODS:
        raise ConfigError(f"must be one of {METHODS}", "method")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"must be one of {ABLATIONS}", "ablation")
    if cfg.ablation != "none" and cfg.method != "sapt":
        raise ConfigError("ablations are only defined for method=sapt", "ablation")
    if cfg.lam < 0:
        raise ConfigError("must be non-negative", "lambda")
    if not 0 < cfg.replay_ratio <= 1:
        raise ConfigError("must be in (0, 1]", "replay.ratio")
    if cfg.temperature <= 0:
        raise ConfigError("must be positive", "temperature")
    if cfg.proj_hidden < 1:
        raise ConfigError("must be positive", "proj.hidden")
    try:
        cfg.pet.validate()
    except ConfigError:
        raise
    for name, val in (("optim.lr", cfg.optim.lr), ("optim.route_lr", cfg.optim.route_lr),
                      ("ref.lr", cfg.ref.lr), ("selector.lr", cfg.selector.lr)):
        if val <= 0:
            raise ConfigError("must be positive", name)
    for name, val in (("optim.steps", cfg.optim.steps), ("optim.batch_size", cfg.optim.batch_size),
                      ("ref.batch_size", cfg.ref.batch_size), ("arm.batch", cfg.arm.batch),
                      ("eval.max_new", cfg.eval.max_new), ("data.n_train", cfg.data.n_train),
                      ("data.n_val", cfg.data.n_val), ("data.n_test", cfg.data.n_test)):
        if val < 1:
            raise ConfigError("must be positive", name)
    if not 0 < cfg.arm.eps < 1:
        raise ConfigError("must be in (0, 1)", "arm.eps")
    if not cfg.data.order:
        raise ConfigError("task order is empty", "data.order")
    if not cfg.data.dir:
        for name in list(cfg.data.order) + list(cfg.eval.unseen):
            if name not in BUILTIN:
                raise ConfigError(f"unknown task {name!r}", "data.order")
    b = cfg.backbone
    if b.model_dim % b.heads:
        raise ConfigError("model_dim must be divisible by heads", "backbone.heads")


def to_flat(cfg: RunConfig) -> dict[str, Any]:
    out = {}
    for key, (path, _) in known_keys().items():
        target = cfg
        for part in path.split("."):
            target = getattr(target, part)
        out[key] = target
    return out


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(k)} = {_toml_value(x)}" for k, x in v.items()) + "}"
    raise ConfigError(f"cannot serialise {v!r}", "config")


def dumps_config(cfg: RunConfig) -> str:
    """Every resolved setting as ``dotted.key = value`` lines (valid TOML)."""
    lines = [f"{k} = {_toml_value(v)}" for k, v in sorted(to_flat(cfg).items())]
    return "\n".join(lines) + "\n"


def validate_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat = load_config_file(path) if path else {}
    flat.update(overrides or {})
    return build_config(flat)


def default_run_root() -> Path:
    return Path(os.environ.get("SAPT_RUN_DIR", "runs"))


def cache_root() -> Path:
    return Path(os.environ.get("SAPT_CACHE", Path.home() / ".cache" / "sapt"))
