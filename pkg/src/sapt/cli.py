"""Command-line entry point: ``sapt <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ABLATIONS, build_config, default_run_root, dumps_config, load_config_file, parse_overrides
from .errors import ConfigError, ParseError, SaptError
from .metrics import PerformanceMatrix, dumps_report, report
from .sals import read_attention_csv, write_attention_csv
from .tasks import BUILTIN, materialize

log = logging.getLogger("sapt")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _config(args) -> "harness.RunConfig":
    flat = load_config_file(args.config)
    flat.update(parse_overrides(args.set))
    return build_config(flat)


def _run_dir(args, cfg, suffix: str = "") -> Path:
    if args.out:
        return Path(args.out)
    name = f"{cfg.method}-{cfg.ablation}-seed{cfg.seed}{suffix}"
    return default_run_root() / name


def _finish(state, cfg, out: Path) -> dict:
    if cfg.fwt:
        harness.attach_individual(state, harness.run_individual(cfg, backbone=state.backbone,
                                                                datasets=state.tasks))
    if cfg.eval.unseen:
        harness.evaluate_unseen(state, harness.load_datasets(cfg, cfg.eval.unseen))
    harness.save_run(state, out)
    return state.report()


def _summary(rep: dict) -> str:
    def f(x):
        return "null" if x is None else f"{x:.4f}"
    return " ".join(f"{k}={f(rep[k])}" for k in ("AP", "F.Ra", "FWT", "BWT"))


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        sys.stdout.write(dumps_config(cfg))
        return EXIT_OK
    out = _run_dir(args, cfg)
    state = harness.run_sequential(cfg)
    rep = _finish(state, cfg, out)
    print(f"{out}: {_summary(rep)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ABLATIONS:
            raise ConfigError(f"unknown ablation {m!r}; choose from {', '.join(ABLATIONS)}", "modes")
    root = Path(args.out) if args.out else default_run_root() / f"ablate-seed{cfg.seed}"
    summary = {}
    backbone = None
    for m in modes:
        state = harness.run_ablation(cfg, m, backbone=backbone)
        backbone = state.backbone
        rep = _finish(state, state.config, root / m)
        summary[m] = {k: rep[k] for k in ("AP", "F.Ra", "FWT", "BWT")}
        print(f"{m}: {_summary(rep)}")
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def _run_config(run: Path):
    if not (run / "config.toml").is_file():
        raise ConfigError(f"{run} is not a run directory (config.toml missing)", "run")
    return build_config(load_config_file(run / "config.toml"))


def cmd_metrics(args) -> int:
    run = Path(args.run)
    cfg = _run_config(run)
    path = Path(args.matrix) if args.matrix else run / "matrix.json"
    try:
        M = PerformanceMatrix.from_json(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read matrix {path}: {exc}", "matrix") from None
    text = dumps_report(report(M, ",".join(cfg.data.order), cfg.method, cfg.ablation))
    if args.stdout:
        sys.stdout.write(text)
    else:
        (run / "metrics.json").write_text(text)
        print(run / "metrics.json")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    run = Path(args.run)
    state = harness.load_run(run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    T = len(state.tasks)
    train_csv = run / "attention_train.csv"
    if train_csv.is_file():
        labels, rows = read_attention_csv(train_csv)
        write_attention_csv(out / "attention_train.csv", list(zip(labels, rows.tolist())), T)
    test_rows = harness.attention_rows(harness.final_test_attention(state))
    write_attention_csv(out / "attention_test.csv", test_rows, T)
    for name, w in test_rows:
        best = max(range(len(w)), key=w.__getitem__) + 1
        print(f"{name}: argmax block {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    state = harness.load_run(run)
    names = [n.strip() for n in args.tasks.split(",")] if args.tasks else state.names()
    datasets = harness.load_datasets(state.config, names)
    result = harness.evaluate_unseen(state, datasets)
    text = json.dumps(result, indent=2) + "\n"
    out = Path(args.out) if args.out else run / "eval.json"
    out.write_text(text)
    for name, s in result["tasks"].items():
        print(f"{name}: {s:.2f}")
    return EXIT_OK


def cmd_gen_tasks(args) -> int:
    names = [n.strip() for n in args.tasks.split(",")] if args.tasks else list(BUILTIN)
    materialize(args.out, names, seed=args.seed, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test)
    print(f"wrote {len(names)} tasks to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sapt", description="Shared-attention PET continual learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="dotted-key TOML config file (may be empty)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (default: under $SAPT_RUN_DIR)")

    sp = sub.add_parser("train", help="run the sequential stream and write a run directory")
    with_config(sp)
    sp.add_argument("--dry-run", action="store_true", help="print the normalised config and exit")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("ablate", help="run ablation modes of the config")
    with_config(sp)
    sp.add_argument("--modes", default="none,no_arm,plus_replay,no_align,no_sa")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("metrics", help="recompute metrics.json from matrix.json")
    sp.add_argument("--run", required=True)
    sp.add_argument("--matrix", help="matrix file (default: <run>/matrix.json)")
    sp.add_argument("--stdout", action="store_true", help="print instead of writing metrics.json")
    sp.set_defaults(fn=cmd_metrics)

    sp = sub.add_parser("heatmap", help="write train/test attention CSVs for a run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_heatmap)

    sp = sub.add_parser("eval", help="score tasks with a finished run's selection state")
    sp.add_argument("--run", required=True)
    sp.add_argument("--tasks", help="comma-separated task names (default: the trained order)")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gen-tasks", help="materialise synthetic datasets as JSONL")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tasks", help="comma-separated names (default: all built-in tasks)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-train", type=int, default=1000)
    sp.add_argument("--n-val", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=100)
    sp.set_defaults(fn=cmd_gen_tasks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, ParseError) as exc:
        print(f"sapt: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SaptError, OSError) as exc:
        print(f"sapt: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
