"""fedsa command line.

    fedsa pretrain        train and checkpoint the teachers
    fedsa run             one FedSA run: metrics.jsonl, summary.json, target.fsa
    fedsa ablate          strategy x aggregation grid over seeds, mean ± std table
    fedsa saliency-report per-teacher saliency similarity vs frozen-head transfer accuracy
    fedsa eval            accuracy of a target checkpoint on the target test split

Settings come from ``--config FILE`` (``key = value`` lines) and are overridden
by flags. Outputs go under ``--out-dir``, else ``$FEDSA_OUTPUT_ROOT``, else ./fedsa-out.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import BACKEND, __version__
from . import experiments as X
from . import federation as F
from .checkpoint import CheckpointError
from .distill import DistillationError
from .saliency import DegenerateSaliencyError
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")
    for f in X.FIELDS:
        extra = {"nargs": "?", "const": "true"} if isinstance(f.default, bool) else {}
        p.add_argument(f.flag, dest=f.key, default=None, metavar=f.key.split(".")[-1].upper(), help=f.help, **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsa", description="Saliency-guided federated knowledge amalgamation at desk scale.")
    parser.add_argument("--version", action="version", version=f"fedsa {__version__} ({BACKEND} kernels)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train and checkpoint the teacher models")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="retrain even if checkpoints exist")

    p = sub.add_parser("run", help="run FedSA once with existing teacher checkpoints")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="strategy x aggregation grid")
    _add_config_flags(p)
    p.add_argument("--strategies", default=",".join(X.GRID_STRATEGIES))
    p.add_argument("--aggregations", default=",".join(F.AGGREGATIONS))
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")

    p = sub.add_parser("saliency-report", help="saliency similarity vs frozen-head transfer accuracy")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a target checkpoint")
    _add_config_flags(p)
    p.add_argument("checkpoint", type=Path)
    return parser


def resolve_config(args: argparse.Namespace) -> X.ExperimentConfig:
    values: dict = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise F.ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(X.parse_config_text(text, str(args.config)))
    raw = {}
    for item in args.set:
        if "=" not in item:
            raise F.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        raw[k] = v
    for f in X.FIELDS:
        v = getattr(args, f.key, None)
        if v is not None:
            raw[f.key] = v
    for k, v in raw.items():
        if k not in X.FIELD_BY_KEY:
            raise F.ConfigError(f"unknown key {k!r}")
        try:
            values[k] = X.FIELD_BY_KEY[k].parse(v)
        except ValueError as exc:
            raise F.ConfigError(f"bad value for {k}: {exc}") from None
    return X.ExperimentConfig.from_mapping(values)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _list(text: str, cast=str) -> list:
    try:
        return [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise F.ConfigError(str(exc)) from None


def cmd_pretrain(cfg, args) -> int:
    X.pretrain(cfg, force=args.force, log=_log)
    print(cfg.teacher_dir())
    return EXIT_OK


def cmd_run(cfg, args) -> int:
    out, summary = X.run_to_disk(cfg, log=_log)
    print(json.dumps({"run_dir": str(out), "final_test_acc": summary["final_test_acc"],
                      "scratch_test_acc": summary["scratch_test_acc"]}))
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    strategies = _list(args.strategies)
    aggregations = _list(args.aggregations)
    seeds = _list(args.seeds, int)
    if not (strategies and aggregations and seeds):
        raise F.ConfigError("ablate needs at least one strategy, aggregation and seed")
    records = X.ablation_grid(cfg, strategies, aggregations, seeds, cfg["federation.workers"], log=_log)
    rows = X.ablation_table(records)
    out = cfg.output_root() / "ablations" / f"ablate-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text() + f"# grid: strategies={args.strategies} "
                                    f"aggregations={args.aggregations} seeds={args.seeds}\n")
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")
    table = X.format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_saliency_report(cfg, args) -> int:
    nodes = X.ensure_teachers(cfg, log=_log)
    rep = X.saliency_report(cfg, nodes)
    print(f"{'node':<6}{'similarity':>12}{'normalized':>12}{'transfer_acc':>14}")
    for r in rep.rows():
        print(f"{r['node']:<6}{r['similarity']:>12.4f}{r['normalized']:>12.4f}{r['transfer_acc']:>14.4f}")
    print("spearman rho: " + ("undefined" if rep.spearman is None else f"{rep.spearman:.4f}"))
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    print(json.dumps(X.evaluate_checkpoint(cfg, args.checkpoint)))
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "run": cmd_run, "ablate": cmd_ablate,
            "saliency-report": cmd_saliency_report, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_CONFIG
    except F.ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except F.ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (F.PretrainError, X.MissingTeachersError, CheckpointError, DistillationError,
            DegenerateSaliencyError, NonFiniteError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
