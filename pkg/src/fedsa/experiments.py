"""Experiment plumbing shared by the command line: configuration, teacher caching, runs,
ablation grids and the saliency/transfer report."""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import archs
from . import data as D
from . import federation as F
from . import nn
from . import saliency as S
from .checkpoint import checkpoint_load, checkpoint_save, quantize
from .distill import TeacherNode

OUTPUT_ROOT_ENV = "FEDSA_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "fedsa-out"


class MissingTeachersError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ids(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _fmt_ids(ids) -> str:
    return ",".join(str(i) for i in ids)


@dataclass(frozen=True)
class Field:
    key: str          # dotted config key
    flag: str         # command-line flag
    parse: Callable[[str], object]
    default: object
    help: str = ""


FIELDS: tuple[Field, ...] = (
    Field("seed", "--seed", int, 0, "experiment seed (data, teachers, target init)"),
    Field("output.dir", "--out-dir", str, "", f"output directory (default ${OUTPUT_ROOT_ENV} or ./{DEFAULT_OUTPUT_ROOT})"),
    Field("output.name", "--name", str, "", "run directory name under <out>/runs (default: derived from the config)"),
    Field("output.timing", "--timing", _parse_bool, False, "record wall_ms per round (breaks byte-identical metrics)"),
    Field("federation.rounds", "--rounds", int, 20, "communication rounds T"),
    Field("federation.local_epochs", "--local-epochs", int, 2, "local distillation epochs E per round"),
    Field("federation.selective_gap", "--selective-gap", int, 5, "rounds between reselections E_g"),
    Field("federation.local_lr", "--local-lr", float, 0.05, "learning rate at teacher nodes"),
    Field("federation.center_lr", "--center-lr", float, 0.05, "learning rate for warm training and task adaptation"),
    Field("federation.k", "--k", int, 2, "teachers drawn per selection"),
    Field("federation.strategy", "--strategy", str, "fedsa", "fedsa | fixed | random | topk | leastk"),
    Field("federation.fixed_ids", "--fixed-ids", _parse_ids, (), "comma-separated node ids for --strategy fixed"),
    Field("federation.aggregation", "--aggregation", str, "unweighted", "unweighted | positive | negative"),
    Field("federation.batch_size", "--batch-size", int, 16, "minibatch size everywhere"),
    Field("federation.warm_epochs", "--warm-epochs", int, 3, "supervised epochs on D_T before each reselection"),
    Field("federation.warm_every_reselection", "--warm-every-reselection", _parse_bool, True,
          "warm-train before every reselection, not only the first"),
    Field("federation.adapt_epochs", "--adapt-epochs", int, 30, "decoder-only epochs at the end"),
    Field("federation.workers", "--workers", int, 1, "parallel node jobs per round (and grid cells for ablate)"),
    Field("federation.clip_norm", "--clip-norm", float, 5.0, "gradient-norm clip for distillation steps (0 disables)"),
    Field("data.label_fraction", "--label-fraction", float, 0.1, "fraction of target training labels in D_T"),
    Field("data.n_train", "--n-train", int, 200, "training samples per class"),
    Field("data.n_test", "--n-test", int, 100, "test samples per class"),
    Field("data.noise", "--noise", float, 0.3, "pixel noise std"),
    Field("data.distractors", "--distractors", int, 6, "distractor cells per image"),
    Field("data.contrast_jitter", "--contrast-jitter", float, 0.5, "texture amplitude jitter"),
    Field("arch.target", "--arch", str, "small", f"target architecture: {', '.join(archs.REGISTRY)}"),
    Field("arch.teacher", "--teacher-arch", str, "small", "teacher architecture when homogeneous"),
    Field("arch.heterogeneous", "--heterogeneous", _parse_bool, False, "per-node teacher architectures"),
    Field("arch.hint_dim", "--hint-dim", int, archs.HINT_DIM, "aligned feature channels"),
    Field("pretrain.epochs", "--pretrain-epochs", int, 50, "teacher training epochs"),
    Field("pretrain.lr", "--pretrain-lr", float, 0.05, "teacher learning rate"),
    Field("pretrain.floor", "--floor", float, 0.85, "minimum teacher test accuracy"),
)

FIELD_BY_KEY = {f.key: f for f in FIELDS}

# keys that determine teacher checkpoints
PRETRAIN_KEYS = ("seed", "data.n_train", "data.n_test", "data.noise", "data.distractors", "data.contrast_jitter",
                 "arch.teacher", "arch.heterogeneous", "arch.hint_dim", "pretrain.epochs", "pretrain.lr",
                 "pretrain.floor", "federation.batch_size")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """``key = value`` lines, ``#`` comments, dotted keys. Unknown keys are errors."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise F.ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_BY_KEY:
            raise F.ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = FIELD_BY_KEY[key].parse(value)
        except ValueError as exc:
            raise F.ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return _fmt_ids(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, overrides: dict | None = None) -> "ExperimentConfig":
        vals = {f.key: f.default for f in FIELDS}
        for k, v in (overrides or {}).items():
            if k not in FIELD_BY_KEY:
                raise F.ConfigError(f"unknown key {k!r}")
            vals[k] = v
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def with_values(self, **dotted) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in dotted.items()})
        return ExperimentConfig.from_mapping(vals)

    @property
    def seed(self) -> int:
        return int(self["seed"])

    def federation(self) -> F.FederationConfig:
        try:
            strategy = S.SelectionStrategy(self["federation.strategy"], tuple(self["federation.fixed_ids"]))
        except ValueError as exc:
            raise F.ConfigError(str(exc)) from None
        return F.FederationConfig(
            rounds=self["federation.rounds"], local_epochs=self["federation.local_epochs"],
            selective_gap=self["federation.selective_gap"], local_lr=self["federation.local_lr"],
            center_lr=self["federation.center_lr"], k=self["federation.k"], strategy=strategy,
            aggregation=self["federation.aggregation"], seed=self.seed, batch_size=self["federation.batch_size"],
            warm_epochs=self["federation.warm_epochs"], warm_every_reselection=self["federation.warm_every_reselection"],
            adapt_epochs=self["federation.adapt_epochs"], workers=self["federation.workers"],
            clip_norm=self["federation.clip_norm"])

    def plan(self) -> D.PartitionPlan:
        try:
            return D.standard_scenario(self["data.label_fraction"], self["data.n_train"], self["data.n_test"],
                                       self["data.noise"], self["data.distractors"], self["data.contrast_jitter"])
        except ValueError as exc:
            raise F.ConfigError(str(exc)) from None

    def teacher_arch_names(self, n: int) -> list[str]:
        if self["arch.heterogeneous"]:
            return [archs.HETEROGENEOUS[i % len(archs.HETEROGENEOUS)] for i in range(n)]
        return [self["arch.teacher"]] * n

    def target_spec(self, num_classes: int) -> nn.NetworkSpec:
        return archs.get(self["arch.target"], num_classes, self["arch.hint_dim"])

    def validate(self) -> None:
        for key in ("arch.target", "arch.teacher"):
            if self[key] not in archs.REGISTRY:
                raise F.ConfigError(f"{key}: unknown architecture {self[key]!r}; known: {sorted(archs.REGISTRY)}")
        if self["arch.hint_dim"] < 1:
            raise F.ConfigError("arch.hint_dim must be positive")
        if self["pretrain.epochs"] < 0 or self["pretrain.lr"] <= 0:
            raise F.ConfigError("pretrain.epochs must be >= 0 and pretrain.lr > 0")
        self.federation().validate()
        plan = self.plan()
        if self["federation.strategy"] == "fixed":
            bad = [i for i in self["federation.fixed_ids"] if not 0 <= i < len(plan.teachers)]
            if bad:
                raise F.ConfigError(f"fixed ids {bad} out of range for {len(plan.teachers)} teachers")

    def to_text(self) -> str:
        """The config echo: feeding this back via ``--config`` reproduces the run."""
        lines = []
        section = None
        for f in FIELDS:
            head = f.key.split(".", 1)[0] if "." in f.key else None
            if head != section and head is not None:
                lines.append(f"\n# {head}")
                section = head
            lines.append(f"{f.key} = {format_value(self[f.key])}")
        return "\n".join(lines).lstrip("\n") + "\n"

    def digest(self, keys: Sequence[str] | None = None) -> str:
        keys = keys if keys is not None else [f.key for f in FIELDS if not f.key.startswith("output.")]
        blob = "\n".join(f"{k}={format_value(self[k])}" for k in keys)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def output_root(self) -> Path:
        if self["output.dir"]:
            return Path(self["output.dir"])
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)

    def teacher_dir(self) -> Path:
        return self.output_root() / "teachers" / f"seed{self.seed}-{self.digest(PRETRAIN_KEYS)}"

    def run_dir(self) -> Path:
        name = self["output.name"] or f"seed{self.seed}-{self['federation.strategy']}-{self['federation.aggregation']}-{self.digest()}"
        return self.output_root() / "runs" / name


# ---------------------------------------------------------------------------
# teachers
# ---------------------------------------------------------------------------

def teacher_seeds(seed: int, n: int) -> list[int]:
    return [100 + i + 10 * seed for i in range(n)]


def _teacher_path(directory: Path, n: int) -> Path:
    return directory / f"node{n}.fsa"


def pretrain(cfg: ExperimentConfig, force: bool = False, log: Callable[[str], None] = lambda s: None) -> list[Path]:
    """Train and checkpoint every teacher (parameters plus frozen translator in one file).

    Existing checkpoints are reused unless ``force``.
    """
    plan = cfg.plan()
    directory = cfg.teacher_dir()
    paths = [_teacher_path(directory, n) for n in range(len(plan.teachers))]
    if not force and all(p.exists() for p in paths):
        for p in paths:
            log(f"cached {p}")
        return paths
    names = cfg.teacher_arch_names(len(plan.teachers))
    specs = [archs.get(a, 2, cfg["arch.hint_dim"]) for a in names]
    nodes = F.pretrain_teachers(plan, specs, teacher_seeds(cfg.seed, len(specs)), cfg["pretrain.floor"],
                                cfg["pretrain.epochs"], cfg["pretrain.lr"], cfg["federation.batch_size"], cfg.seed)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(cfg.to_text())
    for node, path in zip(nodes, paths):
        store = nn.Parameters(node.params)
        store.update(node.translator.params)
        checkpoint_save(path, store)
        acc = nn.accuracy(node.params, node.spec, node.test.x, node.test.y)
        log(f"wrote {path} ({names[node.node_id]}, test acc {acc:.3f})")
    return paths


def load_teachers(cfg: ExperimentConfig) -> list[TeacherNode]:
    plan = cfg.plan()
    directory = cfg.teacher_dir()
    names = cfg.teacher_arch_names(len(plan.teachers))
    nodes = []
    for n, task in enumerate(plan.teachers):
        path = _teacher_path(directory, n)
        if not path.exists():
            raise MissingTeachersError(f"missing teacher checkpoint {path}; run `fedsa pretrain` with the same config first")
        store = checkpoint_load(path)
        spec = archs.get(names[n], len(task.classes), cfg["arch.hint_dim"])
        params = nn.Parameters((k, v) for k, v in store.items() if not k.startswith("translator."))
        tr = nn.Parameters((k, v) for k, v in store.items() if k.startswith("translator."))
        if not params.same_layout(nn.build(spec, 0)):
            raise MissingTeachersError(f"{path}: parameter layout does not match architecture {names[n]!r}")
        c_feat = spec.encoder_out_shape()[-1]
        translator = nn.TranslatorBlock(c_feat, spec.hint_dim, tr.frozen())
        train, test = D.synth_generate(task, cfg.seed)
        nodes.append(TeacherNode(n, spec, params.frozen(), translator, train, test))
    return nodes


def ensure_teachers(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None) -> list[TeacherNode]:
    pretrain(cfg, force=False, log=log)
    return load_teachers(cfg)


def target_data(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    """(D_T probe set, target test split)."""
    plan = cfg.plan()
    train, test = D.synth_generate(plan.target, cfg.seed)
    return D.make_probe(train, plan.label_fraction, cfg.seed), test


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def metrics_line(m: F.RoundMetrics) -> str:
    return json.dumps(_json_safe(m.to_record()), separators=(",", ":")) + "\n"


@dataclass
class RunResult:
    params: nn.Parameters
    metrics: list[F.RoundMetrics]
    test_acc: float
    scratch_acc: float | None = None


def run_experiment(cfg: ExperimentConfig, nodes: Sequence[TeacherNode] | None = None,
                   on_round: Callable[[F.RoundMetrics], None] | None = None,
                   with_scratch: bool = False, upload_hook=None) -> RunResult:
    nodes = load_teachers(cfg) if nodes is None else nodes
    probe, test = target_data(cfg)
    fed = cfg.federation()
    spec = cfg.target_spec(len(probe.classes))
    final, metrics = F.run_fedsa(fed, nodes, spec, probe, test, on_round=on_round,
                                 record_timing=cfg["output.timing"], upload_hook=upload_hook)
    # score what a reload of the saved checkpoint would see
    acc = nn.accuracy(quantize(final), spec, test.x, test.y)
    scratch = None
    if with_scratch:
        base = F.train_scratch(spec, probe, fed.center_epoch_budget(), fed.center_lr, cfg.seed, fed.batch_size)
        scratch = nn.accuracy(base, spec, test.x, test.y)
    return RunResult(final, metrics, acc, scratch)


def run_to_disk(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None) -> tuple[Path, dict]:
    """Execute a run, streaming metrics.jsonl and finishing with summary.json and target.fsa."""
    nodes = load_teachers(cfg)
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def on_round(m: F.RoundMetrics) -> None:
            fh.write(metrics_line(m))
            fh.flush()
            log(f"round {m.round:3d}  selected {m.selected}  test_acc {m.test_acc:.3f}")

        result = run_experiment(cfg, nodes, on_round=on_round, with_scratch=True)
    checkpoint_save(out / "target.fsa", result.params)
    summary = {
        "final_test_acc": result.test_acc,
        "scratch_test_acc": result.scratch_acc,
        "rounds": len(result.metrics),
        "seed": cfg.seed,
        "config": {k: format_value(v) for k, v in cfg.values.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out, summary


def evaluate_checkpoint(cfg: ExperimentConfig, path) -> dict:
    probe, test = target_data(cfg)
    spec = cfg.target_spec(len(probe.classes))
    params = checkpoint_load(path)
    if not params.same_layout(nn.build(spec, 0)):
        raise F.ConfigError(f"{path}: parameters do not match target architecture {cfg['arch.target']!r}")
    return {"checkpoint": str(path), "test_acc": nn.accuracy(params, spec, test.x, test.y),
            "test_loss": nn.mean_loss(params, spec, test.x, test.y), "n_test": len(test)}


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

GRID_STRATEGIES = ("fedsa", "fixed", "random", "topk", "leastk")


def _cell_config(cfg: ExperimentConfig, strategy: str, aggregation: str, seed: int) -> ExperimentConfig:
    vals = dict(cfg.values)
    vals.update({"federation.strategy": strategy, "federation.aggregation": aggregation, "seed": seed,
                 "federation.workers": 1})
    if strategy == "fixed" and not vals["federation.fixed_ids"]:
        vals["federation.fixed_ids"] = tuple(range(vals["federation.k"]))
    return ExperimentConfig.from_mapping(vals)


def _run_cell(args) -> dict:
    cfg, strategy, aggregation, seed = args
    cell = _cell_config(cfg, strategy, aggregation, seed)
    res = run_experiment(cell)
    return {"strategy": str(cell.federation().strategy), "kind": strategy, "aggregation": aggregation,
            "seed": seed, "test_acc": res.test_acc}


def ablation_grid(cfg: ExperimentConfig, strategies: Sequence[str], aggregations: Sequence[str],
                  seeds: Sequence[int], workers: int = 1, log: Callable[[str], None] = lambda s: None) -> list[dict]:
    """One run record per (strategy, aggregation, seed) cell, in grid order."""
    for s in strategies:
        if s not in GRID_STRATEGIES:
            raise F.ConfigError(f"unknown strategy {s!r} in grid")
    for a in aggregations:
        if a not in F.AGGREGATIONS:
            raise F.ConfigError(f"unknown aggregation {a!r} in grid")
    cells = [(cfg, s, a, seed) for s in strategies for a in aggregations for seed in seeds]
    for cell in cells:
        _cell_config(*cell)  # surface config errors before any work
    for seed in seeds:
        pretrain(cfg.with_values(seed=seed), log=log)
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        records = [_run_cell(c) for c in cells]
    for r in records:
        log(f"{r['strategy']:>12s} {r['aggregation']:>10s} seed {r['seed']}: {r['test_acc']:.4f}")
    return records


def ablation_table(records: Sequence[dict]) -> list[dict]:
    """Mean and (population) std of accuracy per grid row, best first."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r["strategy"], r["aggregation"]), []).append(r["test_acc"])
    rows = [{"strategy": s, "aggregation": a, "mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
            for (s, a), v in groups.items()]
    rows.sort(key=lambda r: (-r["mean"], r["strategy"], r["aggregation"]))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    lines = [f"{'strategy':<14}{'aggregation':<12}{'accuracy':>18}{'n':>4}"]
    for r in rows:
        lines.append(f"{r['strategy']:<14}{r['aggregation']:<12}{100 * r['mean']:>9.2f} ± {100 * r['std']:<5.2f}{r['n']:>4}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# saliency / transfer report
# ---------------------------------------------------------------------------

@dataclass
class SaliencyReport:
    similarity: list[float]
    normalized: list[float]
    transfer_acc: list[float]
    spearman: float | None  # None when undefined

    def rows(self) -> list[dict]:
        return [{"node": n, "similarity": s, "normalized": z, "transfer_acc": a}
                for n, (s, z, a) in enumerate(zip(self.similarity, self.normalized, self.transfer_acc))]


def min_max(values) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    if span == 0:
        return [1.0] * v.size
    return [float(x) for x in (v - v.min()) / span]


def rank_correlation(a, b) -> float | None:
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    rho = stats.spearmanr(a, b).statistic
    return None if not np.isfinite(rho) else float(rho)


def frozen_head_transfer(node: TeacherNode, probe: D.Dataset, test: D.Dataset, epochs: int, lr: float,
                         seed: int, batch_size: int = 16) -> float:
    """Retrain only a fresh head on top of the frozen teacher encoder; return target test accuracy."""
    spec = node.spec.with_classes(len(probe.classes))
    fresh = nn.build(spec, int(F.rng_for(seed, node.node_id).integers(2**31)))
    params = nn.Parameters(fresh)
    for k, v in node.params.items():
        if k.startswith("encoder."):
            params[k] = v
    adapted = F.task_adaptation(params, spec, probe, epochs, lr, F.rng_for(seed, node.node_id, 1), batch_size)
    return nn.accuracy(adapted, spec, test.x, test.y)


def saliency_report(cfg: ExperimentConfig, nodes: Sequence[TeacherNode] | None = None,
                    target_params: nn.Parameters | None = None) -> SaliencyReport:
    """Saliency similarity of each teacher to the warm-trained target, next to its frozen-head transfer accuracy."""
    nodes = load_teachers(cfg) if nodes is None else nodes
    fed = cfg.federation()
    probe, test = target_data(cfg)
    spec = cfg.target_spec(len(probe.classes))
    if target_params is None:
        target_params = nn.build(spec, int(F.rng_for(cfg.seed, F._TARGET_INIT).integers(2**31)))
        F.train_supervised(target_params, spec, probe, fed.warm_epochs, fed.center_lr,
                           F.rng_for(cfg.seed, F._WARM, 0), fed.batch_size)
    target_map = S.model_saliency(target_params, spec, probe.x)
    maps = [S.model_saliency(n.params, n.spec, probe.x) for n in nodes]
    sel = S.selection_state(target_map, maps, len(probe))
    sims = [float(s) for s in sel.similarities]
    transfer = [frozen_head_transfer(n, probe, test, fed.adapt_epochs, fed.center_lr, cfg.seed, fed.batch_size)
                for n in nodes]
    return SaliencyReport(sims, min_max(sims), transfer, rank_correlation(sims, transfer))
