"""Center-server orchestration: warm training, reselection, parallel distillation, aggregation, adaptation."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import nn
from . import saliency as S
from . import tensor as T
from .distill import LocalStudentState, TeacherNode, Upload, local_distill

AGGREGATIONS = ("unweighted", "positive", "negative")


class ConfigError(ValueError):
    pass


class PretrainError(RuntimeError):
    pass


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


# stream tags so that seeds for different purposes never collide
_TARGET_INIT, _WARM, _SELECT, _DISTILL, _TRANSLATOR, _ADAPT, _TEACHER, _TEACHER_TR = range(1, 9)


@dataclass
class FederationConfig:
    rounds: int = 20
    local_epochs: int = 2
    selective_gap: int = 5
    local_lr: float = 0.05
    center_lr: float = 0.05
    k: int = 2
    strategy: S.SelectionStrategy = field(default_factory=S.SelectionStrategy)
    aggregation: str = "unweighted"
    seed: int = 0
    batch_size: int = 16
    warm_epochs: int = 3
    warm_every_reselection: bool = True
    adapt_epochs: int = 30
    workers: int = 1
    clip_norm: float = 5.0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.selective_gap < 1:
            raise ConfigError(f"selective_gap must be >= 1, got {self.selective_gap}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if not (self.local_lr > 0 and self.center_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if self.warm_epochs < 0 or self.adapt_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm must be >= 0 (0 disables), got {self.clip_norm}")

    def reselection_rounds(self) -> list[int]:
        return [t for t in range(self.rounds) if t % self.selective_gap == 0]

    def center_epoch_budget(self) -> int:
        """Supervised epochs the center spends on the target data over a full run."""
        warm_events = len(self.reselection_rounds()) if self.warm_every_reselection else 1
        return self.warm_epochs * warm_events + self.adapt_epochs


@dataclass
class CenterState:
    params: nn.Parameters
    spec: nn.NetworkSpec
    probe: D.Dataset
    test: D.Dataset | None = None
    selection: S.SelectionState | None = None
    round: int = 0


@dataclass
class RoundMetrics:
    round: int
    selected: list[int]
    probs: list[float]
    kd_loss_per_node: dict[str, float]
    test_acc: float
    wall_ms: float | None = None
    reselected: bool = False
    test_loss: float = float("nan")
    scores: list[float] = field(default_factory=list)
    kd_epoch_losses: dict[str, list[float]] = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def train_supervised(params: nn.Parameters, spec: nn.NetworkSpec, train: D.Dataset, epochs: int, lr: float,
                     rng: np.random.Generator, batch_size: int = 16, names: Sequence[str] | None = None) -> list[float]:
    """Minibatch SGD on softmax cross-entropy; only ``names`` (default: all) are updated."""
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    update = [params[k] for k in (names if names is not None else params)]
    losses = []
    for _ in range(epochs):
        total = 0.0
        for xb, yb in D.batches(train, batch_size, rng):
            loss = T.softmax_cross_entropy(nn.forward_logits(params, spec, xb), yb)
            T.backward(loss)
            T.sgd_step(update, lr)
            params.zero_grad()
            total += loss.item() * len(yb)
        losses.append(total / len(train))
    return losses


def pretrain_teachers(plan: D.PartitionPlan, specs: Sequence[nn.NetworkSpec], seeds: Sequence[int],
                      floor: float = 0.85, epochs: int = 50, lr: float = 0.05,
                      batch_size: int = 16, data_seed: int = 0) -> list[TeacherNode]:
    """Train one teacher per task in ``plan`` for ``epochs`` epochs.

    Raises PretrainError naming the node if a teacher ends below ``floor``
    accuracy on its own test split.
    """
    if not (len(specs) == len(seeds) == len(plan.teachers)):
        raise ValueError("need one spec and one seed per teacher task")
    nodes = []
    for n, (task, spec, seed) in enumerate(zip(plan.teachers, specs, seeds)):
        train, test = D.synth_generate(task, data_seed)
        spec = spec.with_classes(len(task.classes))
        params = nn.build(spec, seed)
        train_supervised(params, spec, train, epochs, lr, rng_for(seed, _TEACHER), batch_size)
        acc = nn.accuracy(params, spec, test.x, test.y)
        if acc < floor:
            raise PretrainError(f"teacher {n} ({task.name}) reached {acc:.3f} < floor {floor} after {epochs} epochs")
        c_feat = spec.encoder_out_shape()[-1]
        translator = nn.build_translator(c_feat, spec.hint_dim, int(rng_for(seed, _TEACHER_TR).integers(2**31)))
        translator = nn.TranslatorBlock(translator.in_channels, translator.hint_dim, translator.params.frozen())
        node = TeacherNode(n, spec, params.frozen(), translator, train, test)
        calibrate_translator(node)
        nodes.append(node)
    return nodes


def calibrate_translator(node: TeacherNode) -> float:
    """Rescale the frozen teacher translator's last layer to unit mean per-channel hint variance.

    Uses only the node's own data. Random translators otherwise hand out hints
    whose energy differs by well over an order of magnitude between teachers,
    which makes one local learning rate too slow for some nodes and too fast
    for others. Returns the divisor applied.
    """
    node._hints = None
    h = node.hints()
    s = float(np.sqrt(h.reshape(-1, h.shape[-1]).var(axis=0).mean()))
    if s > 0:
        for k in ("translator.2.weight", "translator.2.bias"):
            node.translator.params[k].data[...] /= s
    node._hints = None
    return s


def warm_train_target(state: CenterState, epochs: int, lr: float, rng: np.random.Generator, batch_size: int = 16) -> list[float]:
    if len(state.probe) == 0:
        raise ValueError("target dataset is empty")
    return train_supervised(state.params, state.spec, state.probe, epochs, lr, rng, batch_size)


def reselect(state: CenterState, nodes: Sequence[TeacherNode], config: FederationConfig,
             rng: np.random.Generator) -> S.SelectionState:
    """Saliency fingerprints on the probe set, then scores, probabilities and a fresh selection."""
    probe_x = state.probe.x
    target_map = S.model_saliency(state.params, state.spec, probe_x)
    # runs at each node: the probe goes out, only the averaged map comes back
    teacher_maps = [S.model_saliency(node.params, node.spec, probe_x) for node in nodes]
    sel = S.selection_state(target_map, teacher_maps, len(state.probe))
    if len(nodes) == 1:
        sel.selected = (0,) * config.k
    else:
        sel.selected = S.select(config.strategy, sel.scores, config.k, rng, sel.probs)
    state.selection = sel
    return sel


def aggregation_weights(mode: str, scores: Sequence[float]) -> np.ndarray | None:
    q = np.asarray(scores, dtype=np.float64)
    if mode == "unweighted":
        return None
    if mode == "positive":
        return q / q.sum()
    if mode == "negative":
        inv = 1.0 / q
        return inv / inv.sum()
    raise ConfigError(f"unknown aggregation {mode!r}")


def aggregate(uploads: Sequence[nn.Parameters], mode: str = "unweighted", scores: Sequence[float] | None = None) -> nn.Parameters:
    """Average returned student parameters; one entry per selected index, duplicates included."""
    if mode != "unweighted":
        if scores is None or len(scores) != len(uploads):
            raise ValueError("weighted aggregation needs one score per upload")
        return nn.avg_params(uploads, aggregation_weights(mode, scores))
    return nn.avg_params(uploads)


def task_adaptation(params: nn.Parameters, spec: nn.NetworkSpec, probe: D.Dataset, epochs: int, lr: float,
                    rng: np.random.Generator, batch_size: int = 16) -> nn.Parameters:
    """Train only the decoder on the probe set; encoder tensors are returned untouched."""
    if len(probe) == 0:
        raise ValueError("target dataset is empty")
    out = params.copy()
    _, dec = nn.split_roles(out, spec)
    with T.no_grad():
        feats = np.concatenate([nn.forward_encoder(out, spec, probe.x[i:i + 256]).data for i in range(0, len(probe), 256)])
    feat_set = D.Dataset(feats, probe.y, probe.classes)
    for _ in range(epochs):
        for fb, yb in D.batches(feat_set, batch_size, rng):
            loss = T.softmax_cross_entropy(nn.decode(out, spec, T.Tensor(fb)), yb)
            T.backward(loss)
            T.sgd_step(list(dec.values()), lr)
    return out


def _distill_job(node: TeacherNode, global_params: nn.Parameters, translator: nn.TranslatorBlock,
                 spec: nn.NetworkSpec, config: FederationConfig, round_idx: int) -> Upload:
    state = LocalStudentState(global_params.trainable(), translator, node.node_id)
    return local_distill(node, state, spec, config.local_epochs, config.local_lr, config.batch_size,
                         rng_for(config.seed, _DISTILL, round_idx, node.node_id), config.clip_norm)


def run_fedsa(config: FederationConfig, nodes: Sequence[TeacherNode], spec: nn.NetworkSpec, probe: D.Dataset,
              test: D.Dataset | None = None, on_round: Callable[[RoundMetrics], None] | None = None,
              record_timing: bool = False, init_params: nn.Parameters | None = None,
              upload_hook: Callable[[Upload], None] | None = None) -> tuple[nn.Parameters, list[RoundMetrics]]:
    """Full federated loop. Returns the adapted target parameters and one metrics record per round."""
    config.validate()
    if not nodes:
        raise ConfigError("need at least one teacher node")
    if len(probe) == 0:
        raise ValueError("target dataset is empty")
    params = init_params.trainable() if init_params is not None else nn.build(spec, int(rng_for(config.seed, _TARGET_INIT).integers(2**31)))
    state = CenterState(params, spec, probe, test)
    select_rng = rng_for(config.seed, _SELECT)
    c_tap = spec.tap_shape()[-1]
    # node-local translators, kept while a node stays selected round to round
    translators: dict[int, tuple[nn.TranslatorBlock, int]] = {}
    metrics: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for t in range(config.rounds):
            start = time.perf_counter()
            state.round = t
            reselected = t % config.selective_gap == 0
            if reselected:
                if config.warm_every_reselection or t == 0:
                    warm_train_target(state, config.warm_epochs, config.center_lr, rng_for(config.seed, _WARM, t), config.batch_size)
                reselect(state, nodes, config, select_rng)
            sel = state.selection
            distinct = list(dict.fromkeys(sel.selected))
            jobs = []
            for n in distinct:
                prev = translators.get(n)
                if prev is None or prev[1] != t - 1:
                    tr = nn.build_translator(c_tap, spec.hint_dim, int(rng_for(config.seed, _TRANSLATOR, t, n).integers(2**31)))
                else:
                    tr = prev[0]
                translators[n] = (tr, t)
                jobs.append((nodes[n], tr))
            frozen_global = state.params.frozen()
            if pool is None:
                uploads = [_distill_job(node, frozen_global, tr, spec, config, t) for node, tr in jobs]
            else:
                futures = [pool.submit(_distill_job, node, frozen_global, tr, spec, config, t) for node, tr in jobs]
                uploads = [f.result() for f in futures]
            by_node = {u.node_id: u for u in uploads}
            if upload_hook is not None:
                for u in uploads:
                    upload_hook(u)
            members = [by_node[n].params for n in sel.selected]
            scores = [float(sel.scores[n]) for n in sel.selected]
            state.params = aggregate(members, config.aggregation, scores)
            acc, loss = float("nan"), float("nan")
            if test is not None:
                acc = nn.accuracy(state.params, spec, test.x, test.y)
                loss = nn.mean_loss(state.params, spec, test.x, test.y)
            wall = (time.perf_counter() - start) * 1e3 if record_timing else None
            m = RoundMetrics(
                round=t,
                selected=list(sel.selected),
                probs=[float(p) for p in sel.probs],
                kd_loss_per_node={str(u.node_id): u.final_loss for u in uploads},
                test_acc=acc,
                wall_ms=wall,
                reselected=reselected,
                test_loss=loss,
                scores=[float(q) for q in sel.scores],
                kd_epoch_losses={str(u.node_id): list(u.epoch_losses) for u in uploads},
            )
            metrics.append(m)
            if on_round is not None:
                on_round(m)
    finally:
        if pool is not None:
            pool.shutdown()
    final = task_adaptation(state.params, spec, probe, config.adapt_epochs, config.center_lr,
                            rng_for(config.seed, _ADAPT), config.batch_size)
    return final, metrics


def train_scratch(spec: nn.NetworkSpec, probe: D.Dataset, epochs: int, lr: float, seed: int,
                  batch_size: int = 16) -> nn.Parameters:
    """Baseline: the target model trained on the probe set alone from the same initialization."""
    params = nn.build(spec, int(rng_for(seed, _TARGET_INIT).integers(2**31)))
    train_supervised(params, spec, probe, epochs, lr, rng_for(seed, _WARM, -1 % 2**31), batch_size)
    return params
