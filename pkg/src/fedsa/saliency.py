"""Saliency fingerprints, transferability scores and teacher selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T

SIM_FLOOR = 1e-6

STRATEGIES = ("fedsa", "fixed", "random", "topk", "leastk")


class DegenerateSaliencyError(ValueError):
    """A saliency map with zero norm cannot be compared by cosine."""


@dataclass
class SaliencyMap:
    values: np.ndarray  # flat, nonnegative, length H*W*C of the input
    count: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.count < 1:
            raise ValueError("saliency count must be positive")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "fedsa"
    fixed: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown selection strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind == "fixed" and not self.fixed:
            raise ValueError("fixed strategy needs at least one index")

    def __str__(self) -> str:
        if self.kind == "fixed":
            return "fixed(" + ",".join(map(str, self.fixed)) + ")"
        return self.kind


@dataclass
class SelectionState:
    similarities: np.ndarray
    distances: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    selected: tuple[int, ...] = ()
    target_map: SaliencyMap | None = field(default=None, repr=False)


def _input_gradients(params: nn.Parameters, spec: nn.NetworkSpec, x: np.ndarray) -> np.ndarray:
    frozen = params.frozen()
    # samples do not interact in the forward pass, so one backward of the
    # batch-wide sum yields every per-sample gradient at once
    return T.grad_wrt_input(lambda xt: nn.forward_tap(frozen, spec, xt), np.asarray(x, dtype=np.float64))


def saliency_single(params: nn.Parameters, spec: nn.NetworkSpec, x: np.ndarray) -> SaliencyMap:
    """|d(sum of tap activations)/dx| for one input of shape ``spec.input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        x = x[None]
    if x.shape != (1,) + spec.input_shape:
        raise T.ShapeError(f"saliency_single: expected one input of shape {spec.input_shape}, got {x.shape}")
    return SaliencyMap(np.abs(_input_gradients(params, spec, x)).reshape(-1), 1)


def saliency_batch(params: nn.Parameters, spec: nn.NetworkSpec, x: np.ndarray, batch_size: int = 128) -> list[SaliencyMap]:
    out = []
    for i in range(0, len(x), batch_size):
        g = np.abs(_input_gradients(params, spec, x[i:i + batch_size]))
        out.extend(SaliencyMap(row.reshape(-1), 1) for row in g)
    return out


def saliency_aggregate(maps: Sequence[SaliencyMap]) -> SaliencyMap:
    if not maps:
        raise ValueError("saliency_aggregate: empty list")
    n = maps[0].values.size
    for m in maps:
        if m.values.size != n:
            raise ValueError(f"saliency_aggregate: map lengths differ ({n} vs {m.values.size})")
    return SaliencyMap(np.mean([m.values for m in maps], axis=0), len(maps))


def model_saliency(params: nn.Parameters, spec: nn.NetworkSpec, probe_x: np.ndarray) -> SaliencyMap:
    """Saliency averaged over every probe sample."""
    return saliency_aggregate(saliency_batch(params, spec, probe_x))


def cosine_similarity(a, b) -> float:
    va = a.values if isinstance(a, SaliencyMap) else np.asarray(a, dtype=np.float64).reshape(-1)
    vb = b.values if isinstance(b, SaliencyMap) else np.asarray(b, dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise ValueError(f"cosine_similarity: lengths differ ({va.size} vs {vb.size})")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise DegenerateSaliencyError("degenerate saliency: zero-norm map")
    return float(np.dot(va, vb) / (na * nb))


def distance(sim: float, m: int, floor: float = SIM_FLOOR) -> float:
    """Model distance ``m / sim`` with ``sim`` clamped below at ``floor``."""
    if m < 1:
        raise ValueError("probe size must be positive")
    return m / max(float(sim), floor)


def transferability(sim: float, m: int, floor: float = SIM_FLOOR) -> float:
    return 1.0 / distance(sim, m, floor)


def sampling_probabilities(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size == 0 or not np.all(np.isfinite(q)):
        raise ValueError("sampling_probabilities: need at least one finite score")
    e = np.exp(q - q.max())
    return e / e.sum()


def _ranked(q: np.ndarray, descending: bool) -> np.ndarray:
    idx = np.arange(q.size)
    key = -q if descending else q
    return np.lexsort((idx, key))


def select(strategy: SelectionStrategy, q, k: int, rng: np.random.Generator, p=None) -> tuple[int, ...]:
    """Draw the selected teacher multiset.

    ``q`` holds transferability scores; ``p`` defaults to their softmax and
    is only used by the ``fedsa`` strategy.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    n = q.size
    kind = strategy.kind
    if kind == "fedsa":
        probs = sampling_probabilities(q) if p is None else np.asarray(p, dtype=np.float64)
        if probs.size != n:
            raise ValueError("select: probabilities and scores differ in length")
        return tuple(int(i) for i in rng.choice(n, size=k, replace=True, p=probs))
    if kind == "random":
        return tuple(int(i) for i in rng.integers(0, n, size=k))
    if kind in ("topk", "leastk"):
        if k > n:
            raise ValueError(f"{kind}: cannot pick {k} distinct teachers out of {n}")
        return tuple(int(i) for i in _ranked(q, kind == "topk")[:k])
    # fixed
    bad = [i for i in strategy.fixed if not 0 <= i < n]
    if bad:
        raise ValueError(f"fixed: indices {bad} out of range for {n} teachers")
    return tuple(int(i) for i in strategy.fixed)


def selection_state(target_map: SaliencyMap, teacher_maps: Sequence[SaliencyMap], m: int) -> SelectionState:
    """Similarities, distances, scores and probabilities against the target map.

    A degenerate (all-zero) map on either side gets the floor similarity.
    """
    sims = []
    for tm in teacher_maps:
        try:
            sims.append(cosine_similarity(tm, target_map))
        except DegenerateSaliencyError:
            sims.append(SIM_FLOOR)
    sims = np.asarray(sims)
    dists = np.array([distance(s, m) for s in sims])
    scores = 1.0 / dists
    return SelectionState(sims, dists, scores, sampling_probabilities(scores), (), target_map)
