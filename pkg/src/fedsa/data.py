"""Synthetic image tasks, non-IID class partitions and the labeled probe set.

The image is a 3x3 grid of cells. A class is an oriented stripe texture
(one of four families: horizontal, vertical, diagonal, anti-diagonal)
sitting in one particular cell. Each sample also carries distractor
textures of the other families in randomly chosen cells, plus clipped
Gaussian noise, so the class cell can only be found with orientation
selective features. Teachers that learned the target's family therefore
transfer better than the rest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

FAMILIES = ("h", "v", "d", "a")
GRID = 3


@dataclass(frozen=True)
class ClassProto:
    class_id: int
    family: str
    cell: int  # row-major index into the GRID x GRID layout

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not 0 <= self.cell < GRID * GRID:
            raise ValueError(f"cell {self.cell} outside the {GRID}x{GRID} grid")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: tuple[ClassProto, ...]
    n_train: int = 200
    n_test: int = 100
    noise: float = 0.3
    distractors: int = 6
    contrast_jitter: float = 0.5
    image_size: int = 12

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes)


@dataclass
class Dataset:
    x: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    y: np.ndarray  # (N,) int64 local labels
    classes: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.classes)


@dataclass(frozen=True)
class PartitionPlan:
    teachers: tuple[TaskSpec, ...]
    target: TaskSpec
    label_fraction: float = 0.1

    def __post_init__(self):
        seen: dict[int, str] = {}
        for t in self.teachers:
            for c in t.class_ids:
                if c in seen:
                    raise ValueError(f"class {c} shared by {seen[c]} and {t.name}")
                seen[c] = t.name
        for c in self.target.class_ids:
            if c in seen:
                raise ValueError(f"target class {c} also belongs to {seen[c]}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")


def texture(family: str, size: int, phase: int = 0) -> np.ndarray:
    r, c = np.indices((size, size))
    if family == "h":
        return ((r + phase) % 2 == 0).astype(float)
    if family == "v":
        return ((c + phase) % 2 == 0).astype(float)
    if family == "d":
        return ((r - c + phase) % 3 == 0).astype(float)
    if family == "a":
        return ((r + c + phase) % 3 == 0).astype(float)
    raise ValueError(f"unknown family {family!r}")


def _render(proto: ClassProto, n: int, spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    cell = size // GRID
    out = np.zeros((n, size, size, 1))
    others = [f for f in FAMILIES if f != proto.family]
    free = [c for c in range(GRID * GRID) if c != proto.cell]
    # noise 0 switches off every nuisance factor, distractors included
    k = min(spec.distractors, len(free)) if spec.noise > 0 else 0
    tex = {(f, p): texture(f, cell, p) for f in FAMILIES for p in range(3)}
    lo = 1.0 - spec.contrast_jitter

    def paint(i, c, fam):
        r0, c0 = (c // GRID) * cell, (c % GRID) * cell
        phase = int(rng.integers(3)) if spec.noise > 0 else 0
        amp = rng.uniform(lo, 1.0) if spec.noise > 0 else 1.0
        out[i, r0:r0 + cell, c0:c0 + cell, 0] = amp * tex[fam, phase]

    for i in range(n):
        paint(i, proto.cell, proto.family)
        if k:
            for c in rng.choice(free, size=k, replace=False):
                paint(i, int(c), others[int(rng.integers(len(others)))])
    if spec.noise > 0:
        out = out + rng.normal(0.0, spec.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def synth_generate(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    """(train, test) splits; labels are positions in ``spec.classes``."""
    if spec.n_train < 1 or spec.n_test < 1 or not spec.classes:
        raise ValueError(f"{spec.name}: task needs at least one class and one sample per split")
    if spec.image_size % GRID or spec.image_size < 2 * GRID:
        raise ValueError(f"{spec.name}: image_size must be a multiple of {GRID} and at least {2 * GRID}")
    rng = np.random.default_rng([seed, *spec.class_ids])
    splits = []
    for n in (spec.n_train, spec.n_test):
        xs, ys = [], []
        for label, proto in enumerate(spec.classes):
            xs.append(_render(proto, n, spec, rng))
            ys.append(np.full(n, label, dtype=np.int64))
        splits.append(Dataset(np.concatenate(xs), np.concatenate(ys), spec.class_ids))
    return splits[0], splits[1]


def make_probe(train: Dataset, label_fraction: float, seed: int) -> Dataset:
    """Stratified subsample keeping ceil(fraction * class size) per class, at least one."""
    if not 0 < label_fraction <= 1:
        raise ValueError(f"label_fraction must lie in (0, 1], got {label_fraction}")
    rng = np.random.default_rng(seed)
    keep = []
    labels = np.unique(train.y)
    n_classes = len(train.classes) if train.classes else int(labels.max()) + 1
    for c in range(n_classes):
        idx = np.flatnonzero(train.y == c)
        if idx.size == 0:
            raise ValueError(f"make_probe: class {c} has no samples")
        k = max(1, math.ceil(label_fraction * idx.size - 1e-9))
        keep.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return train.subset(np.concatenate(keep))


def batches(data: Dataset, batch_size: int, seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled minibatches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(len(data))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield data.x[idx], data.y[idx]


# (family, cell) per teacher class; the target takes horizontal textures in
# cells 0 and 4. Teachers 4 and 5 hold other horizontal cells, teacher 3
# mixes horizontal and vertical, teachers 0-2 hold the other families.
STANDARD_LAYOUT = (
    (("v", 0), ("v", 4)),
    (("d", 1), ("d", 5)),
    (("a", 2), ("a", 6)),
    (("h", 7), ("v", 8)),
    (("h", 1), ("h", 5)),
    (("h", 2), ("h", 6)),
)
STANDARD_TARGET = (("h", 0), ("h", 4))


def _class_id(family: str, cell: int) -> int:
    return FAMILIES.index(family) * GRID * GRID + cell


def standard_scenario(label_fraction: float = 0.1, n_train: int = 200, n_test: int = 100,
                      noise: float = 0.3, distractors: int = 6, contrast_jitter: float = 0.5) -> PartitionPlan:
    """Six two-class teachers and a fresh two-class target (see STANDARD_LAYOUT)."""
    def task(name, pairs):
        protos = tuple(ClassProto(_class_id(f, c), f, c) for f, c in pairs)
        return TaskSpec(name, protos, n_train, n_test, noise, distractors, contrast_jitter)

    teachers = tuple(task(f"teacher{n}", pairs) for n, pairs in enumerate(STANDARD_LAYOUT))
    return PartitionPlan(teachers, task("target", STANDARD_TARGET), label_fraction)


_HEADER = struct.Struct("<IIII")


def dump_dataset(data: Dataset, path) -> None:
    """Binary split file: u32 count, W, H, C; then per sample u8 label + f32 pixels."""
    n, h, w, c = data.x.shape
    if n and (data.y.min() < 0 or data.y.max() > 255):
        raise ValueError("labels must fit in one byte")
    buf = bytearray(_HEADER.pack(n, w, h, c))
    pix = data.x.astype("<f4")
    for i in range(n):
        buf.append(int(data.y[i]))
        buf += pix[i].tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte {len(raw)}")
    n, w, h, c = _HEADER.unpack_from(raw, 0)
    rec = 1 + 4 * h * w * c
    if len(raw) != _HEADER.size + n * rec:
        raise ValueError(f"{path}: expected {_HEADER.size + n * rec} bytes, found {len(raw)}")
    x = np.empty((n, h, w, c))
    y = np.empty(n, dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        y[i] = raw[off]
        x[i] = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=off + 1).reshape(h, w, c)
        off += rec
    return Dataset(x, y)
