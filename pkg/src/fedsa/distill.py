"""Feature distillation of one teacher into a local student, run at the teacher's node."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import nn
from . import tensor as T


class DistillationError(RuntimeError):
    pass


@dataclass
class TeacherNode:
    """A frozen pre-trained teacher and its private data. Never leaves its node."""

    node_id: int
    spec: nn.NetworkSpec
    params: nn.Parameters
    translator: nn.TranslatorBlock
    train: D.Dataset
    test: D.Dataset | None = None
    _hints: np.ndarray | None = field(default=None, repr=False)

    def hints(self) -> np.ndarray:
        """Aligned teacher features for every private training sample (cached)."""
        if self._hints is None:
            self._hints = teacher_features(self, self.train.x)
        return self._hints

    def digest(self) -> str:
        return self.params.digest() + self.translator.params.digest()


def teacher_features(node: TeacherNode, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            feat = nn.forward_encoder(node.params, node.spec, x[i:i + batch_size])
            out.append(nn.translate(node.translator, feat).data)
    return np.concatenate(out)


@dataclass
class Hint:
    teacher: np.ndarray  # aligned teacher feature, treated as a constant
    student: T.Tensor

    def __post_init__(self):
        self.teacher = self.teacher.data if isinstance(self.teacher, T.Tensor) else np.asarray(self.teacher, dtype=np.float64)
        if self.teacher.shape != self.student.shape:
            raise T.ShapeError(f"hint shapes differ: teacher {self.teacher.shape} vs student {self.student.shape}")


def kd_loss(hint: Hint) -> T.Tensor:
    """Half the squared L2 distance between aligned teacher and student features."""
    diff = T.subtract(T.Tensor(hint.teacher), hint.student)
    return T.scale(T.sum_of_squares(diff), 0.5)


def batch_kd_loss(hint: Hint) -> T.Tensor:
    """``kd_loss`` averaged over the leading batch axis."""
    return T.scale(kd_loss(hint), 1.0 / hint.student.shape[0])


@dataclass
class LocalStudentState:
    student_params: nn.Parameters
    translator: nn.TranslatorBlock
    teacher_id: int
    train_translator: bool = True
    epoch: int = 0
    batches_seen: int = 0


@dataclass
class Upload:
    """The only payload a node sends back: student parameters plus loss scalars."""

    node_id: int
    params: nn.Parameters
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def _tapped_names(spec: nn.NetworkSpec, params: nn.Parameters) -> list[str]:
    prefixes = tuple(f"encoder.{i}." for i in range(spec.tap_index + 1))
    return [k for k in params if k.startswith(prefixes)]


def local_distill(node: TeacherNode, state: LocalStudentState, student_spec: nn.NetworkSpec,
                  epochs: int, lr: float, batch_size: int = 16, seed=0,
                  clip_norm: float | None = None) -> Upload:
    """Plain minibatch SGD on the feature distillation loss over the node's private data.

    Updates ``state`` in place (student params and, unless frozen, the
    translator) and returns the upload for the center. ``clip_norm`` bounds
    the joint gradient norm per step; hint energy differs a lot across teachers.
    """
    if len(node.train) == 0:
        raise DistillationError(f"node {node.node_id}: private dataset is empty")
    hints = node.hints()
    tap = student_spec.tap_shape()
    if len(tap) != 3 or tap[:2] != hints.shape[1:3]:
        raise DistillationError(
            f"node {node.node_id}: student tap {tap} is not spatially aligned with teacher hints {hints.shape[1:]}")
    params = state.student_params
    names = _tapped_names(student_spec, params)
    trainable = [params[k] for k in names]
    if state.train_translator:
        trainable += list(state.translator.params.values())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(node.train)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            try:
                feat = nn.forward_tap(params, student_spec, node.train.x[idx])
                loss = batch_kd_loss(Hint(hints[idx], nn.translate(state.translator, feat)))
            except T.NonFiniteError as exc:
                raise DistillationError(
                    f"node {node.node_id}: non-finite value at epoch {epoch}, batch {b // batch_size}: {exc}") from exc
            total += loss.item() * len(idx)
            if loss.requires_grad:
                T.backward(loss)
                if clip_norm:
                    T.clip_grad_norm(trainable, clip_norm)
                T.sgd_step([p for p in trainable if p.grad is not None], lr)
            state.batches_seen += 1
        state.epoch += 1
        losses.append(total / n)
    return Upload(node.node_id, params, losses)
