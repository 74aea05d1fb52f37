"""Encoder/decoder networks, the 1x1-conv translator block, and parameter stores."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class SpecError(ValueError):
    """A NetworkSpec whose layer shapes do not chain."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "linear" or "identity"
    out: int = 0
    kernel: int = 3
    activation: str | None = "relu"
    pool: bool = False
    bias: bool = True


def conv(out: int, kernel: int = 3, activation: str | None = "relu", pool: bool = False, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv", out, kernel, activation, pool, bias)


def linear(out: int, activation: str | None = None, bias: bool = True) -> LayerSpec:
    return LayerSpec("linear", out, 1, activation, False, bias)


IDENTITY = LayerSpec("identity", activation=None)


@dataclass(frozen=True)
class NetworkSpec:
    """Layered encoder/decoder description.

    ``input_shape`` is (H, W, C); batches are NHWC. ``tap_index`` names the
    encoder layer whose output is the hidden representation used for
    saliency and distillation. ``hint_dim`` is the channel count every
    translator aligns features to.
    """

    name: str
    input_shape: tuple[int, int, int]
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    tap_index: int = -1
    hint_dim: int = 8

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "encoder", tuple(self.encoder))
        object.__setattr__(self, "decoder", tuple(self.decoder))
        if self.tap_index < 0:
            object.__setattr__(self, "tap_index", len(self.encoder) + self.tap_index)

    @property
    def tap(self) -> int:
        return self.tap_index

    @property
    def num_classes(self) -> int:
        return self.decoder[-1].out if self.decoder else 0

    def with_classes(self, num_classes: int, name: str | None = None) -> "NetworkSpec":
        head = self.decoder[-1]
        dec = self.decoder[:-1] + (LayerSpec(head.kind, num_classes, head.kernel, head.activation, head.pool, head.bias),)
        return NetworkSpec(name or self.name, self.input_shape, self.encoder, dec, self.tap_index, self.hint_dim)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """(name, in_shape, out_shape) per layer, per-sample shapes. Raises SpecError."""
        if not self.encoder:
            raise SpecError(f"{self.name}: encoder has no layers")
        if not self.decoder:
            raise SpecError(f"{self.name}: decoder has no layers")
        if not 0 <= self.tap_index < len(self.encoder):
            raise SpecError(f"{self.name}: tap_index {self.tap_index} outside encoder of {len(self.encoder)} layers")
        if self.hint_dim < 1:
            raise SpecError(f"{self.name}: hint_dim must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"{self.name}: input_shape must be (H, W, C) with positive entries")
        shapes = []
        cur: tuple[int, ...] = self.input_shape
        for prefix, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                name = f"{prefix}.{i}"
                out = _layer_out_shape(name, layer, cur)
                shapes.append((name, cur, out))
                cur = out
        if self.decoder[-1].kind != "linear":
            raise SpecError(f"{self.name}: decoder must end in a linear task head")
        return shapes

    def validate(self) -> None:
        self.layer_shapes()

    def tap_shape(self) -> tuple[int, ...]:
        return self.layer_shapes()[self.tap_index][2]

    def encoder_out_shape(self) -> tuple[int, ...]:
        return self.layer_shapes()[len(self.encoder) - 1][2]


def _layer_out_shape(name: str, layer: LayerSpec, cur: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "identity":
        return cur
    if layer.out < 1:
        raise SpecError(f"{name}: output size must be positive, got {layer.out}")
    if layer.activation not in (None, "relu"):
        raise SpecError(f"{name}: unknown activation {layer.activation!r}")
    if layer.kind == "conv":
        if len(cur) != 3:
            raise SpecError(f"{name}: conv needs an (H, W, C) input, got {cur}")
        if layer.kernel < 1 or layer.kernel % 2 == 0:
            raise SpecError(f"{name}: conv kernel must be odd, got {layer.kernel}")
        h, w, _ = cur
        if layer.pool:
            if h % 2 or w % 2:
                raise SpecError(f"{name}: 2x2 pooling needs even spatial dims, got {cur}")
            h, w = h // 2, w // 2
        return (h, w, layer.out)
    if layer.kind == "linear":
        if layer.pool:
            raise SpecError(f"{name}: linear layers cannot pool")
        return (layer.out,)
    raise SpecError(f"{name}: unknown layer kind {layer.kind!r}")


class Parameters(dict):
    """Ordered map from layer-qualified name to Tensor."""

    def copy(self) -> "Parameters":
        return Parameters((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())

    def frozen(self) -> "Parameters":
        return Parameters((k, Tensor(v.data.copy())) for k, v in self.items())

    def trainable(self) -> "Parameters":
        return Parameters((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def subset(self, names: Iterable[str]) -> "Parameters":
        return Parameters((k, self[k]) for k in names)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def digest(self) -> str:
        """SHA-256 over names, shapes and float64 payloads."""
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(repr(v.shape).encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def num_values(self) -> int:
        return sum(v.size for v in self.values())

    def same_layout(self, other: "Parameters") -> bool:
        return list(self) == list(other) and all(self[k].shape == other[k].shape for k in self)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "Parameters":
        return cls((k, Tensor(np.asarray(v, dtype=np.float64), requires_grad=requires_grad)) for k, v in arrays.items())


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, relu: bool) -> np.ndarray:
    if relu:
        limit = np.sqrt(6.0 / fan_in)
    else:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build(spec: NetworkSpec, seed: int) -> Parameters:
    """Fresh parameters: He-uniform for relu layers, Xavier-uniform otherwise, zero biases."""
    shapes = spec.layer_shapes()
    rng = np.random.default_rng(seed)
    params = Parameters()
    layers = list(spec.encoder) + list(spec.decoder)
    for (name, in_shape, _), layer in zip(shapes, layers):
        if layer.kind == "identity":
            continue
        relu = layer.activation == "relu"
        if layer.kind == "conv":
            cin = in_shape[2]
            k = layer.kernel
            shape = (k, k, cin, layer.out)
            w = _init_weight(rng, shape, k * k * cin, k * k * layer.out, relu)
        else:
            fan_in = int(np.prod(in_shape))
            shape = (fan_in, layer.out)
            w = _init_weight(rng, shape, fan_in, layer.out, relu)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        if layer.bias:
            params[f"{name}.bias"] = Tensor(np.zeros(layer.out), requires_grad=True)
    return params


def _as_batch(spec: NetworkSpec, x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.data.ndim != 4 or xt.shape[1:] != spec.input_shape:
        raise ShapeError(f"{spec.name}: input shape {xt.shape} does not match (N,) + {spec.input_shape}")
    return xt


def _apply(layer: LayerSpec, name: str, params: Parameters, h: Tensor) -> Tensor:
    if layer.kind == "identity":
        return h
    if layer.kind == "conv":
        h = T.conv2d(h, params[f"{name}.weight"])
    else:
        if h.data.ndim != 2:
            h = T.flatten(h)
        h = T.matmul(h, params[f"{name}.weight"])
    if layer.bias:
        h = T.add_bias(h, params[f"{name}.bias"])
    if layer.activation == "relu":
        h = T.relu(h)
    if layer.pool:
        h = T.mean_pool2x2(h)
    return h


def forward_encoder(params: Parameters, spec: NetworkSpec, x, upto: int | None = None) -> Tensor:
    h = _as_batch(spec, x)
    last = len(spec.encoder) - 1 if upto is None else upto
    if not 0 <= last < len(spec.encoder):
        raise SpecError(f"{spec.name}: layer index {last} out of range")
    for i, layer in enumerate(spec.encoder[: last + 1]):
        h = _apply(layer, f"encoder.{i}", params, h)
    return h


def forward_tap(params: Parameters, spec: NetworkSpec, x) -> Tensor:
    """Raw output of the tap layer for a batch ``x``."""
    return forward_encoder(params, spec, x, spec.tap_index)


def forward_logits(params: Parameters, spec: NetworkSpec, x) -> Tensor:
    h = forward_encoder(params, spec, x)
    return decode(params, spec, h)


def decode(params: Parameters, spec: NetworkSpec, features: Tensor) -> Tensor:
    h = features
    for i, layer in enumerate(spec.decoder):
        h = _apply(layer, f"decoder.{i}", params, h)
    return h


def predict(params: Parameters, spec: NetworkSpec, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward_logits(params, spec, x[i:i + batch_size]).data.argmax(axis=1))
    return np.concatenate(out)


def accuracy(params: Parameters, spec: NetworkSpec, x, y) -> float:
    return float(np.mean(predict(params, spec, x) == np.asarray(y)))


def mean_loss(params: Parameters, spec: NetworkSpec, x, y) -> float:
    with T.no_grad():
        return T.softmax_cross_entropy(forward_logits(params, spec, x), y).item()


def split_roles(params: Parameters, spec: NetworkSpec) -> tuple[Parameters, Parameters]:
    """(encoder view, decoder view). Views share tensors with ``params``."""
    spec.validate()
    enc = Parameters((k, v) for k, v in params.items() if k.startswith("encoder."))
    dec = Parameters((k, v) for k, v in params.items() if k.startswith("decoder."))
    return enc, dec


def avg_params(members: Sequence[Parameters], weights: Sequence[float] | None = None) -> Parameters:
    """Elementwise (weighted) mean of parameter stores sharing one layout.

    The reduction sorts member values per element before summing, so the
    result does not depend on member order.
    """
    if not members:
        raise ValueError("avg_params: empty list")
    first = members[0]
    for i, m in enumerate(members[1:], start=1):
        if not first.same_layout(m):
            raise SpecError(f"avg_params: member {i} does not share the layout of member 0")
    k = len(members)
    if weights is None:
        w = np.full(k, 1.0 / k)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (k,):
            raise ValueError(f"avg_params: {k} members but {w.size} weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"avg_params: weights must be nonnegative and sum to 1, got {w.tolist()}")
    keep = np.flatnonzero(w > 0)
    out = Parameters()
    for name in first:
        if keep.size == 1:
            out[name] = Tensor(members[keep[0]][name].data.copy(), requires_grad=True)
            continue
        stack = np.stack([members[i][name].data.reshape(-1) for i in keep])
        wk = np.broadcast_to(w[keep][:, None], stack.shape)
        order = np.lexsort((wk, stack), axis=0)
        vals = np.take_along_axis(stack, order, axis=0)
        ws = np.take_along_axis(wk, order, axis=0)
        ref = vals[0]
        # shifting by the per-element minimum keeps identical members exact
        acc = ref + (ws[1:] * (vals[1:] - ref)).sum(axis=0)
        out[name] = Tensor(acc.reshape(first[name].shape), requires_grad=True)
    return out


@dataclass
class TranslatorBlock:
    """Three 1x1 convolutions (relu between) mapping features to ``hint_dim`` channels."""

    in_channels: int
    hint_dim: int
    params: Parameters = field(default_factory=Parameters)

    def copy(self) -> "TranslatorBlock":
        return TranslatorBlock(self.in_channels, self.hint_dim, self.params.copy())


def build_translator(in_channels: int, hint_dim: int, seed: int, identity: bool = False) -> TranslatorBlock:
    rng = np.random.default_rng(seed)
    params = Parameters()
    widths = [in_channels, hint_dim, hint_dim, hint_dim]
    for i in range(3):
        cin, cout = widths[i], widths[i + 1]
        if identity:
            if cin != cout:
                raise SpecError(f"identity translator needs in_channels == hint_dim, got {cin} vs {cout}")
            w = np.eye(cin).reshape(1, 1, cin, cout)
        else:
            w = _init_weight(rng, (1, 1, cin, cout), cin, cout, relu=i < 2)
        params[f"translator.{i}.weight"] = Tensor(w, requires_grad=True)
        params[f"translator.{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return TranslatorBlock(in_channels, hint_dim, params)


def translate(block: TranslatorBlock, feature: Tensor) -> Tensor:
    if feature.data.ndim != 4 or feature.shape[3] != block.in_channels:
        raise ShapeError(f"translate: feature {feature.shape} does not have {block.in_channels} channels")
    h = feature
    for i in range(3):
        h = T.conv2d(h, block.params[f"translator.{i}.weight"])
        h = T.add_bias(h, block.params[f"translator.{i}.bias"])
        if i < 2:
            h = T.relu(h)
    return h
