"""Desk-scale reference architectures.

All variants map a 12x12x1 input to a 3x3 feature grid, so any teacher's
hint and any student's tap agree spatially and differ only in channels.
"""

from __future__ import annotations

from .nn import NetworkSpec, conv, linear

INPUT_SHAPE = (12, 12, 1)
HINT_DIM = 8


def small(num_classes: int = 2, hint_dim: int = HINT_DIM) -> NetworkSpec:
    return NetworkSpec("small", INPUT_SHAPE, (conv(8, pool=True), conv(16, pool=True)), (linear(num_classes),), -1, hint_dim)


def wide(num_classes: int = 2, hint_dim: int = HINT_DIM) -> NetworkSpec:
    return NetworkSpec("wide", INPUT_SHAPE, (conv(12, pool=True), conv(24, pool=True)), (linear(num_classes),), -1, hint_dim)


def narrow(num_classes: int = 2, hint_dim: int = HINT_DIM) -> NetworkSpec:
    return NetworkSpec("narrow", INPUT_SHAPE, (conv(6, pool=True), conv(10, pool=True)), (linear(num_classes),), -1, hint_dim)


def deep(num_classes: int = 2, hint_dim: int = HINT_DIM) -> NetworkSpec:
    return NetworkSpec("deep", INPUT_SHAPE, (conv(8), conv(8, pool=True), conv(16, pool=True)), (linear(num_classes),), -1, hint_dim)


REGISTRY = {"small": small, "wide": wide, "narrow": narrow, "deep": deep}

# per-node architectures when the heterogeneous flag is set
HETEROGENEOUS = ("wide", "narrow", "deep", "small", "wide", "deep")


def get(name: str, num_classes: int = 2, hint_dim: int = HINT_DIM) -> NetworkSpec:
    try:
        return REGISTRY[name](num_classes, hint_dim)
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; known: {sorted(REGISTRY)}") from None
