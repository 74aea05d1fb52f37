"""Federated selective aggregation of decentralized pre-trained teachers."""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
