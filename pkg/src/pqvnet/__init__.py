"""Security screening of power-grid operating points using a from-scratch CNN.

Pipeline: sample operating points around a base case, label them safe/unsafe
with an N-1 small-signal damping oracle, encode each point as an N x N x 3
PQV image, train a convolutional classifier with a weighted metric-augmented
loss, and compare the trained classifier against the analytic oracle on
quality and speed.

Submodules are imported lazily so the command-line front end can pin BLAS
thread counts before any numerics load.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("cli", "encoder", "evaluate", "grid", "nn", "stability", "train")

__all__ = [*_SUBMODULES, "__version__"]


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
