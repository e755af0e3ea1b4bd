"""Conservation-constrained Gaussian-process flux surrogates on directed graphs.

Submodules are loaded lazily so the CLI can pin BLAS thread counts before any
numerical import happens.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "datasets",
    "errors",
    "evaluation",
    "figures",
    "graph",
    "inference",
    "kernel",
    "objective",
    "runio",
    "solver",
    "trainer",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
