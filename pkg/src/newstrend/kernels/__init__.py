"""Model kernels: per-sample backends plus the shared slab engine.

Two interchangeable per-sample implementations back ``run_sample``: the
compiled extension (``_core``, built from Cython) and the pure-Python
module (``_numpy``).  Whichever imports first wins, compiled preferred,
and both stay importable so tests and the benchmark can compare them.

The ``batch_*`` entry points always come from ``_batched``: profiling
showed BLAS-backed slab operations beat per-sample loops for batch work at
this model's sizes, whichever backend is installed, and sharing one batch
engine keeps training results identical with and without the extension.
The compiled core earns its keep on per-sample latency (traces, attention
export, gradient checks); ``benchmarks/bench_kernels.py`` has numbers.
"""

from __future__ import annotations

from . import _batched, _numpy
from ._batched import batch_grads, batch_losses, batch_probs  # noqa: F401

try:
    from . import _core  # type: ignore[attr-defined]

    _impl = _core
    BACKEND = "compiled"
except ImportError:
    _core = None
    _impl = _numpy
    BACKEND = "numpy"

run_sample = _impl.run_sample


def backend() -> str:
    """Name of the backend serving ``run_sample``."""
    return BACKEND


def available() -> list[str]:
    return ["numpy"] + (["compiled"] if _core is not None else [])


def get(name: str):
    """Fetch a specific per-sample backend (for benchmarks and tests)."""
    if name == "numpy":
        return _numpy
    if name == "compiled" and _core is not None:
        return _core
    raise ValueError(f"backend {name!r} is not available (have {available()})")
