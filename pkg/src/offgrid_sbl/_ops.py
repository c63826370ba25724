"""Matrix products with optional multiply-accumulate accounting.

The solvers route their dense products through :func:`mm` so that the
per-iteration cost can be measured in operation counts rather than wall
clock time::

    with count_ops() as ops:
        run_one_iteration()
    print(ops.total)
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OpCounter:
    total: int = 0
    by_kind: dict = field(default_factory=dict)

    def add(self, kind: str, n: int) -> None:
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


_active: ContextVar[OpCounter | None] = ContextVar("offgrid_sbl_ops", default=None)


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


def record(kind: str, n: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter.add(kind, int(n))


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b``, recording m*k*n multiply-accumulates."""
    out = a @ b
    m = a.shape[0] if a.ndim > 1 else 1
    k = a.shape[-1]
    n = b.shape[1] if b.ndim > 1 else 1
    record("matmul", m * k * n)
    return out
