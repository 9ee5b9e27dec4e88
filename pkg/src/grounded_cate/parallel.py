"""Thread-count resolution and seed derivation."""

from __future__ import annotations

import os

import numpy as np

THREADS_ENV = "GROUNDED_CATE_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    """Worker count: the environment variable wins, then ``requested``, then 1."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV}={env!r} is not an integer") from None
        return max(1, value)
    if requested is None:
        return 1
    if requested <= 0:
        return os.cpu_count() or 1
    return requested


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic child seed for ``(root, *keys)``; independent of scheduling."""
    ss = np.random.SeedSequence([int(root), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0] >> 1)
