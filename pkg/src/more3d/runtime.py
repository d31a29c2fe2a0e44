"""Process-wide knobs. One pipeline per process; threads only cap the
parallelism of internal queries and never change results."""

from __future__ import annotations

import os

_threads = None


def get_threads() -> int:
    global _threads
    if _threads is None:
        env = os.environ.get("MORE_THREADS", "")
        _threads = int(env) if env.strip().isdigit() and int(env) > 0 else 1
    return _threads


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)
