"""Order-preserving worker pool for slide- and patch-level fan-out.

numpy releases the GIL inside its kernels, so a thread pool is enough for
generation, tiling and inference. ``threads == 1`` runs inline, which is
the deterministic single-threaded mode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_workers(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Apply ``fn`` to every item; results come back in input order."""
    seq: Sequence[T] = list(items)
    if threads <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=min(threads, len(seq))) as pool:
        return list(pool.map(fn, seq))


def chunked(n: int, size: int) -> list[slice]:
    """Contiguous slices covering ``range(n)`` in chunks of ``size``."""
    size = max(1, size)
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]
