# Worker pool for per-example, per-layer and per-model work.  Results come
# back in submission order, so every reduction sees the same sequence
# whatever the worker count is.

from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_worker_count() -> int:
    from psutil import cpu_count

    return cpu_count(logical=True) or 1


def parallel_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: Optional[int] = None,
    chunksize: Optional[int] = None,
) -> list[R]:
    """Ordered map over ``items``.  Runs inline for a single worker; ``fn``
    must be picklable (a module-level function or a functools.partial of
    one) otherwise."""
    items = list(items)
    if workers is None:
        workers = default_worker_count()
    workers = min(workers, len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items, chunksize=chunksize))
